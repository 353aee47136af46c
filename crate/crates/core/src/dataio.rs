//! Voxel ground-truth files and synthetic scenes.
//!
//! A frame is three files sharing a stem: `<stem>.bin` (occupancy, one bit
//! per voxel), `<stem>.label` (u16 little-endian per voxel) and
//! `<stem>.invalid` (one bit per voxel). Voxels follow the grid's linear
//! order. Raw label ids go through an explicit [`LabelMap`].
//!
//! Decoding is lossy by design: labels of invalid or unoccupied voxels are
//! ignored. [`encode`] writes the canonical form (those labels and the
//! occupancy bit of invalid voxels are zero), so byte round-trips hold for
//! canonical files and an injective label map.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{unchecked_coord, ClassId, GridDims, SemanticGrid, DEFAULT_INVALID_ID, EMPTY_CLASS};
use crate::toymodel::FeatureVolume;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitOrder {
    /// The most significant bit of each byte holds the first voxel.
    #[default]
    MsbFirst,
    LsbFirst,
}

impl BitOrder {
    fn mask(self, v: usize) -> u8 {
        match self {
            BitOrder::MsbFirst => 0x80 >> (v % 8),
            BitOrder::LsbFirst => 1 << (v % 8),
        }
    }
}

fn bit(bytes: &[u8], v: usize, order: BitOrder) -> bool {
    bytes[v / 8] & order.mask(v) != 0
}

fn set_bit(bytes: &mut [u8], v: usize, order: BitOrder) {
    bytes[v / 8] |= order.mask(v);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelFileSet {
    pub occupancy: Vec<u8>,
    pub labels: Vec<u8>,
    pub invalid: Vec<u8>,
}

impl VoxelFileSet {
    /// Byte lengths of (occupancy, labels, invalid) for a grid.
    pub fn expected_lengths(dims: &GridDims) -> (usize, usize, usize) {
        let v = dims.volume();
        (v.div_ceil(8), 2 * v, v.div_ceil(8))
    }

    pub fn zeros(dims: &GridDims) -> Self {
        let (o, l, i) = Self::expected_lengths(dims);
        Self {
            occupancy: vec![0; o],
            labels: vec![0; l],
            invalid: vec![0; i],
        }
    }

    pub fn check_lengths(&self, dims: &GridDims) -> Result<()> {
        let (o, l, i) = Self::expected_lengths(dims);
        for (file, expected, actual) in [
            ("occupancy", o, self.occupancy.len()),
            ("labels", l, self.labels.len()),
            ("invalid", i, self.invalid.len()),
        ] {
            if expected != actual {
                return Err(Error::Length {
                    file: file.into(),
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    pub fn paths(stem: &Path) -> [PathBuf; 3] {
        ["bin", "label", "invalid"].map(|ext| stem.with_extension(ext))
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let [o, l, i] = Self::paths(stem);
        let read = |p: &PathBuf| std::fs::read(p).map_err(|e| Error::io(p, e));
        Ok(Self {
            occupancy: read(&o)?,
            labels: read(&l)?,
            invalid: read(&i)?,
        })
    }

    /// Read and check byte lengths, naming the offending file on mismatch.
    pub fn read_checked(stem: &Path, dims: &GridDims) -> Result<Self> {
        let files = Self::read(stem)?;
        files.check_lengths(dims).map_err(|e| match e {
            Error::Length { file, expected, actual } => {
                let ext = match file.as_str() {
                    "occupancy" => "bin",
                    "labels" => "label",
                    _ => "invalid",
                };
                Error::Length {
                    file: stem.with_extension(ext).display().to_string(),
                    expected,
                    actual,
                }
            }
            other => other,
        })?;
        Ok(files)
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        let [o, l, i] = Self::paths(stem);
        for (p, bytes) in [(o, &self.occupancy), (l, &self.labels), (i, &self.invalid)] {
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Raw benchmark label id to contiguous training class id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    map: BTreeMap<u16, ClassId>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// `raw -> raw` for `0..num_classes`.
    pub fn identity(num_classes: usize) -> Self {
        Self {
            map: (0..num_classes as u16).map(|c| (c, c)).collect(),
        }
    }

    pub fn insert(&mut self, raw: u16, class: ClassId) -> Option<ClassId> {
        self.map.insert(raw, class)
    }

    pub fn get(&self, raw: u16) -> Option<ClassId> {
        self.map.get(&raw).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Text form: one `raw_id train_id` pair per line, `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Format {
            file: source.to_string(),
            msg: format!("line {line}: {msg}"),
        };
        let mut out = Self::new();
        for (n, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [raw, class] = fields[..] else {
                return Err(err(n + 1, format!("expected two ids, got `{line}`")));
            };
            let parse = |s: &str| s.parse::<u16>().map_err(|e| err(n + 1, format!("`{s}`: {e}")));
            let (raw, class) = (parse(raw)?, parse(class)?);
            if out.insert(raw, class).is_some() {
                return Err(err(n + 1, format!("raw id {raw} mapped twice")));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// For each class, the smallest raw id mapping to it.
    pub fn inverse(&self) -> InverseLabelMap {
        let mut inv = BTreeMap::new();
        for (&raw, &class) in &self.map {
            inv.entry(class).or_insert(raw);
        }
        InverseLabelMap(inv)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InverseLabelMap(BTreeMap<ClassId, u16>);

impl InverseLabelMap {
    pub fn get(&self, class: ClassId) -> Option<u16> {
        self.0.get(&class).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecOptions {
    pub num_classes: usize,
    pub invalid_id: ClassId,
    pub bit_order: BitOrder,
}

impl CodecOptions {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            invalid_id: DEFAULT_INVALID_ID,
            bit_order: BitOrder::MsbFirst,
        }
    }
}

/// Invalid wins over occupancy; unoccupied voxels are empty; occupied voxels
/// take their mapped label.
pub fn decode(files: &VoxelFileSet, dims: &GridDims, map: &LabelMap, opts: &CodecOptions) -> Result<SemanticGrid> {
    files.check_lengths(dims)?;
    let order = opts.bit_order;
    let mut labels = vec![EMPTY_CLASS; dims.volume()];
    for (v, out) in labels.iter_mut().enumerate() {
        if bit(&files.invalid, v, order) {
            *out = opts.invalid_id;
        } else if bit(&files.occupancy, v, order) {
            let raw = u16::from_le_bytes([files.labels[2 * v], files.labels[2 * v + 1]]);
            let class = map.get(raw).ok_or(Error::UnmappedLabel(raw))?;
            if class as usize >= opts.num_classes {
                return Err(Error::Format {
                    file: "label map".into(),
                    msg: format!("raw id {raw} maps to {class}, outside [0, {})", opts.num_classes),
                });
            }
            *out = class;
        }
    }
    SemanticGrid::new(*dims, labels, opts.num_classes, opts.invalid_id)
}

pub fn encode(g: &SemanticGrid, inverse: &InverseLabelMap, bit_order: BitOrder) -> Result<VoxelFileSet> {
    let mut files = VoxelFileSet::zeros(g.dims());
    for (v, &l) in g.labels().iter().enumerate() {
        if l == g.invalid_id() {
            set_bit(&mut files.invalid, v, bit_order);
        } else if l != EMPTY_CLASS {
            let raw = inverse.get(l).ok_or(Error::UnmappedClass(l))?;
            set_bit(&mut files.occupancy, v, bit_order);
            files.labels[2 * v..2 * v + 2].copy_from_slice(&raw.to_le_bytes());
        }
    }
    Ok(files)
}

/// Axis-aligned shapes in full-resolution voxel indices; ranges are half-open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Fills `z in [0, height)` everywhere.
    GroundPlane { class: ClassId, height: usize },
    Box { class: ClassId, min: [usize; 3], max: [usize; 3] },
    /// Square column of side `width` from `base` up to `base + height`.
    Pole {
        class: ClassId,
        x: usize,
        y: usize,
        width: usize,
        base: usize,
        height: usize,
    },
    /// Marks a box as unknown space.
    Unknown { min: [usize; 3], max: [usize; 3] },
}

impl Primitive {
    fn class(&self) -> Option<ClassId> {
        match *self {
            Primitive::GroundPlane { class, .. } | Primitive::Box { class, .. } | Primitive::Pole { class, .. } => {
                Some(class)
            }
            Primitive::Unknown { .. } => None,
        }
    }

    fn bounds(&self, d: &GridDims) -> ([usize; 3], [usize; 3]) {
        match *self {
            Primitive::GroundPlane { height, .. } => ([0, 0, 0], [d.x, d.y, height]),
            Primitive::Box { min, max, .. } | Primitive::Unknown { min, max } => (min, max),
            Primitive::Pole {
                x,
                y,
                width,
                base,
                height,
                ..
            } => ([x, y, base], [x + width, y + width, base + height]),
        }
    }
}

/// How features are derived from a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub dim: usize,
    /// Full-resolution voxels per coarse voxel along each axis.
    pub coarse_factor: [usize; 3],
    /// Scale of the class-fraction channels.
    pub signal: f64,
    /// Standard deviation of the noise on every channel.
    pub noise: f64,
    /// Additional noise standard deviation on coarse voxels straddling a
    /// boundary: their valid children carry more than one class, so at least
    /// one child has non-zero LGA.
    pub boundary_noise: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            coarse_factor: [2, 2, 2],
            signal: 1.0,
            noise: 0.3,
            boundary_noise: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dims: GridDims,
    pub num_classes: usize,
    pub invalid_id: ClassId,
    pub primitives: Vec<Primitive>,
    pub features: FeatureSpec,
    pub seed: u64,
}

/// Parameters of the random plane-and-boxes layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub ground_height: usize,
    pub boxes: usize,
    /// Inclusive range of box footprint side lengths, in voxels.
    pub box_side: [usize; 2],
    pub poles: usize,
    pub unknown_regions: usize,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            ground_height: 2,
            boxes: 12,
            box_side: [4, 12],
            poles: 8,
            unknown_regions: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if self.num_classes < 2 {
            return Err(Error::config("a scene needs at least two classes"));
        }
        if (self.invalid_id as usize) < self.num_classes {
            return Err(Error::config("invalid id collides with a class id"));
        }
        for (n, p) in self.primitives.iter().enumerate() {
            if let Some(c) = p.class() {
                if c as usize >= self.num_classes {
                    return Err(Error::config(format!("primitive {n}: class {c} >= {}", self.num_classes)));
                }
            }
            let (lo, hi) = p.bounds(d);
            let ext = [d.x, d.y, d.z];
            if (0..3).any(|a| lo[a] >= hi[a] || hi[a] > ext[a]) {
                return Err(Error::config(format!("primitive {n} is empty or leaves the grid: {lo:?}..{hi:?}")));
            }
        }
        let f = &self.features;
        if f.dim < self.num_classes {
            return Err(Error::config(format!(
                "feature dim {} is smaller than the class count {}",
                f.dim, self.num_classes
            )));
        }
        if !(f.signal.is_finite() && f.noise >= 0.0 && f.boundary_noise >= 0.0) {
            return Err(Error::config("feature scales must be finite and noise non-negative"));
        }
        d.coarsened(f.coarse_factor)?;
        Ok(())
    }

    /// Ground plane, boxes and poles at seeded random positions. Class 1 is
    /// ground; with four or more classes the last class is reserved for poles.
    pub fn plane_and_boxes(
        dims: GridDims,
        num_classes: usize,
        layout: &LayoutSpec,
        features: FeatureSpec,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("a scene needs at least two classes"));
        }
        if layout.ground_height == 0 || layout.ground_height >= dims.z {
            return Err(Error::config("ground height must leave room above it"));
        }
        let c = num_classes as ClassId;
        let (box_classes, pole_class) = match c {
            2 => (1..2, 1),
            3 => (2..3, 2),
            _ => (2..c - 1, c - 1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = layout.ground_height;
        let mut prims = vec![Primitive::GroundPlane { class: 1, height: g }];
        let span = |rng: &mut ChaCha8Rng, extent: usize, lo: usize, hi: usize| {
            let len = rng.gen_range(lo.min(extent)..=hi.min(extent));
            let start = rng.gen_range(0..=extent - len);
            (start, start + len)
        };
        let [side_lo, side_hi] = layout.box_side;
        if side_lo == 0 || side_lo > side_hi {
            return Err(Error::config(format!("box side range {side_lo}..={side_hi} is empty")));
        }
        for _ in 0..layout.boxes {
            let (x0, x1) = span(&mut rng, dims.x, side_lo, side_hi);
            let (y0, y1) = span(&mut rng, dims.y, side_lo, side_hi);
            let top = rng.gen_range(g + 1..=dims.z);
            prims.push(Primitive::Box {
                class: rng.gen_range(box_classes.clone()),
                min: [x0, y0, g],
                max: [x1, y1, top],
            });
        }
        for _ in 0..layout.poles {
            let width = rng.gen_range(1..=2.min(dims.x).min(dims.y));
            let x = rng.gen_range(0..=dims.x - width);
            let y = rng.gen_range(0..=dims.y - width);
            let height = rng.gen_range(1..=dims.z - g);
            prims.push(Primitive::Pole {
                class: pole_class,
                x,
                y,
                width,
                base: g,
                height,
            });
        }
        for _ in 0..layout.unknown_regions {
            let (x0, x1) = span(&mut rng, dims.x, 1, dims.x / 8 + 1);
            let (y0, y1) = span(&mut rng, dims.y, 1, dims.y / 8 + 1);
            prims.push(Primitive::Unknown {
                min: [x0, y0, 0],
                max: [x1, y1, dims.z],
            });
        }
        let spec = Self {
            dims,
            num_classes,
            invalid_id: DEFAULT_INVALID_ID,
            primitives: prims,
            features,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Rasterize the primitives in order (later ones overwrite earlier ones).
pub fn rasterize(spec: &SceneSpec) -> Result<SemanticGrid> {
    spec.validate()?;
    let d = spec.dims;
    let mut labels = vec![EMPTY_CLASS; d.volume()];
    for p in &spec.primitives {
        let value = p.class().unwrap_or(spec.invalid_id);
        let (lo, hi) = p.bounds(&d);
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                let row = (i * d.y + j) * d.z;
                labels[row + lo[2]..row + hi[2]].fill(value);
            }
        }
    }
    SemanticGrid::new(d, labels, spec.num_classes, spec.invalid_id)
}

/// Ground truth plus coarse features: per coarse voxel, the fraction of each
/// class among its valid children scaled by `signal`, normalized position in
/// the next three channels when they exist, Gaussian noise everywhere and
/// extra noise where the children disagree.
pub fn generate_scene(spec: &SceneSpec) -> Result<(SemanticGrid, FeatureVolume)> {
    let gt = rasterize(spec)?;
    let features = scene_features(&gt, &spec.features, spec.seed)?;
    Ok((gt, features))
}

/// The coarse features of `generate_scene` for an arbitrary ground truth,
/// e.g. a decoded frame.
pub fn scene_features(gt: &SemanticGrid, f: &FeatureSpec, seed: u64) -> Result<FeatureVolume> {
    let d = *gt.dims();
    let coarse = d.coarsened(f.coarse_factor)?;
    let nc = gt.num_classes();
    if f.dim < nc {
        return Err(Error::config(format!("feature dim {} below class count {nc}", f.dim)));
    }
    let invalid_id = gt.invalid_id();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let mut out = vec![0.0; coarse.volume() * f.dim];
    let [fx, fy, fz] = f.coarse_factor;
    let extent = [coarse.x, coarse.y, coarse.z];
    for (v, row) in out.chunks_exact_mut(f.dim).enumerate() {
        let c = unchecked_coord(v, &coarse);
        let mut counts = vec![0usize; nc];
        let mut valid = 0usize;
        for i in c.i * fx..(c.i + 1) * fx {
            for j in c.j * fy..(c.j + 1) * fy {
                for k in c.k * fz..(c.k + 1) * fz {
                    let idx = (i * d.y + j) * d.z + k;
                    let l = gt.labels()[idx];
                    if l == invalid_id {
                        continue;
                    }
                    counts[l as usize] += 1;
                    valid += 1;
                }
            }
        }
        if valid > 0 {
            for (r, &n) in row.iter_mut().zip(&counts) {
                *r = f.signal * n as f64 / valid as f64;
            }
        }
        let pos = [c.i, c.j, c.k];
        for a in 0..3 {
            if let Some(r) = row.get_mut(nc + a) {
                *r = 2.0 * (pos[a] as f64 + 0.5) / extent[a] as f64 - 1.0;
            }
        }
        let on_boundary = counts.iter().filter(|&&n| n > 0).count() > 1;
        let sigma = if on_boundary {
            (f.noise * f.noise + f.boundary_noise * f.boundary_noise).sqrt()
        } else {
            f.noise
        };
        for r in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *r += sigma * z;
        }
    }
    FeatureVolume::new(coarse, f.dim, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelCoord;
    use crate::hardness::{lga_at, lga_histogram, LgaConfig};

    fn dims(x: usize, y: usize, z: usize) -> GridDims {
        GridDims::new(x, y, z, 0.2).unwrap()
    }

    fn random_canonical(d: &GridDims, seed: u64, map: &LabelMap, classes: &[ClassId]) -> VoxelFileSet {
        let inv = map.inverse();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelFileSet::zeros(d);
        for v in 0..d.volume() {
            match rng.gen_range(0..4) {
                0 => set_bit(&mut f.invalid, v, BitOrder::MsbFirst),
                1 => {}
                _ => {
                    let c = classes[rng.gen_range(0..classes.len())];
                    set_bit(&mut f.occupancy, v, BitOrder::MsbFirst);
                    f.labels[2 * v..2 * v + 2].copy_from_slice(&inv.get(c).unwrap().to_le_bytes());
                }
            }
        }
        f
    }

    fn kitti_like_map() -> LabelMap {
        let mut m = LabelMap::new();
        for (raw, c) in [(0, 0), (10, 1), (40, 2), (50, 3), (80, 4)] {
            m.insert(raw, c);
        }
        m
    }

    #[test]
    fn benchmark_sized_all_zero_files() {
        let d = GridDims::new(256, 256, 32, 0.2).unwrap();
        assert_eq!(VoxelFileSet::expected_lengths(&d), (262144, 4194304, 262144));
        let g = decode(&VoxelFileSet::zeros(&d), &d, &LabelMap::identity(20), &CodecOptions::new(20)).unwrap();
        assert!(g.labels().iter().all(|&l| l == EMPTY_CLASS));
    }

    #[test]
    fn single_bit_at_voxel_zero() {
        let d = dims(4, 4, 4);
        let mut f = VoxelFileSet::zeros(&d);
        f.occupancy[0] = 0x80;
        f.labels[0] = 10;
        let g = decode(&f, &d, &kitti_like_map(), &CodecOptions::new(5)).unwrap();
        assert_eq!(g.get(VoxelCoord::new(0, 0, 0)).unwrap(), 1);
        assert_eq!(g.labels().iter().filter(|&&l| l != 0).count(), 1);

        let lsb = CodecOptions {
            bit_order: BitOrder::LsbFirst,
            ..CodecOptions::new(5)
        };
        let g = decode(&f, &d, &kitti_like_map(), &lsb).unwrap();
        assert_eq!(g.labels()[7], 0, "label bytes of voxel 7 are zero, which maps to empty");
        assert_eq!(g.labels()[0], 0);
    }

    #[test]
    fn invalid_beats_occupancy() {
        let d = dims(1, 1, 8);
        let mut f = VoxelFileSet::zeros(&d);
        f.occupancy[0] = 0xff;
        f.invalid[0] = 0x80;
        for v in 0..8 {
            f.labels[2 * v] = 10;
        }
        let g = decode(&f, &d, &kitti_like_map(), &CodecOptions::new(5)).unwrap();
        assert_eq!(g.labels()[0], 255);
        assert!(g.labels()[1..].iter().all(|&l| l == 1));
    }

    #[test]
    fn length_and_mapping_errors() {
        let d = dims(4, 4, 4);
        let mut f = VoxelFileSet::zeros(&d);
        f.labels.pop();
        match decode(&f, &d, &kitti_like_map(), &CodecOptions::new(5)) {
            Err(Error::Length { file, expected, actual }) => {
                assert_eq!(file, "labels");
                assert_eq!((expected, actual), (128, 127));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut f = VoxelFileSet::zeros(&d);
        f.occupancy[0] = 0x80;
        f.labels[0] = 99;
        assert!(matches!(
            decode(&f, &d, &kitti_like_map(), &CodecOptions::new(5)),
            Err(Error::UnmappedLabel(99))
        ));
        let g = SemanticGrid::filled(d, 3, 5, 255).unwrap();
        assert!(matches!(
            encode(&g, &LabelMap::identity(2).inverse(), BitOrder::MsbFirst),
            Err(Error::UnmappedClass(3))
        ));
    }

    #[test]
    fn round_trips_on_canonical_files() {
        let d = dims(8, 8, 4);
        let map = kitti_like_map();
        for seed in 0..20 {
            for order in [BitOrder::MsbFirst, BitOrder::LsbFirst] {
                let f = random_canonical(&d, seed, &map, &[1, 2, 3, 4]);
                let f = if order == BitOrder::MsbFirst {
                    f
                } else {
                    let g = decode(&f, &d, &map, &CodecOptions::new(5)).unwrap();
                    encode(&g, &map.inverse(), order).unwrap()
                };
                let opts = CodecOptions {
                    bit_order: order,
                    ..CodecOptions::new(5)
                };
                let g = decode(&f, &d, &map, &opts).unwrap();
                assert_eq!(encode(&g, &map.inverse(), order).unwrap(), f);
                let again = decode(&encode(&g, &map.inverse(), order).unwrap(), &d, &map, &opts).unwrap();
                assert_eq!(again, g);
            }
        }
    }

    #[test]
    fn file_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dims(8, 8, 4);
        let f = random_canonical(&d, 3, &kitti_like_map(), &[1, 2]);
        let stem = dir.path().join("000000");
        f.write(&stem).unwrap();
        assert_eq!(VoxelFileSet::read_checked(&stem, &d).unwrap(), f);
        std::fs::write(stem.with_extension("invalid"), [0u8; 3]).unwrap();
        let e = VoxelFileSet::read_checked(&stem, &d).unwrap_err();
        assert!(e.to_string().contains("000000.invalid"), "{e}");
        assert!(matches!(
            VoxelFileSet::read(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn label_map_text() {
        let m = LabelMap::parse("# header\n0 0\n10 1  # car\n\n 44 1\n", "map.txt").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.get(44), Some(1));
        assert_eq!(m.inverse().get(1), Some(10));
        assert!(matches!(LabelMap::parse("1 2 3", "m"), Err(Error::Format { .. })));
        assert!(matches!(LabelMap::parse("1 x", "m"), Err(Error::Format { .. })));
        assert!(matches!(LabelMap::parse("1 2\n1 3", "m"), Err(Error::Format { .. })));
    }

    fn spec(prims: Vec<Primitive>) -> SceneSpec {
        SceneSpec {
            dims: dims(8, 8, 4),
            num_classes: 4,
            invalid_id: 255,
            primitives: prims,
            features: FeatureSpec {
                dim: 7,
                ..FeatureSpec::default()
            },
            seed: 1,
        }
    }

    #[test]
    fn empty_scene() {
        let (g, f) = generate_scene(&spec(vec![])).unwrap();
        assert!(g.labels().iter().all(|&l| l == 0));
        assert_eq!(f.dims().volume(), 4 * 4 * 2);
        assert_eq!(f.dim(), 7);
    }

    #[test]
    fn thin_ground_plane() {
        let s = spec(vec![Primitive::GroundPlane { class: 1, height: 1 }]);
        let g = rasterize(&s).unwrap();
        let d = *g.dims();
        let cfg = LgaConfig::default();
        for (v, &l) in g.labels().iter().enumerate() {
            let c = unchecked_coord(v, &d);
            assert_eq!(l == 1, c.k == 0);
            if c.k == 0 {
                // all four lateral neighbours are ground, above is empty, below is outside
                assert_eq!(lga_at(&g, v, &cfg), 1);
            }
        }
    }

    #[test]
    fn later_primitives_overwrite() {
        let s = spec(vec![
            Primitive::GroundPlane { class: 1, height: 2 },
            Primitive::Box {
                class: 2,
                min: [0, 0, 0],
                max: [2, 2, 3],
            },
            Primitive::Unknown {
                min: [0, 0, 0],
                max: [1, 1, 1],
            },
        ]);
        let g = rasterize(&s).unwrap();
        assert_eq!(g.get(VoxelCoord::new(0, 0, 0)).unwrap(), 255);
        assert_eq!(g.get(VoxelCoord::new(1, 1, 0)).unwrap(), 2);
        assert_eq!(g.get(VoxelCoord::new(5, 5, 1)).unwrap(), 1);
        assert_eq!(g.get(VoxelCoord::new(5, 5, 2)).unwrap(), 0);
    }

    #[test]
    fn spec_validation() {
        let bad_class = spec(vec![Primitive::GroundPlane { class: 4, height: 1 }]);
        assert!(matches!(generate_scene(&bad_class), Err(Error::Config(_))));
        let outside = spec(vec![Primitive::Box {
            class: 1,
            min: [0, 0, 0],
            max: [9, 1, 1],
        }]);
        assert!(generate_scene(&outside).is_err());
        let mut narrow = spec(vec![]);
        narrow.features.dim = 3;
        assert!(generate_scene(&narrow).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let d = GridDims::new(32, 32, 8, 0.8).unwrap();
        let s = SceneSpec::plane_and_boxes(d, 5, &LayoutSpec::default(), FeatureSpec::default(), 11).unwrap();
        let a = generate_scene(&s).unwrap();
        let b = generate_scene(&s).unwrap();
        assert_eq!(a, b);
        let s2 = SceneSpec::plane_and_boxes(d, 5, &LayoutSpec::default(), FeatureSpec::default(), 12).unwrap();
        assert_ne!(generate_scene(&s2).unwrap().0, a.0);
    }

    #[test]
    fn noiseless_features_are_class_fractions() {
        let mut s = spec(vec![Primitive::GroundPlane { class: 1, height: 1 }]);
        s.features.noise = 0.0;
        s.features.boundary_noise = 0.0;
        let (_, f) = generate_scene(&s).unwrap();
        // bottom coarse layer: half ground, half empty
        let v0 = f.voxel(0);
        assert_eq!(&v0[..4], &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(v0[4], 2.0 * 0.5 / 4.0 - 1.0);
        assert_eq!(v0[6], 2.0 * 0.5 / 2.0 - 1.0);
        assert_eq!(&f.voxel(1)[..4], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_scenes_are_mostly_lga_zero() {
        let d = GridDims::new(64, 64, 8, 0.8).unwrap();
        for seed in 0..5 {
            let s = SceneSpec::plane_and_boxes(d, 5, &LayoutSpec::default(), FeatureSpec::default(), seed).unwrap();
            let g = rasterize(&s).unwrap();
            let h = lga_histogram(&g, &LgaConfig::default());
            let zero = h.bin_total(0);
            assert!((1..=6).all(|a| h.bin_total(a) < zero));
            assert!(g.labels().iter().any(|&l| l == 4), "poles present");
        }
    }
}
