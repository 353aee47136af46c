//! Dense voxel containers and resolution mapping.
//!
//! All grids are stored row-major with `k` (the z axis) varying fastest, so
//! the linear index of `(i, j, k)` is `i*y*z + j*z + k`. The same order is
//! used by the on-disk voxel files, which makes the codec a flat copy.
//!
//! Class id `0` is always the empty class. The invalid id is carried per
//! grid and never counts as a class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u16;

/// The designated "unoccupied" class.
pub const EMPTY_CLASS: ClassId = 0;

/// Invalid (unknown space) id used by the benchmark label files.
pub const DEFAULT_INVALID_ID: ClassId = 255;

/// Tolerance for the per-voxel sum-to-one check.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    /// Edge length of one voxel in meters.
    pub voxel_size: f64,
}

impl GridDims {
    pub fn new(x: usize, y: usize, z: usize, voxel_size: f64) -> Result<Self> {
        if x == 0 || y == 0 || z == 0 {
            return Err(Error::config(format!(
                "grid dims must be positive, got {x}x{y}x{z}"
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::config(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        Ok(Self {
            x,
            y,
            z,
            voxel_size,
        })
    }

    pub fn volume(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        c.i < self.x && c.j < self.y && c.k < self.z
    }

    pub fn same_shape(&self, other: &GridDims) -> bool {
        self.x == other.x && self.y == other.y && self.z == other.z
    }

    /// Per-axis integer factor by which `finer` refines `self`.
    pub fn refinement_of(&self, finer: &GridDims) -> Result<[usize; 3]> {
        let axis = |coarse: usize, fine: usize, name: &str| {
            if fine % coarse != 0 {
                Err(Error::shape(format!(
                    "axis {name}: {fine} is not a multiple of {coarse}"
                )))
            } else {
                Ok(fine / coarse)
            }
        };
        Ok([
            axis(self.x, finer.x, "x")?,
            axis(self.y, finer.y, "y")?,
            axis(self.z, finer.z, "z")?,
        ])
    }

    /// Coarsen by integer factors; the voxel size grows accordingly.
    pub fn coarsened(&self, factor: [usize; 3]) -> Result<GridDims> {
        if factor.iter().any(|&f| f == 0) {
            return Err(Error::config("coarsening factor must be positive"));
        }
        if self.x % factor[0] != 0 || self.y % factor[1] != 0 || self.z % factor[2] != 0 {
            return Err(Error::shape(format!(
                "{}x{}x{} is not divisible by {:?}",
                self.x, self.y, self.z, factor
            )));
        }
        GridDims::new(
            self.x / factor[0],
            self.y / factor[1],
            self.z / factor[2],
            self.voxel_size * factor[0] as f64,
        )
    }

    pub fn coords(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        (0..self.x).flat_map(move |i| {
            (0..self.y).flat_map(move |j| (0..self.z).map(move |k| VoxelCoord { i, j, k }))
        })
    }

    fn bounds_error(&self, c: VoxelCoord) -> Error {
        Error::Bounds {
            i: c.i,
            j: c.j,
            k: c.k,
            x: self.x,
            y: self.y,
            z: self.z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelCoord {
    pub const fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }
}

pub fn linear_index(c: VoxelCoord, d: &GridDims) -> Result<usize> {
    if !d.contains(c) {
        return Err(d.bounds_error(c));
    }
    Ok(unchecked_index(c, d))
}

#[inline]
pub(crate) fn unchecked_index(c: VoxelCoord, d: &GridDims) -> usize {
    (c.i * d.y + c.j) * d.z + c.k
}

pub fn coord_of(index: usize, d: &GridDims) -> Result<VoxelCoord> {
    if index >= d.volume() {
        return Err(Error::Bounds {
            i: index,
            j: 0,
            k: 0,
            x: d.volume(),
            y: 1,
            z: 1,
        });
    }
    Ok(unchecked_coord(index, d))
}

#[inline]
pub(crate) fn unchecked_coord(index: usize, d: &GridDims) -> VoxelCoord {
    let k = index % d.z;
    let rest = index / d.z;
    VoxelCoord {
        i: rest / d.y,
        j: rest % d.y,
        k,
    }
}

/// Dense grid of class labels (ground truth or argmax predictions).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    dims: GridDims,
    labels: Vec<ClassId>,
    num_classes: usize,
    invalid_id: ClassId,
}

impl SemanticGrid {
    pub fn new(
        dims: GridDims,
        labels: Vec<ClassId>,
        num_classes: usize,
        invalid_id: ClassId,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if (invalid_id as usize) < num_classes {
            return Err(Error::config(format!(
                "invalid id {invalid_id} collides with a class id (C = {num_classes})"
            )));
        }
        if labels.len() != dims.volume() {
            return Err(Error::shape(format!(
                "{} labels for a grid of {} voxels",
                labels.len(),
                dims.volume()
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != invalid_id && l as usize >= num_classes)
        {
            return Err(Error::config(format!(
                "label {bad} outside [0, {num_classes}) and not the invalid id"
            )));
        }
        Ok(Self {
            dims,
            labels,
            num_classes,
            invalid_id,
        })
    }

    pub fn filled(dims: GridDims, label: ClassId, num_classes: usize, invalid_id: ClassId) -> Result<Self> {
        Self::new(dims, vec![label; dims.volume()], num_classes, invalid_id)
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn invalid_id(&self) -> ClassId {
        self.invalid_id
    }

    pub fn get(&self, c: VoxelCoord) -> Result<ClassId> {
        Ok(self.labels[linear_index(c, &self.dims)?])
    }

    pub fn set(&mut self, c: VoxelCoord, label: ClassId) -> Result<()> {
        if label != self.invalid_id && label as usize >= self.num_classes {
            return Err(Error::config(format!("label {label} out of range")));
        }
        let idx = linear_index(c, &self.dims)?;
        self.labels[idx] = label;
        Ok(())
    }

    pub fn is_valid_at(&self, index: usize) -> bool {
        self.labels[index] != self.invalid_id
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != self.invalid_id).count()
    }
}

/// Dense grid of per-voxel class distributions, `C` contiguous entries per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    dims: GridDims,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ProbabilityVolume {
    /// Checks non-negativity and the sum-to-one constraint on every voxel.
    pub fn new(dims: GridDims, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if probs.len() != dims.volume() * num_classes {
            return Err(Error::shape(format!(
                "{} probabilities for {} voxels x {} classes",
                probs.len(),
                dims.volume(),
                num_classes
            )));
        }
        for (v, p) in probs.chunks_exact(num_classes).enumerate() {
            if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::config(format!("voxel {v}: negative or non-finite probability")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::config(format!("voxel {v}: probabilities sum to {s}")));
            }
        }
        Ok(Self {
            dims,
            num_classes,
            probs,
        })
    }

    /// Per-voxel softmax of a flat `volume x C` logit array.
    pub fn from_logits(dims: GridDims, num_classes: usize, logits: &[f64]) -> Result<Self> {
        if num_classes == 0 || logits.len() != dims.volume() * num_classes {
            return Err(Error::shape(format!(
                "{} logits for {} voxels x {} classes",
                logits.len(),
                dims.volume(),
                num_classes
            )));
        }
        let mut probs = vec![0.0; logits.len()];
        for (src, dst) in logits
            .chunks_exact(num_classes)
            .zip(probs.chunks_exact_mut(num_classes))
        {
            softmax_into(src, dst);
        }
        Ok(Self {
            dims,
            num_classes,
            probs,
        })
    }

    pub fn uniform(dims: GridDims, num_classes: usize) -> Self {
        Self {
            dims,
            num_classes,
            probs: vec![1.0 / num_classes as f64; dims.volume() * num_classes],
        }
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.num_classes..(index + 1) * self.num_classes]
    }

    pub fn voxels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.num_classes)
    }

    /// Highest-probability class; ties go to the smaller id.
    pub fn argmax(&self, index: usize) -> ClassId {
        argmax(self.voxel(index)) as ClassId
    }

    pub fn argmax_grid(&self, invalid_id: ClassId) -> Result<SemanticGrid> {
        let labels = (0..self.dims.volume()).map(|v| self.argmax(v)).collect();
        SemanticGrid::new(self.dims, labels, self.num_classes, invalid_id)
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (c, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = c;
        }
    }
    best
}

/// Numerically stable softmax (max subtraction).
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Pull a gradient w.r.t. per-voxel softmax outputs back to the logits:
/// `dz = p * (g - <p, g>)`.
pub fn softmax_backward(p: &ProbabilityVolume, grad: &[f64]) -> Result<Vec<f64>> {
    if grad.len() != p.probs.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries, volume has {}",
            grad.len(),
            p.probs.len()
        )));
    }
    let c = p.num_classes;
    let mut out = vec![0.0; grad.len()];
    for ((q, g), o) in p
        .probs
        .chunks_exact(c)
        .zip(grad.chunks_exact(c))
        .zip(out.chunks_exact_mut(c))
    {
        let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
        for n in 0..c {
            o[n] = q[n] * (g[n] - dot);
        }
    }
    Ok(out)
}

/// Per-axis sample table: `(lower index, upper index, upper weight)` for each
/// destination cell, using the cell-center convention.
fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Precomputed trilinear resampling from a coarse probability grid to a finer one.
///
/// The forward map is linear interpolation followed by per-voxel
/// renormalization; [`UpsamplePlan::backward`] applies the exact adjoint of both.
#[derive(Debug, Clone)]
pub struct UpsamplePlan {
    src: GridDims,
    dst: GridDims,
    tables: [Vec<(usize, usize, f64)>; 3],
}

impl UpsamplePlan {
    pub fn new(src: GridDims, dst: GridDims) -> Result<Self> {
        src.refinement_of(&dst)?;
        Ok(Self {
            src,
            dst,
            tables: [
                axis_table(src.x, dst.x),
                axis_table(src.y, dst.y),
                axis_table(src.z, dst.z),
            ],
        })
    }

    pub fn source_dims(&self) -> &GridDims {
        &self.src
    }

    pub fn target_dims(&self) -> &GridDims {
        &self.dst
    }

    /// The eight `(source index, weight)` taps for a destination voxel.
    fn taps(&self, a: usize, b: usize, c: usize) -> [(usize, f64); 8] {
        let (x0, x1, wx) = self.tables[0][a];
        let (y0, y1, wy) = self.tables[1][b];
        let (z0, z1, wz) = self.tables[2][c];
        let s = &self.src;
        let idx = |i, j, k| (i * s.y + j) * s.z + k;
        [
            (idx(x0, y0, z0), (1.0 - wx) * (1.0 - wy) * (1.0 - wz)),
            (idx(x0, y0, z1), (1.0 - wx) * (1.0 - wy) * wz),
            (idx(x0, y1, z0), (1.0 - wx) * wy * (1.0 - wz)),
            (idx(x0, y1, z1), (1.0 - wx) * wy * wz),
            (idx(x1, y0, z0), wx * (1.0 - wy) * (1.0 - wz)),
            (idx(x1, y0, z1), wx * (1.0 - wy) * wz),
            (idx(x1, y1, z0), wx * wy * (1.0 - wz)),
            (idx(x1, y1, z1), wx * wy * wz),
        ]
    }

    fn interpolate_raw(&self, p: &ProbabilityVolume, a: usize, b: usize, c: usize, out: &mut [f64]) {
        let nc = p.num_classes;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (src, w) in self.taps(a, b, c) {
            if w == 0.0 {
                continue;
            }
            for (o, &q) in out.iter_mut().zip(&p.probs[src * nc..(src + 1) * nc]) {
                *o += w * q;
            }
        }
    }

    pub fn forward(&self, p: &ProbabilityVolume) -> Result<ProbabilityVolume> {
        if !p.dims.same_shape(&self.src) {
            return Err(Error::shape("volume does not match the plan's source grid"));
        }
        if self.src.same_shape(&self.dst) {
            return Ok(ProbabilityVolume {
                dims: self.dst,
                ..p.clone()
            });
        }
        let nc = p.num_classes;
        let d = self.dst;
        let mut probs = vec![0.0; d.volume() * nc];
        for a in 0..d.x {
            for b in 0..d.y {
                for c in 0..d.z {
                    let v = (a * d.y + b) * d.z + c;
                    let out = &mut probs[v * nc..(v + 1) * nc];
                    self.interpolate_raw(p, a, b, c, out);
                    let s: f64 = out.iter().sum();
                    out.iter_mut().for_each(|o| *o /= s);
                }
            }
        }
        Ok(ProbabilityVolume {
            dims: d,
            num_classes: nc,
            probs,
        })
    }

    /// Pulls a gradient w.r.t. the upsampled volume back onto the source volume.
    pub fn backward(&self, source: &ProbabilityVolume, grad_out: &[f64]) -> Result<Vec<f64>> {
        let nc = source.num_classes;
        if !source.dims.same_shape(&self.src) || grad_out.len() != self.dst.volume() * nc {
            return Err(Error::shape("gradient does not match the plan's target grid"));
        }
        if self.src.same_shape(&self.dst) {
            return Ok(grad_out.to_vec());
        }
        let d = self.dst;
        let mut grad_src = vec![0.0; self.src.volume() * nc];
        let mut raw = vec![0.0; nc];
        let mut g_raw = vec![0.0; nc];
        for a in 0..d.x {
            for b in 0..d.y {
                for c in 0..d.z {
                    let v = (a * d.y + b) * d.z + c;
                    let g = &grad_out[v * nc..(v + 1) * nc];
                    if g.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    self.interpolate_raw(source, a, b, c, &mut raw);
                    let s: f64 = raw.iter().sum();
                    // q = r / s  =>  dL/dr_l = (g_l - sum_j g_j q_j) / s
                    let gq: f64 = g.iter().zip(&raw).map(|(gj, rj)| gj * rj / s).sum();
                    for (gr, &gl) in g_raw.iter_mut().zip(g) {
                        *gr = (gl - gq) / s;
                    }
                    for (src, w) in self.taps(a, b, c) {
                        if w == 0.0 {
                            continue;
                        }
                        for (dst, &gr) in grad_src[src * nc..(src + 1) * nc].iter_mut().zip(&g_raw) {
                            *dst += w * gr;
                        }
                    }
                }
            }
        }
        Ok(grad_src)
    }
}

/// Trilinear upsampling with per-voxel renormalization.
///
/// `target` must be an integer multiple of the source dims on every axis. An
/// identical target returns the volume unchanged.
pub fn upsample_trilinear(p: &ProbabilityVolume, target: GridDims) -> Result<ProbabilityVolume> {
    UpsamplePlan::new(p.dims, target)?.forward(p)
}

/// Majority-pool labels onto a coarser grid.
///
/// Invalid children do not vote; a block is invalid only when all of its
/// children are. Ties go to the smallest class id.
pub fn downsample_labels(g: &SemanticGrid, target: GridDims) -> Result<SemanticGrid> {
    let f = target.refinement_of(&g.dims)?;
    let mut counts = vec![0usize; g.num_classes];
    let mut labels = Vec::with_capacity(target.volume());
    for c in target.coords() {
        counts.iter_mut().for_each(|n| *n = 0);
        for di in 0..f[0] {
            for dj in 0..f[1] {
                for dk in 0..f[2] {
                    let child = VoxelCoord::new(c.i * f[0] + di, c.j * f[1] + dj, c.k * f[2] + dk);
                    let l = g.labels[unchecked_index(child, &g.dims)];
                    if l != g.invalid_id {
                        counts[l as usize] += 1;
                    }
                }
            }
        }
        let mut best: Option<(usize, usize)> = None;
        for (class, &n) in counts.iter().enumerate() {
            if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
                best = Some((class, n));
            }
        }
        labels.push(best.map_or(g.invalid_id, |(class, _)| class as ClassId));
    }
    SemanticGrid::new(target, labels, g.num_classes, g.invalid_id)
}

/// Full-resolution voxel containing the geometric center of a coarse voxel.
pub fn center_target(coarse: VoxelCoord, coarse_dims: &GridDims, full_dims: &GridDims) -> Result<VoxelCoord> {
    let f = coarse_dims.refinement_of(full_dims)?;
    if !coarse_dims.contains(coarse) {
        return Err(coarse_dims.bounds_error(coarse));
    }
    Ok(VoxelCoord::new(
        coarse.i * f[0] + f[0] / 2,
        coarse.j * f[1] + f[1] / 2,
        coarse.k * f[2] + f[2] / 2,
    ))
}

/// Nearest-neighbor lookup of the ground-truth label for a coarse voxel.
pub fn sample_label_at_center(g: &SemanticGrid, coarse: VoxelCoord, coarse_dims: &GridDims) -> Result<ClassId> {
    g.get(center_target(coarse, coarse_dims, &g.dims)?)
}

/// Trilinear taps at a continuous point given in voxel units (voxel `i`
/// spans `[i, i+1)`, so its center is `i + 0.5`). Points are clamped to the
/// outermost centers.
pub fn trilinear_taps(dims: &GridDims, point: [f64; 3]) -> [(usize, f64); 8] {
    let axis = |p: f64, n: usize| {
        let s = (p - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        ((i0, (i0 + 1).min(n - 1)), s - i0 as f64)
    };
    let ((x0, x1), wx) = axis(point[0], dims.x);
    let ((y0, y1), wy) = axis(point[1], dims.y);
    let ((z0, z1), wz) = axis(point[2], dims.z);
    let idx = |i, j, k| (i * dims.y + j) * dims.z + k;
    [
        (idx(x0, y0, z0), (1.0 - wx) * (1.0 - wy) * (1.0 - wz)),
        (idx(x0, y0, z1), (1.0 - wx) * (1.0 - wy) * wz),
        (idx(x0, y1, z0), (1.0 - wx) * wy * (1.0 - wz)),
        (idx(x0, y1, z1), (1.0 - wx) * wy * wz),
        (idx(x1, y0, z0), wx * (1.0 - wy) * (1.0 - wz)),
        (idx(x1, y0, z1), wx * (1.0 - wy) * wz),
        (idx(x1, y1, z0), wx * wy * (1.0 - wz)),
        (idx(x1, y1, z1), wx * wy * wz),
    ]
}
