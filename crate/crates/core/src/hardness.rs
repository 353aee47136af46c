//! Voxel hardness: prediction-driven global hardness, label-driven local
//! geometric anisotropy (LGA), and the affine local hardness built on it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{unchecked_coord, unchecked_index, GridDims, ProbabilityVolume, SemanticGrid, EMPTY_CLASS};

/// Cap applied when the top-two probability gap vanishes.
pub const H_MAX: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardnessKind {
    Global,
    Lga,
    Local,
}

impl HardnessKind {
    fn name(self) -> &'static str {
        match self {
            HardnessKind::Global => "global",
            HardnessKind::Lga => "lga",
            HardnessKind::Local => "local",
        }
    }
}

/// One scalar per voxel plus a mask of voxels that take no part in
/// selection or supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessField {
    pub dims: GridDims,
    pub values: Vec<f64>,
    pub kind: HardnessKind,
    pub excluded: Vec<bool>,
}

impl HardnessField {
    pub fn new(dims: GridDims, values: Vec<f64>, kind: HardnessKind) -> Result<Self> {
        if values.len() != dims.volume() {
            return Err(Error::shape(format!(
                "{} hardness values for {} voxels",
                values.len(),
                dims.volume()
            )));
        }
        let excluded = vec![false; values.len()];
        Ok(Self {
            dims,
            values,
            kind,
            excluded,
        })
    }

    pub fn with_excluded(mut self, excluded: Vec<bool>) -> Result<Self> {
        if excluded.len() != self.values.len() {
            return Err(Error::shape("exclusion mask length mismatch"));
        }
        self.excluded = excluded;
        Ok(self)
    }

    pub fn expect_kind(&self, kind: HardnessKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Kind {
                expected: kind.name(),
                actual: self.kind.name(),
            });
        }
        Ok(())
    }

    /// Number of voxels not masked out.
    pub fn selectable(&self) -> usize {
        self.excluded.iter().filter(|&&e| !e).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OobPolicy {
    /// Out-of-grid neighbors contribute nothing.
    #[default]
    Skip,
    /// Out-of-grid neighbors count as a label mismatch.
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgaConfig {
    pub directions: Vec<[i64; 3]>,
    pub alpha: f64,
    pub beta: f64,
    pub oob_policy: OobPolicy,
}

/// The six axis-aligned neighbor offsets.
pub const AXIS_DIRECTIONS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

impl Default for LgaConfig {
    fn default() -> Self {
        Self {
            directions: AXIS_DIRECTIONS.to_vec(),
            alpha: 0.2,
            beta: 1.0,
            oob_policy: OobPolicy::Skip,
        }
    }
}

impl LgaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.directions.is_empty() {
            return Err(Error::config("LGA needs at least one neighbor direction"));
        }
        if self.directions.iter().any(|d| d == &[0, 0, 0]) {
            return Err(Error::config("zero offset is not a neighbor direction"));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config(format!(
                "local hardness coefficients must be finite with beta >= 0 (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// M, the number of neighbor directions.
    pub fn max_lga(&self) -> usize {
        self.directions.len()
    }

    pub fn local_hardness_of(&self, lga: u32) -> f64 {
        self.alpha + self.beta * lga as f64
    }
}

/// Largest minus second-largest entry; duplicated maxima give zero.
fn top_two_gap(p: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in p {
        if x > a {
            b = a;
            a = x;
        } else if x > b {
            b = x;
        }
    }
    a - b
}

/// Reciprocal top-two gap, capped at [`H_MAX`].
pub fn global_hardness_of(p: &[f64]) -> f64 {
    let gap = top_two_gap(p);
    if gap < 1.0 / H_MAX {
        H_MAX
    } else {
        (1.0 / gap).min(H_MAX)
    }
}

pub fn global_hardness(p: &ProbabilityVolume) -> Result<HardnessField> {
    if p.num_classes() < 2 {
        return Err(Error::config("global hardness needs at least two classes"));
    }
    let values = p.voxels().map(global_hardness_of).collect();
    HardnessField::new(*p.dims(), values, HardnessKind::Global)
}

/// LGA of a single voxel given by linear index. Invalid voxels score 0 and
/// invalid neighbors are skipped.
pub fn lga_at(g: &SemanticGrid, index: usize, cfg: &LgaConfig) -> u32 {
    let d = g.dims();
    let labels = g.labels();
    let invalid = g.invalid_id();
    let own = labels[index];
    if own == invalid {
        return 0;
    }
    let c = unchecked_coord(index, d);
    let mut a = 0;
    for off in &cfg.directions {
        let ni = c.i as i64 + off[0];
        let nj = c.j as i64 + off[1];
        let nk = c.k as i64 + off[2];
        let inside = (0..d.x as i64).contains(&ni) && (0..d.y as i64).contains(&nj) && (0..d.z as i64).contains(&nk);
        if !inside {
            if cfg.oob_policy == OobPolicy::Mismatch {
                a += 1;
            }
            continue;
        }
        let n = labels[unchecked_index(
            crate::grid::VoxelCoord::new(ni as usize, nj as usize, nk as usize),
            d,
        )];
        if n != invalid && n != own {
            a += 1;
        }
    }
    a
}

/// Local geometric anisotropy for every voxel, empty ones included.
pub fn lga(g: &SemanticGrid, cfg: &LgaConfig) -> HardnessField {
    let values = (0..g.dims().volume()).map(|v| lga_at(g, v, cfg) as f64).collect();
    let excluded = g.labels().iter().map(|&l| l == g.invalid_id()).collect();
    HardnessField {
        dims: *g.dims(),
        values,
        kind: HardnessKind::Lga,
        excluded,
    }
}

pub fn local_hardness(a: &HardnessField, cfg: &LgaConfig) -> Result<HardnessField> {
    a.expect_kind(HardnessKind::Lga)?;
    Ok(HardnessField {
        dims: a.dims,
        values: a.values.iter().map(|&v| cfg.alpha + cfg.beta * v).collect(),
        kind: HardnessKind::Local,
        excluded: a.excluded.clone(),
    })
}

/// Voxel counts per LGA value, split by empty vs occupied label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LgaHistogram {
    pub empty: Vec<u64>,
    pub nonempty: Vec<u64>,
}

#[derive(Debug, Serialize)]
struct HistogramRow {
    lga_value: usize,
    empty_count: u64,
    nonempty_count: u64,
}

impl LgaHistogram {
    pub fn total(&self) -> u64 {
        self.empty.iter().chain(&self.nonempty).sum()
    }

    pub fn bin_total(&self, lga: usize) -> u64 {
        self.empty[lga] + self.nonempty[lga]
    }

    pub fn merge(&mut self, other: &LgaHistogram) {
        for (a, b) in self.empty.iter_mut().zip(&other.empty) {
            *a += b;
        }
        for (a, b) in self.nonempty.iter_mut().zip(&other.nonempty) {
            *a += b;
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (lga_value, (&empty_count, &nonempty_count)) in self.empty.iter().zip(&self.nonempty).enumerate() {
            w.serialize(HistogramRow {
                lga_value,
                empty_count,
                nonempty_count,
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        file: "<csv>".into(),
        msg: e.to_string(),
    }
}

pub fn lga_histogram(g: &SemanticGrid, cfg: &LgaConfig) -> LgaHistogram {
    let bins = cfg.max_lga() + 1;
    let mut h = LgaHistogram {
        empty: vec![0; bins],
        nonempty: vec![0; bins],
    };
    for (v, &l) in g.labels().iter().enumerate() {
        if l == g.invalid_id() {
            continue;
        }
        let a = lga_at(g, v, cfg) as usize;
        if l == EMPTY_CLASS {
            h.empty[a] += 1;
        } else {
            h.nonempty[a] += 1;
        }
    }
    h
}
