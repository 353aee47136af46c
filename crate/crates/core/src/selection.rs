//! Three-stage hard voxel selection.
//!
//! 1. draw `ceil(t*N)` distinct proposals uniformly over the selectable voxels,
//! 2. keep the `floor(omega*N)` proposals with the largest global hardness
//!    (ties toward the smaller linear index),
//! 3. top up with `N - floor(omega*N)` distinct voxels drawn uniformly from
//!    the selectable voxels not kept in stage 2.
//!
//! The output lists the hard block first, then the random block.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    center_target, unchecked_coord, unchecked_index, ClassId, GridDims, SemanticGrid, VoxelCoord, EMPTY_CLASS,
};
use crate::hardness::{csv_err, lga_at, HardnessField, HardnessKind, LgaConfig};

/// Slack for floating-point products like `0.29 * 100` landing just below an integer.
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub n: usize,
    pub t: f64,
    pub omega: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n: 4096,
            t: 3.0,
            omega: 0.75,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t.is_finite() && self.t >= 1.0) {
            return Err(Error::config(format!("over-generation factor t must be >= 1, got {}", self.t)));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::config(format!("omega must lie in [0, 1], got {}", self.omega)));
        }
        Ok(())
    }

    pub fn proposal_count(&self) -> usize {
        (self.t * self.n as f64 - COUNT_EPS).ceil().max(0.0) as usize
    }

    pub fn hard_count(&self) -> usize {
        ((self.omega * self.n as f64 + COUNT_EPS).floor() as usize).min(self.n)
    }

    pub fn random_count(&self) -> usize {
        self.n - self.hard_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Hard,
    Random,
}

/// Selected coarse voxels with their supervision data.
///
/// `targets`, `labels`, `lga` and `weights` are empty until
/// [`attach_local_weights`] fills them.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSet {
    pub dims: GridDims,
    pub indices: Vec<usize>,
    pub coords: Vec<VoxelCoord>,
    pub hardness: Vec<f64>,
    pub hard_count: usize,
    pub targets: Vec<usize>,
    pub labels: Vec<ClassId>,
    pub lga: Vec<u32>,
    pub weights: Vec<f64>,
}

#[derive(Serialize)]
struct SelectionRow {
    i: usize,
    j: usize,
    k: usize,
    global_hardness: f64,
    lga: Option<u32>,
    weight: Option<f64>,
    block: Block,
}

impl SelectionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn block(&self, n: usize) -> Block {
        if n < self.hard_count {
            Block::Hard
        } else {
            Block::Random
        }
    }

    pub fn sum_weights(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Sum of `alpha + beta * LGA` under `cfg`, independent of the weights in use.
    pub fn sum_local_hardness(&self, cfg: &LgaConfig) -> f64 {
        self.lga.iter().map(|&a| cfg.local_hardness_of(a)).sum()
    }

    pub fn nonempty_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != EMPTY_CLASS).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (n, c) in self.coords.iter().enumerate() {
            w.serialize(SelectionRow {
                i: c.i,
                j: c.j,
                k: c.k,
                global_hardness: self.hardness[n],
                lga: self.lga.get(n).copied(),
                weight: self.weights.get(n).copied(),
                block: self.block(n),
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Coarse voxels whose center-sampled ground truth is invalid cannot be selected.
pub fn invalid_target_mask(gt: &SemanticGrid, coarse_dims: &GridDims) -> Result<Vec<bool>> {
    coarse_dims
        .coords()
        .map(|c| {
            let t = center_target(c, coarse_dims, gt.dims())?;
            Ok(gt.labels()[unchecked_index(t, gt.dims())] == gt.invalid_id())
        })
        .collect()
}

pub fn select_hard_voxels<R: Rng + ?Sized>(
    h: &HardnessField,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<SelectionSet> {
    h.expect_kind(HardnessKind::Global)?;
    cfg.validate()?;
    let population: Vec<usize> = (0..h.values.len()).filter(|&v| !h.excluded[v]).collect();
    let n_prop = cfg.proposal_count();
    let n_hard = cfg.hard_count();
    if population.len() < n_prop {
        return Err(Error::config(format!(
            "{} selectable voxels cannot supply {} proposals",
            population.len(),
            n_prop
        )));
    }
    if population.len() < cfg.n {
        return Err(Error::config(format!(
            "{} selectable voxels cannot supply N = {}",
            population.len(),
            cfg.n
        )));
    }

    let mut proposals: Vec<usize> = index::sample(rng, population.len(), n_prop)
        .into_iter()
        .map(|p| population[p])
        .collect();
    proposals.sort_by(|&a, &b| h.values[b].total_cmp(&h.values[a]).then(a.cmp(&b)));
    proposals.truncate(n_hard);

    let mut kept = vec![false; h.values.len()];
    for &v in &proposals {
        kept[v] = true;
    }
    let rest: Vec<usize> = population.into_iter().filter(|&v| !kept[v]).collect();
    let n_random = cfg.n - n_hard;
    let mut indices = proposals;
    indices.extend(index::sample(rng, rest.len(), n_random).into_iter().map(|p| rest[p]));

    Ok(SelectionSet {
        dims: h.dims,
        coords: indices.iter().map(|&v| unchecked_coord(v, &h.dims)).collect(),
        hardness: indices.iter().map(|&v| h.values[v]).collect(),
        hard_count: n_hard,
        indices,
        targets: Vec::new(),
        labels: Vec::new(),
        lga: Vec::new(),
        weights: Vec::new(),
    })
}

/// Map each selected coarse voxel to its full-resolution center voxel and
/// weight it by the local hardness there.
pub fn attach_local_weights(
    mut s: SelectionSet,
    gt: &SemanticGrid,
    cfg: &LgaConfig,
    coarse_dims: &GridDims,
) -> Result<SelectionSet> {
    if !s.dims.same_shape(coarse_dims) {
        return Err(Error::shape("selection was made on a different coarse grid"));
    }
    cfg.validate()?;
    s.targets.clear();
    s.labels.clear();
    s.lga.clear();
    s.weights.clear();
    for &c in &s.coords {
        let t = unchecked_index(center_target(c, coarse_dims, gt.dims())?, gt.dims());
        let a = lga_at(gt, t, cfg);
        s.targets.push(t);
        s.labels.push(gt.labels()[t]);
        s.lga.push(a);
        s.weights.push(cfg.local_hardness_of(a));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(x: usize, y: usize, z: usize) -> GridDims {
        GridDims::new(x, y, z, 0.2).unwrap()
    }

    fn index_hardness(d: GridDims) -> HardnessField {
        HardnessField::new(d, (0..d.volume()).map(|v| v as f64).collect(), HardnessKind::Global).unwrap()
    }

    #[test]
    fn default_configuration_block_sizes() {
        let cfg = SelectionConfig::default();
        assert_eq!(cfg.proposal_count(), 12288);
        assert_eq!(cfg.hard_count(), 3072);
        assert_eq!(cfg.random_count(), 1024);
    }

    #[test]
    fn counts_are_robust_to_float_products() {
        let cfg = SelectionConfig {
            n: 100,
            t: 1.1,
            omega: 0.29,
            seed: 0,
        };
        assert_eq!(cfg.hard_count(), 29);
        assert_eq!(cfg.proposal_count(), 110);
    }

    #[test]
    fn degenerate_configuration_is_uniform_sample() {
        let d = dims(4, 4, 4);
        let h = index_hardness(d);
        let cfg = SelectionConfig {
            n: 10,
            t: 1.0,
            omega: 1.0,
            seed: 3,
        };
        let s = select_hard_voxels(&h, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(3);
        let mut drawn = index::sample(&mut replay, 64, 10).into_vec();
        drawn.sort_by(|a, b| b.cmp(a));
        assert_eq!(s.indices, drawn);
        assert_eq!(s.hard_count, 10);
    }

    /// Brute-force replay: same RNG, proposals sorted by hand.
    #[test]
    fn hard_block_matches_replayed_sampler() {
        let d = dims(4, 4, 4);
        let h = index_hardness(d);
        let cfg = SelectionConfig {
            n: 8,
            t: 2.0,
            omega: 0.5,
            seed: 42,
        };
        let s = select_hard_voxels(&h, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut proposals = index::sample(&mut rng, 64, 16).into_vec();
        proposals.sort_unstable();
        let top4: Vec<usize> = proposals.iter().rev().take(4).copied().collect();
        assert_eq!(&s.indices[..4], top4.as_slice());

        let rest: Vec<usize> = (0..64).filter(|v| !top4.contains(v)).collect();
        let random: Vec<usize> = index::sample(&mut rng, rest.len(), 4).into_iter().map(|p| rest[p]).collect();
        assert_eq!(&s.indices[4..], random.as_slice());
    }

    #[test]
    fn excluded_voxels_are_never_selected() {
        let d = dims(4, 4, 2);
        let excluded: Vec<bool> = (0..32).map(|v| v % 3 == 0).collect();
        let h = index_hardness(d).with_excluded(excluded.clone()).unwrap();
        let cfg = SelectionConfig {
            n: 12,
            t: 1.5,
            omega: 0.5,
            seed: 0,
        };
        for seed in 0..50 {
            let s = select_hard_voxels(&h, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(s.indices.iter().all(|&v| !excluded[v]));
        }
    }

    #[test]
    fn population_errors() {
        let h = index_hardness(dims(2, 2, 2));
        let too_many_proposals = SelectionConfig {
            n: 4,
            t: 3.0,
            omega: 0.5,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            select_hard_voxels(&h, &too_many_proposals, &mut rng),
            Err(Error::Config(_))
        ));
        let bad_t = SelectionConfig {
            t: 0.5,
            ..too_many_proposals.clone()
        };
        assert!(select_hard_voxels(&h, &bad_t, &mut rng).is_err());
        let lga_field = HardnessField::new(dims(2, 2, 2), vec![0.0; 8], HardnessKind::Lga).unwrap();
        assert!(matches!(
            select_hard_voxels(&lga_field, &SelectionConfig { n: 1, ..too_many_proposals }, &mut rng),
            Err(Error::Kind { .. })
        ));
    }

    #[test]
    fn zero_n_selects_nothing() {
        let h = index_hardness(dims(2, 2, 2));
        let cfg = SelectionConfig {
            n: 0,
            ..SelectionConfig::default()
        };
        let s = select_hard_voxels(&h, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.is_empty());
    }

    fn selection_of(coords: &[VoxelCoord], d: GridDims) -> SelectionSet {
        SelectionSet {
            dims: d,
            indices: coords.iter().map(|&c| unchecked_index(c, &d)).collect(),
            coords: coords.to_vec(),
            hardness: vec![1.0; coords.len()],
            hard_count: coords.len(),
            targets: vec![],
            labels: vec![],
            lga: vec![],
            weights: vec![],
        }
    }

    #[test]
    fn local_weight_examples() {
        // full 4x4x4, coarse 2x2x2; coarse (0,0,0) -> full (1,1,1), coarse (1,1,1) -> (3,3,3)
        let full = dims(4, 4, 4);
        let coarse = dims(2, 2, 2);
        let mut gt = SemanticGrid::filled(full, 0, 3, 255).unwrap();
        gt.set(VoxelCoord::new(3, 3, 3), 2).unwrap();
        for c in [VoxelCoord::new(2, 3, 3), VoxelCoord::new(3, 2, 3), VoxelCoord::new(3, 3, 2)] {
            gt.set(c, 1).unwrap();
        }
        let mismatch = LgaConfig {
            oob_policy: crate::hardness::OobPolicy::Mismatch,
            ..LgaConfig::default()
        };
        let s = selection_of(&[VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 1, 1)], coarse);
        let s = attach_local_weights(s, &gt, &mismatch, &coarse).unwrap();
        assert_eq!(s.lga, vec![0, 6]);
        assert!((s.weights[0] - 0.2).abs() < 1e-15);
        assert!((s.weights[1] - 6.2).abs() < 1e-12);
        assert_eq!(s.labels, vec![0, 2]);
        assert_eq!(s.nonempty_count(), 1);

        let zero = LgaConfig {
            alpha: 0.0,
            beta: 0.0,
            ..LgaConfig::default()
        };
        let s = attach_local_weights(s, &gt, &zero, &coarse).unwrap();
        assert!(s.weights.iter().all(|&w| w == 0.0));

        assert!(attach_local_weights(s, &gt, &zero, &dims(1, 2, 2)).is_err());
    }

    #[test]
    fn csv_rows() {
        let d = dims(2, 2, 2);
        let mut s = selection_of(&[VoxelCoord::new(1, 0, 1)], d);
        s.hard_count = 0;
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "i,j,k,global_hardness,lga,weight,block\n1,0,1,1.0,,,random\n"
        );
    }
}
