//! Mean-teacher self-distillation: the EMA parameter mirror, the
//! teacher-guided hard voxel loss on the student's final prediction, and the
//! mIoU-scaled KL distillation term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ProbabilityVolume, SemanticGrid};
use crate::hardness::{HardnessField, HardnessKind, LgaConfig};
use crate::losses::{hvm_loss, LossOutput};
use crate::metrics::{miou, ConfusionMatrix, Score};
use crate::selection::{attach_local_weights, invalid_target_mask, select_hard_voxels, SelectionConfig, SelectionSet};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
    pub delta: f64,
    pub gamma_cap: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 48.0,
            delta: 0.1,
            gamma_cap: 0.99,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.gamma_cap > 0.0 && self.gamma_cap < 1.0) {
            return Err(Error::config(format!("gamma cap must lie in (0, 1), got {}", self.gamma_cap)));
        }
        Ok(())
    }
}

/// Decay for the update taking the teacher from step `t` to `t + 1`:
/// `min(1 - 1/(t+1), cap)`. Step 0 gives 0, so the first update copies the student.
pub fn ema_gamma(step: u64, cap: f64) -> f64 {
    (1.0 - 1.0 / (step as f64 + 1.0)).min(cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: Vec<f64>,
    pub step: u64,
}

impl TeacherState {
    /// Teacher and student start from identical parameters.
    pub fn new(student_params: &[f64]) -> Self {
        Self {
            params: student_params.to_vec(),
            step: 0,
        }
    }

    pub fn gamma(&self, cap: f64) -> f64 {
        ema_gamma(self.step, cap)
    }

    pub fn update(&mut self, student_params: &[f64], cap: f64) -> Result<()> {
        if student_params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "student has {} parameters, teacher {}",
                student_params.len(),
                self.params.len()
            )));
        }
        let g = self.gamma(cap);
        for (t, &s) in self.params.iter_mut().zip(student_params) {
            *t = g * *t + (1.0 - g) * s;
        }
        self.step += 1;
        Ok(())
    }
}

pub fn ema_update(mut ts: TeacherState, student_params: &[f64], cap: f64) -> Result<TeacherState> {
    ts.update(student_params, cap)?;
    Ok(ts)
}

/// mIoU over semantic classes between the teacher's argmax and the ground
/// truth, invalid voxels masked. `evaluated == 0` flags an undefined score.
pub fn miou_scale(teacher_pred: &ProbabilityVolume, gt: &SemanticGrid) -> Result<Score> {
    if !teacher_pred.dims().same_shape(gt.dims()) {
        return Err(Error::shape("teacher prediction and ground truth differ in shape"));
    }
    if teacher_pred.num_classes() != gt.num_classes() {
        return Err(Error::shape("teacher prediction and ground truth differ in class count"));
    }
    let mut cm = ConfusionMatrix::new(gt.num_classes());
    for (v, &g) in gt.labels().iter().enumerate() {
        if g != gt.invalid_id() {
            cm.add(teacher_pred.argmax(v) as usize, g as usize, 1);
        }
    }
    Ok(miou(&cm, false))
}

/// `lambda * e^mu * mean_v KL(teacher_v || student_v)` over voxels where
/// `valid` is true (all voxels when `None`).
///
/// The gradient is w.r.t. the student probabilities; the teacher is a
/// constant. Both volumes are floored at [`PROB_FLOOR`] before the log ratio.
pub fn distill_loss(
    student: &ProbabilityVolume,
    teacher: &ProbabilityVolume,
    mu: f64,
    cfg: &DistillConfig,
    valid: Option<&[bool]>,
) -> Result<LossOutput> {
    if !student.dims().same_shape(teacher.dims()) || student.num_classes() != teacher.num_classes() {
        return Err(Error::shape("student and teacher volumes differ in shape"));
    }
    if let Some(m) = valid {
        if m.len() != student.dims().volume() {
            return Err(Error::shape("validity mask length mismatch"));
        }
    }
    if !mu.is_finite() {
        return Err(Error::NonFinite {
            term: "distill mu",
            step: None,
        });
    }
    let nc = student.num_classes();
    let support = valid.map_or(student.dims().volume(), |m| m.iter().filter(|&&b| b).count());
    if support == 0 {
        return Ok(LossOutput::zero(student.probs().len()));
    }
    let scale = cfg.lambda * mu.exp() / support as f64;
    let mut grad = vec![0.0; student.probs().len()];
    let mut kl_sum = 0.0;
    for (v, (s, t)) in student.voxels().zip(teacher.voxels()).enumerate() {
        if valid.is_some_and(|m| !m[v]) {
            continue;
        }
        let g = &mut grad[v * nc..(v + 1) * nc];
        for c in 0..nc {
            let tc = t[c].max(PROB_FLOOR);
            let sc = s[c].max(PROB_FLOOR);
            kl_sum += tc * (tc.ln() - sc.ln());
            if s[c] > PROB_FLOOR {
                g[c] = -scale * tc / sc;
            }
        }
    }
    Ok(LossOutput {
        loss: scale * kl_sum,
        grad,
        support,
    })
}

/// Result of the teacher-guided hard voxel loss. The gradient in `loss` is
/// dense over the student's final probability volume.
#[derive(Debug, Clone)]
pub struct GuidedHvm {
    pub selection: SelectionSet,
    pub loss: LossOutput,
}

/// Cross-entropy rows on floored log-probabilities at `targets`, with the
/// gradient scattered back onto the dense probability volume.
pub fn hvm_on_probabilities(
    probs: &ProbabilityVolume,
    targets: &[usize],
    labels: &[u16],
    weights: &[f64],
    ignore: Option<u16>,
) -> Result<LossOutput> {
    let nc = probs.num_classes();
    let mut logp = Vec::with_capacity(targets.len() * nc);
    for &t in targets {
        if t >= probs.dims().volume() {
            return Err(Error::shape(format!("target voxel {t} outside the final grid")));
        }
        logp.extend(probs.voxel(t).iter().map(|&q| q.max(PROB_FLOOR).ln()));
    }
    let rows = hvm_loss(&logp, nc, labels, weights, ignore)?;
    let mut grad = vec![0.0; probs.probs().len()];
    for (n, &t) in targets.iter().enumerate() {
        let q = probs.voxel(t);
        for c in 0..nc {
            if q[c] > PROB_FLOOR {
                // d ln q / dq = 1/q
                grad[t * nc + c] += rows.grad[n * nc + c] / q[c];
            }
        }
    }
    Ok(LossOutput {
        loss: rows.loss,
        grad,
        support: rows.support,
    })
}

/// Select hard voxels from the teacher's global hardness and supervise the
/// student's final (full-resolution) prediction at those voxels.
pub fn teacher_guided_hvm<R: Rng + ?Sized>(
    teacher_hardness: &HardnessField,
    student_final: &ProbabilityVolume,
    gt: &SemanticGrid,
    cfg: &SelectionConfig,
    lga_cfg: &LgaConfig,
    rng: &mut R,
) -> Result<GuidedHvm> {
    teacher_hardness.expect_kind(HardnessKind::Global)?;
    if !student_final.dims().same_shape(gt.dims()) {
        return Err(Error::shape("student final prediction must match the ground-truth grid"));
    }
    let coarse = teacher_hardness.dims;
    let mut h = teacher_hardness.clone();
    for (e, inv) in h.excluded.iter_mut().zip(invalid_target_mask(gt, &coarse)?) {
        *e |= inv;
    }
    let selection = attach_local_weights(select_hard_voxels(&h, cfg, rng)?, gt, lga_cfg, &coarse)?;
    let loss = if selection.is_empty() {
        LossOutput::zero(student_final.probs().len())
    } else {
        hvm_on_probabilities(
            student_final,
            &selection.targets,
            &selection.labels,
            &selection.weights,
            Some(gt.invalid_id()),
        )?
    };
    Ok(GuidedHvm { selection, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridDims;
    use crate::hardness::global_hardness;
    use crate::losses::weighted_ce;
    use crate::losses::ClassWeights;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(x: usize, y: usize, z: usize) -> GridDims {
        GridDims::new(x, y, z, 0.2).unwrap()
    }

    #[test]
    fn gamma_schedule() {
        assert_eq!(ema_gamma(0, 0.99), 0.0);
        assert!((ema_gamma(9, 0.99) - 0.9).abs() < 1e-15);
        assert_eq!(ema_gamma(99, 0.99), 0.99);
        assert!((100..5000).all(|t| ema_gamma(t, 0.99) == 0.99));
    }

    #[test]
    fn first_update_copies_student() {
        let ts = TeacherState::new(&[1.0, -2.0]);
        let ts = ema_update(ts, &[5.0, 7.0], 0.99).unwrap();
        assert_eq!(ts.params, vec![5.0, 7.0]);
        assert_eq!(ts.step, 1);
        assert!(ema_update(ts, &[1.0], 0.99).is_err());
    }

    #[test]
    fn constant_student_is_approached_monotonically() {
        let mut ts = TeacherState::new(&[10.0, -3.0]);
        ts.step = 5;
        let target = [1.0, 2.0];
        let mut prev = [9.0, 5.0];
        for _ in 0..500 {
            ts.update(&target, 0.99).unwrap();
            for c in 0..2 {
                let d = (ts.params[c] - target[c]).abs();
                assert!(d <= prev[c]);
                prev[c] = d;
            }
        }
    }

    #[test]
    fn miou_scale_examples() {
        let d = dims(2, 1, 1);
        let gt = SemanticGrid::new(d, vec![1, 2], 3, 255).unwrap();
        let perfect = ProbabilityVolume::new(d, 3, vec![0.1, 0.8, 0.1, 0.1, 0.1, 0.8]).unwrap();
        assert_eq!(miou_scale(&perfect, &gt).unwrap().value, 1.0);

        let all_one = ProbabilityVolume::new(d, 3, vec![0.1, 0.8, 0.1, 0.1, 0.8, 0.1]).unwrap();
        // IoU(1) = 1/2, IoU(2) = 0
        assert_eq!(miou_scale(&all_one, &gt).unwrap().value, 0.25);

        let gt2 = SemanticGrid::new(d, vec![2, 2], 3, 255).unwrap();
        assert_eq!(miou_scale(&all_one, &gt2).unwrap().value, 0.0);

        let invalid = SemanticGrid::new(d, vec![255, 255], 3, 255).unwrap();
        assert!(!miou_scale(&all_one, &invalid).unwrap().is_defined());
    }

    #[test]
    fn distill_examples() {
        let cfg = DistillConfig {
            lambda: 1.0,
            ..DistillConfig::default()
        };
        let d = dims(1, 1, 1);
        let s = ProbabilityVolume::new(d, 2, vec![0.5, 0.5]).unwrap();
        let t = ProbabilityVolume::new(d, 2, vec![0.75, 0.25]).unwrap();
        let out = distill_loss(&s, &t, 0.0, &cfg, None).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 0.1308).abs() < 1e-4);

        let same = distill_loss(&t, &t, 0.3, &cfg, None).unwrap();
        assert_eq!(same.loss, 0.0);

        let at_one = distill_loss(&s, &t, 1.0, &cfg, None).unwrap();
        assert!((at_one.loss / out.loss - std::f64::consts::E).abs() < 1e-12);

        let masked = distill_loss(&s, &t, 0.0, &cfg, Some(&[false])).unwrap();
        assert!(masked.is_empty());
    }

    #[test]
    fn saturated_teacher_is_finite() {
        let d = dims(1, 1, 1);
        let s = ProbabilityVolume::new(d, 2, vec![1.0, 0.0]).unwrap();
        let t = ProbabilityVolume::new(d, 2, vec![0.0, 1.0]).unwrap();
        let out = distill_loss(&s, &t, 0.5, &DistillConfig::default(), None).unwrap();
        assert!(out.loss.is_finite() && out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn hvm_on_probabilities_matches_logit_form() {
        // For softmax outputs, CE on log-probabilities equals CE on the logits.
        let logits = [0.4, -1.0, 0.9, 0.1, 0.0, -0.3];
        let p = ProbabilityVolume::from_logits(dims(2, 1, 1), 3, &logits).unwrap();
        let a = hvm_on_probabilities(&p, &[1, 0], &[2, 0], &[0.5, 1.5], None).unwrap();
        let direct = crate::losses::hvm_loss(&[0.1, 0.0, -0.3, 0.4, -1.0, 0.9], 3, &[2, 0], &[0.5, 1.5], None).unwrap();
        assert!((a.loss - direct.loss).abs() < 1e-12);
    }

    #[test]
    fn uniform_hardness_and_zero_omega_is_random_weighted_ce() {
        let full = dims(4, 4, 4);
        let coarse = dims(2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels: Vec<u16> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let gt = SemanticGrid::new(full, labels, 3, 255).unwrap();
        let logits: Vec<f64> = (0..64 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let student = ProbabilityVolume::from_logits(full, 3, &logits).unwrap();
        let h = HardnessField::new(coarse, vec![1.0; 8], HardnessKind::Global).unwrap();
        let cfg = SelectionConfig {
            n: 4,
            t: 1.0,
            omega: 0.0,
            seed: 0,
        };
        let unit = LgaConfig {
            alpha: 1.0,
            beta: 0.0,
            ..LgaConfig::default()
        };
        let g = teacher_guided_hvm(&h, &student, &gt, &cfg, &unit, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(g.selection.hard_count, 0);
        let rows: Vec<f64> = g
            .selection
            .targets
            .iter()
            .flat_map(|&t| logits[t * 3..t * 3 + 3].to_vec())
            .collect();
        let wce = weighted_ce(&rows, 3, &g.selection.labels, &ClassWeights::ones(3), None).unwrap();
        assert!((g.loss.loss - wce.loss).abs() < 1e-12);
    }

    #[test]
    fn shared_init_gives_identical_selection() {
        let coarse = dims(2, 2, 2);
        let full = dims(4, 4, 4);
        let gt = SemanticGrid::filled(full, 1, 3, 255).unwrap();
        let logits: Vec<f64> = (0..8 * 3).map(|x| (x as f64).sin()).collect();
        let coarse_p = ProbabilityVolume::from_logits(coarse, 3, &logits).unwrap();
        let h = global_hardness(&coarse_p).unwrap();
        let fine = crate::grid::upsample_trilinear(&coarse_p, full).unwrap();
        let cfg = SelectionConfig {
            n: 3,
            t: 2.0,
            omega: 0.5,
            seed: 0,
        };
        let lga = LgaConfig::default();
        let a = teacher_guided_hvm(&h, &fine, &gt, &cfg, &lga, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = teacher_guided_hvm(&h, &fine, &gt, &cfg, &lga, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.selection, b.selection);
        let mut h2 = h.clone();
        h2.excluded = invalid_target_mask(&gt, &coarse).unwrap();
        let own = select_hard_voxels(&h2, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(own.indices, a.selection.indices);
    }

    fn simplex_pair() -> impl Strategy<Value = (ProbabilityVolume, ProbabilityVolume)> {
        (1usize..5, 2usize..6).prop_flat_map(|(v, c)| {
            (
                prop::collection::vec(-4.0f64..4.0, v * c),
                prop::collection::vec(-4.0f64..4.0, v * c),
            )
                .prop_map(move |(a, b)| {
                    let d = GridDims::new(v, 1, 1, 1.0).unwrap();
                    (
                        ProbabilityVolume::from_logits(d, c, &a).unwrap(),
                        ProbabilityVolume::from_logits(d, c, &b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn kl_is_non_negative((s, t) in simplex_pair(), mu in 0.0f64..1.0) {
            let out = distill_loss(&s, &t, mu, &DistillConfig::default(), None).unwrap();
            prop_assert!(out.loss >= 0.0);
        }

        #[test]
        fn ema_stays_in_convex_hull(init in prop::collection::vec(-5.0f64..5.0, 3), walk in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..200)) {
            let mut ts = TeacherState::new(&init);
            let mut lo = init.clone();
            let mut hi = init.clone();
            for s in &walk {
                ts.update(s, 0.99).unwrap();
                for c in 0..3 {
                    lo[c] = lo[c].min(s[c]);
                    hi[c] = hi[c].max(s[c]);
                    prop_assert!(ts.params[c] >= lo[c] - 1e-12 && ts.params[c] <= hi[c] + 1e-12);
                }
            }
        }

        #[test]
        fn miou_scale_ignores_voxel_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let labels: Vec<u16> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let logits: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let d = GridDims::new(n, 1, 1, 1.0).unwrap();
            let a = miou_scale(&ProbabilityVolume::from_logits(d, 4, &logits).unwrap(), &SemanticGrid::new(d, labels.clone(), 4, 255).unwrap()).unwrap();
            let perm: Vec<usize> = (0..n).rev().collect();
            let pl: Vec<u16> = perm.iter().map(|&i| labels[i]).collect();
            let pz: Vec<f64> = perm.iter().flat_map(|&i| logits[i * 4..i * 4 + 4].to_vec()).collect();
            let b = miou_scale(&ProbabilityVolume::from_logits(d, 4, &pz).unwrap(), &SemanticGrid::new(d, pl, 4, 255).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
