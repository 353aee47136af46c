//! The training loop and the inference path.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataio::{decode, generate_scene, scene_features, CodecOptions, LabelMap, SceneSpec, VoxelFileSet};
use crate::distill::{distill_loss, miou_scale, teacher_guided_hvm, TeacherState};
use crate::error::{Error, Result};
use crate::grid::{downsample_labels, softmax_backward, ProbabilityVolume, SemanticGrid, UpsamplePlan};
use crate::hardness::{global_hardness, lga_histogram, HardnessField, LgaConfig, LgaHistogram};
use crate::losses::{compose_total, hvm_loss, weighted_ce, AffinityTerm, ClassWeights, GradNorms, LossOutput, LossParts, NoAffinity};
use crate::metrics::{evaluate, MetricsReport, RangeCrop};
use crate::selection::{attach_local_weights, invalid_target_mask, select_hard_voxels, SelectionConfig, SelectionSet};
use crate::toymodel::{voxel_center, FeatureVolume, NetShape, OutputGrads, ToyNet};

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Data,
    Init,
    SelectStudent,
    SelectTeacher,
}

pub fn stream_rng(master: u64, stream: Stream, selection_seed: u64) -> ChaCha8Rng {
    let id = match stream {
        Stream::Data => 0,
        Stream::Init => 1,
        Stream::SelectStudent => 2 + 2 * selection_seed,
        Stream::SelectTeacher => 3 + 2 * selection_seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(id);
    rng
}

/// A scene with everything the loop needs precomputed.
#[derive(Debug, Clone)]
pub struct Scene {
    pub gt: SemanticGrid,
    pub gt_coarse: SemanticGrid,
    pub features: FeatureVolume,
    pub valid: Vec<bool>,
    pub invalid_targets: Vec<bool>,
}

impl Scene {
    pub fn new(gt: SemanticGrid, features: FeatureVolume) -> Result<Self> {
        let coarse = *features.dims();
        let gt_coarse = downsample_labels(&gt, coarse)?;
        let valid = (0..gt.dims().volume()).map(|v| gt.is_valid_at(v)).collect();
        let invalid_targets = invalid_target_mask(&gt, &coarse)?;
        Ok(Self {
            gt,
            gt_coarse,
            features,
            valid,
            invalid_targets,
        })
    }
}

/// Training and evaluation scenes, both drawn from the data stream.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl Dataset {
    pub fn synthetic(cfg: &ExperimentConfig) -> Result<Self> {
        use rand::Rng;
        let s = &cfg.scene;
        let full = s.full()?;
        let mut rng = stream_rng(cfg.seed, Stream::Data, 0);
        let mut make = |n: usize| -> Result<Vec<Scene>> {
            (0..n)
                .map(|_| {
                    let spec = SceneSpec::plane_and_boxes(full, s.num_classes, &s.layout, s.features.clone(), rng.gen())?;
                    let spec = SceneSpec {
                        invalid_id: s.invalid_id,
                        ..spec
                    };
                    let (gt, f) = generate_scene(&spec)?;
                    Scene::new(gt, f)
                })
                .collect()
        };
        let train = make(s.train_scenes)?;
        let eval = make(s.eval_scenes)?;
        Ok(Self { train, eval })
    }

    /// Decoded frames; each one serves for both training and evaluation.
    pub fn from_frames(cfg: &ExperimentConfig) -> Result<Self> {
        use rand::Rng;
        let mut rng = stream_rng(cfg.seed, Stream::Data, 0);
        let scenes = cfg
            .data
            .frames
            .iter()
            .map(|stem| {
                let gt = read_frame(cfg, stem)?;
                let f = scene_features(&gt, &cfg.scene.features, rng.gen())?;
                Scene::new(gt, f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train: scenes.clone(),
            eval: scenes,
        })
    }

    /// Frames when the config lists any, the synthetic scenes otherwise.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        if cfg.data.frames.is_empty() {
            Self::synthetic(cfg)
        } else {
            Self::from_frames(cfg)
        }
    }
}

pub fn label_map(cfg: &ExperimentConfig) -> Result<LabelMap> {
    match &cfg.data.label_map {
        Some(path) => LabelMap::load(path),
        None => Ok(LabelMap::identity(cfg.scene.num_classes)),
    }
}

pub fn codec_options(cfg: &ExperimentConfig) -> CodecOptions {
    CodecOptions {
        num_classes: cfg.scene.num_classes,
        invalid_id: cfg.scene.invalid_id,
        bit_order: cfg.data.bit_order,
    }
}

/// Reads and decodes one frame at the configured full resolution.
pub fn read_frame(cfg: &ExperimentConfig, stem: &Path) -> Result<SemanticGrid> {
    let dims = cfg.scene.full()?;
    let files = VoxelFileSet::read_checked(stem, &dims)?;
    decode(&files, &dims, &label_map(cfg)?, &codec_options(cfg)).map_err(|e| match e {
        Error::UnmappedLabel(_) | Error::Format { .. } => Error::Format {
            file: stem.display().to_string(),
            msg: e.to_string(),
        },
        other => other,
    })
}

/// One row of the per-step log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub total: f64,
    pub wce: f64,
    pub s_hvm: f64,
    pub t_hvm: f64,
    pub distill: f64,
    pub sum_local_hardness_student: f64,
    pub sum_local_hardness_teacher: f64,
    pub nonempty_selected: usize,
    pub selected: usize,
    pub nonempty_selected_teacher: usize,
    pub selected_teacher: usize,
    pub distill_mu: f64,
}

impl StepRow {
    pub fn nonempty_fraction(&self) -> Option<f64> {
        (self.selected > 0).then(|| self.nonempty_selected as f64 / self.selected as f64)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<StepRow>,
    pub initial_metrics: MetricsReport,
    pub final_metrics: MetricsReport,
    pub lga_histogram: LgaHistogram,
    pub student: Vec<f64>,
    pub teacher: Option<TeacherState>,
}

impl RunReport {
    pub fn write_rows_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(crate::hardness::csv_err)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "step",
                "total",
                "wce",
                "s_hvm",
                "t_hvm",
                "distill",
                "sum_local_hardness_student",
                "sum_local_hardness_teacher",
                "nonempty_selected",
                "selected",
                "nonempty_selected_teacher",
                "selected_teacher",
                "distill_mu",
            ])
            .map_err(crate::hardness::csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Coarse head, trilinear upsampling, per-voxel argmax. Nothing else.
pub fn predict(net: &ToyNet, scene: &Scene) -> Result<SemanticGrid> {
    let coarse = net.infer_coarse(&scene.features)?;
    let plan = UpsamplePlan::new(*scene.features.dims(), *scene.gt.dims())?;
    plan.forward(&coarse.probs)?.argmax_grid(scene.gt.invalid_id())
}

pub fn evaluate_net(net: &ToyNet, scenes: &[Scene], num_classes: usize) -> Result<MetricsReport> {
    let preds: Vec<SemanticGrid> = scenes.iter().map(|s| predict(net, s)).collect::<Result<_>>()?;
    evaluate(
        preds.iter().zip(scenes).map(|(p, s)| (p, &s.gt)),
        num_classes,
        &RangeCrop::standard(),
    )
}

pub fn net_shape(cfg: &ExperimentConfig) -> NetShape {
    NetShape {
        feature_dim: cfg.scene.features.dim,
        num_classes: cfg.scene.num_classes,
    }
}

/// Selection plus per-voxel weights under the active toggles.
struct Mining {
    cfg: SelectionConfig,
    weights: LgaConfig,
}

fn select(
    h: HardnessField,
    scene: &Scene,
    m: &Mining,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionSet> {
    let h = h.with_excluded(scene.invalid_targets.clone())?;
    attach_local_weights(select_hard_voxels(&h, &m.cfg, rng)?, &scene.gt, &m.weights, scene.features.dims())
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite { term, step: Some(step) },
        other => other,
    }
}

/// Per-term gradients at the network outputs. `t_hvm` is not yet scaled.
struct OutputTerms {
    probs: ProbabilityVolume,
    wce: Vec<f64>,
    affinity: Vec<f64>,
    s_hvm: Option<Vec<f64>>,
    t_hvm: Option<Vec<f64>>,
    distill: Option<Vec<f64>>,
}

/// Parameter gradients of each loss term. `t_hvm` is the gradient of the
/// unscaled term; `total` applies the weighting of the objective.
#[derive(Debug, Clone)]
pub struct TermGradients {
    pub row: StepRow,
    pub wce: Vec<f64>,
    pub affinity: Vec<f64>,
    pub s_hvm: Vec<f64>,
    pub t_hvm: Vec<f64>,
    pub distill: Vec<f64>,
    pub total: Vec<f64>,
}

/// Runs training steps on a fixed dataset.
pub struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    pub student: ToyNet,
    pub teacher: Option<TeacherState>,
    class_weights: ClassWeights,
    affinity: Box<dyn AffinityTerm>,
    mining: Mining,
    plan: UpsamplePlan,
    rng_student: ChaCha8Rng,
    rng_teacher: ChaCha8Rng,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let student = ToyNet::new(net_shape(cfg), &mut stream_rng(cfg.seed, Stream::Init, 0))?;
        let teacher = cfg.toggles.needs_teacher().then(|| TeacherState::new(student.params()));
        let t = cfg.toggles;
        let mining = Mining {
            cfg: SelectionConfig {
                n: cfg.effective_n()?,
                omega: if t.use_global() { cfg.selection.omega } else { 0.0 },
                ..cfg.selection.clone()
            },
            weights: if t.use_local() {
                cfg.lga.clone()
            } else {
                LgaConfig {
                    alpha: 1.0,
                    beta: 0.0,
                    ..cfg.lga.clone()
                }
            },
        };
        let plan = UpsamplePlan::new(cfg.scene.coarse()?, cfg.scene.full()?)?;
        Ok(Self {
            cfg,
            data,
            student,
            teacher,
            class_weights: cfg.class_weights()?,
            affinity: Box::new(NoAffinity),
            mining,
            plan,
            rng_student: stream_rng(cfg.seed, Stream::SelectStudent, cfg.selection.seed),
            rng_teacher: stream_rng(cfg.seed, Stream::SelectTeacher, cfg.selection.seed),
            step: 0,
        })
    }

    pub fn with_affinity(mut self, term: Box<dyn AffinityTerm>) -> Self {
        self.affinity = term;
        self
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Loss terms and statistics at the current parameters, with each term's
    /// gradient at the output it acts on.
    fn output_terms(&mut self, scene: &Scene) -> Result<(StepRow, OutputTerms)> {
        let cfg = self.cfg;
        let t = cfg.toggles;
        let nc = cfg.scene.num_classes;
        let invalid = scene.gt.invalid_id();
        let mut row = StepRow {
            step: self.step,
            ..StepRow::default()
        };
        let mut norms = GradNorms::default();

        let coarse = self.student.forward_coarse(&scene.features)?;
        let wce = weighted_ce(
            &coarse.logits,
            nc,
            scene.gt_coarse.labels(),
            &self.class_weights,
            Some(invalid),
        )?;
        norms.wce = wce.grad_norm();

        let aff = self.affinity.evaluate(&coarse.probs, &scene.gt_coarse)?;
        norms.affinity = aff.grad_norm();

        let mut s_hvm = None;
        if t.student_hvm() && self.mining.cfg.n > 0 {
            let sel = select(global_hardness(&coarse.probs)?, scene, &self.mining, &mut self.rng_student)?;
            row.sum_local_hardness_student = sel.sum_local_hardness(&cfg.lga);
            row.nonempty_selected = sel.nonempty_count();
            row.selected = sel.len();
            let centers: Vec<[f64; 3]> = sel
                .indices
                .iter()
                .map(|&v| voxel_center(v, scene.features.dims()))
                .collect();
            let logits = self.student.refine_at(&centers)?;
            let out = hvm_loss(&logits, nc, &sel.labels, &sel.weights, Some(invalid))?;
            norms.s_hvm = out.grad_norm();
            s_hvm = Some(out);
        }

        let mut t_hvm = None;
        let mut distill = None;
        if let Some(teacher) = &self.teacher {
            let tnet = ToyNet::from_params(self.student.shape(), teacher.params.clone())?;
            let t_coarse = tnet.infer_coarse(&scene.features)?;
            let s_final = self.plan.forward(&coarse.probs)?;
            if t.t_hvm && self.mining.cfg.n > 0 {
                let g = teacher_guided_hvm(
                    &global_hardness(&t_coarse.probs)?,
                    &s_final,
                    &scene.gt,
                    &self.mining.cfg,
                    &self.mining.weights,
                    &mut self.rng_teacher,
                )?;
                row.sum_local_hardness_teacher = g.selection.sum_local_hardness(&cfg.lga);
                row.nonempty_selected_teacher = g.selection.nonempty_count();
                row.selected_teacher = g.selection.len();
                norms.t_hvm = cfg.distill.delta * g.loss.grad_norm();
                t_hvm = Some(g.loss);
            }
            if t.distill {
                let t_final = self.plan.forward(&t_coarse.probs)?;
                let mu = miou_scale(&t_final, &scene.gt)?.value;
                row.distill_mu = mu;
                let out = distill_loss(&s_final, &t_final, mu, &cfg.distill, Some(&scene.valid))?;
                norms.distill = out.grad_norm();
                distill = Some(out);
            }
        }

        let parts = LossParts {
            wce: wce.loss,
            affinity: aff.loss,
            s_hvm: s_hvm.as_ref().map_or(0.0, |o| o.loss),
            t_hvm: t_hvm.as_ref().map_or(0.0, |o| o.loss),
            distill: distill.as_ref().map_or(0.0, |o| o.loss),
        };
        let report = compose_total(&parts, norms, cfg.distill.delta).map_err(|e| at_step(e, self.step))?;
        row.total = report.total;
        row.wce = report.wce;
        row.s_hvm = report.s_hvm;
        row.t_hvm = report.t_hvm;
        row.distill = report.distill;
        let keep = |o: Option<LossOutput>| o.filter(|o| !o.is_empty()).map(|o| o.grad);
        Ok((
            row,
            OutputTerms {
                probs: coarse.probs,
                wce: wce.grad,
                affinity: aff.grad,
                s_hvm: keep(s_hvm),
                t_hvm: keep(t_hvm),
                distill: keep(distill),
            },
        ))
    }

    /// Coarse-logit gradient of a gradient on the coarse probabilities and one
    /// on the upsampled probabilities.
    fn through_probs(&self, probs: &ProbabilityVolume, coarse: &[f64], fine: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut g = coarse.to_vec();
        if let Some(fine) = fine {
            for (a, b) in g.iter_mut().zip(self.plan.backward(probs, fine)?) {
                *a += b;
            }
        }
        softmax_backward(probs, &g)
    }

    /// Loss terms, statistics and the parameter gradient at the current
    /// parameters, without updating anything.
    pub fn loss_and_grad(&mut self, scene: &Scene) -> Result<(StepRow, Vec<f64>)> {
        let (row, terms) = self.output_terms(scene)?;
        let delta = self.cfg.distill.delta;
        let mut g_logits = terms.wce;
        let fine = match (&terms.t_hvm, &terms.distill) {
            (None, None) => None,
            (a, b) => {
                let mut g = vec![0.0; a.as_ref().or(b.as_ref()).map_or(0, |v| v.len())];
                if let Some(a) = a {
                    for (x, y) in g.iter_mut().zip(a) {
                        *x += delta * y;
                    }
                }
                if let Some(b) = b {
                    for (x, y) in g.iter_mut().zip(b) {
                        *x += y;
                    }
                }
                Some(g)
            }
        };
        if fine.is_some() || terms.affinity.iter().any(|&g| g != 0.0) {
            for (a, b) in g_logits
                .iter_mut()
                .zip(self.through_probs(&terms.probs, &terms.affinity, fine.as_deref())?)
            {
                *a += b;
            }
        }
        let grad = self.student.backward(OutputGrads {
            coarse_logits: Some(&g_logits),
            refine_logits: terms.s_hvm.as_deref(),
        })?;
        Ok((row, grad))
    }

    /// Every term's parameter gradient separately, evaluated at `params`.
    /// The selection streams and the student are left as they were, so
    /// repeated calls see the same random proposals.
    pub fn term_gradients_at(&mut self, params: &[f64], scene: &Scene) -> Result<TermGradients> {
        let saved = (self.rng_student.clone(), self.rng_teacher.clone(), self.student.params().to_vec());
        self.student.set_params(params)?;
        let out = self.term_gradients(scene);
        self.rng_student = saved.0;
        self.rng_teacher = saved.1;
        self.student.set_params(&saved.2)?;
        self.student.clear_tape();
        out
    }

    fn term_gradients(&mut self, scene: &Scene) -> Result<TermGradients> {
        let (row, terms) = self.output_terms(scene)?;
        let n = self.student.params().len();
        let zeros = vec![0.0; terms.probs.probs().len()];
        let coarse = |g: &[f64]| {
            self.student.backward(OutputGrads {
                coarse_logits: Some(g),
                refine_logits: None,
            })
        };
        let wce = coarse(&terms.wce)?;
        let affinity = coarse(&self.through_probs(&terms.probs, &terms.affinity, None)?)?;
        let s_hvm = match &terms.s_hvm {
            Some(g) => self.student.backward(OutputGrads {
                coarse_logits: None,
                refine_logits: Some(g),
            })?,
            None => vec![0.0; n],
        };
        let via_fine = |g: &Option<Vec<f64>>| -> Result<Vec<f64>> {
            match g {
                Some(g) => coarse(&self.through_probs(&terms.probs, &zeros, Some(g))?),
                None => Ok(vec![0.0; n]),
            }
        };
        let t_hvm = via_fine(&terms.t_hvm)?;
        let distill = via_fine(&terms.distill)?;
        let delta = self.cfg.distill.delta;
        let total = (0..n)
            .map(|i| wce[i] + affinity[i] + s_hvm[i] + delta * t_hvm[i] + distill[i])
            .collect();
        Ok(TermGradients {
            row,
            wce,
            affinity,
            s_hvm,
            t_hvm,
            distill,
            total,
        })
    }

    pub fn step(&mut self) -> Result<StepRow> {
        let data = self.data;
        let scene = &data.train[self.step % data.train.len()];
        let (row, grad) = self.loss_and_grad(scene)?;
        self.student
            .sgd_step(&grad, self.cfg.train.lr)
            .map_err(|e| at_step(e, self.step))?;
        if let Some(teacher) = self.teacher.as_mut() {
            teacher.update(self.student.params(), self.cfg.distill.gamma_cap)?;
        }
        self.step += 1;
        Ok(row)
    }
}

/// Full run on the dataset of `cfg`.
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunReport> {
    let data = Dataset::load(cfg)?;
    run_training_on(cfg, &data)
}

pub fn run_training_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunReport> {
    let mut trainer = Trainer::new(cfg, data)?;
    let nc = cfg.scene.num_classes;
    let initial_metrics = evaluate_net(&trainer.student, &data.eval, nc)?;
    let mut rows = Vec::with_capacity(cfg.train.steps);
    for _ in 0..cfg.train.steps {
        rows.push(trainer.step()?);
    }
    let final_metrics = evaluate_net(&trainer.student, &data.eval, nc)?;
    let mut hist = lga_histogram(&data.train[0].gt, &cfg.lga);
    for s in &data.train[1..] {
        hist.merge(&lga_histogram(&s.gt, &cfg.lga));
    }
    Ok(RunReport {
        rows,
        initial_metrics,
        final_metrics,
        lga_histogram: hist,
        student: trainer.student.params().to_vec(),
        teacher: trainer.teacher,
    })
}

/// The student's final prediction for a scene, for inspection.
pub fn final_probabilities(net: &ToyNet, scene: &Scene) -> Result<ProbabilityVolume> {
    let coarse = net.infer_coarse(&scene.features)?;
    UpsamplePlan::new(*scene.features.dims(), *scene.gt.dims())?.forward(&coarse.probs)
}
