//! Command-line verbs: `lga-stats`, `train`, `ablate`, `eval`, `decode`,
//! `encode`. Each verb is also callable as a library function.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Toggles};
use crate::dataio::{encode, VoxelFileSet};
use crate::error::{Error, Result};
use crate::grid::SemanticGrid;
use crate::hardness::{lga_histogram, LgaHistogram};
use crate::metrics::{MetricsReport, RangeName};
use crate::toymodel::{Checkpoint, ToyNet};
use crate::train::{evaluate_net, label_map, net_shape, read_frame, run_training, Dataset, RunReport};

#[derive(Debug, Parser)]
#[command(name = "hassc", version, about = "Hardness-aware voxel training on desk-scale scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// LGA histogram of decoded frames or of the synthetic training scenes.
    LgaStats {
        /// Frame path stems; falls back to the config's frames.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
    /// Train one model and write its report, metrics and checkpoints.
    Train,
    /// Run every cell of the configured sweep and write a table.
    Ablate,
    /// Evaluate a checkpoint through the plain inference path.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decode a frame into a dense grid of u16 labels.
    Decode {
        #[arg(long)]
        input: PathBuf,
    },
    /// Encode a dense grid back into frame files.
    Encode {
        #[arg(long)]
        input: PathBuf,
    },
}

impl Common {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs a parsed command line and returns what should go to stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = cli.common.load()?;
    match &cli.command {
        Command::LgaStats { inputs } => {
            let h = cmd_lga_stats(&cfg, inputs)?;
            Ok(histogram_summary(&h))
        }
        Command::Train => {
            let r = cmd_train(&cfg)?;
            Ok(train_summary(&cfg, &r))
        }
        Command::Ablate => {
            let rows = cmd_ablate(&cfg)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            Ok(format!(
                "{} cells, {failed} failed; table at {}\n",
                rows.len(),
                cfg.out.join(ABLATION_TABLE).display()
            ))
        }
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint),
        Command::Decode { input } => {
            let (g, path) = cmd_decode(&cfg, input)?;
            Ok(class_summary(&g, &path))
        }
        Command::Encode { input } => {
            let stem = cmd_encode(&cfg, input)?;
            Ok(format!("wrote {}.{{bin,label,invalid}}\n", stem.display()))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn file_stem(p: &Path) -> String {
    p.file_name().map_or_else(|| "frame".into(), |n| n.to_string_lossy().into_owned())
}

/// Histogram over the given frames, the config's frames, or the synthetic
/// training scenes, in that order of preference. Writes `lga_histogram.csv`.
pub fn cmd_lga_stats(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<LgaHistogram> {
    let stems = if inputs.is_empty() { &cfg.data.frames[..] } else { inputs };
    let grids: Vec<SemanticGrid> = if stems.is_empty() {
        Dataset::synthetic(cfg)?.train.into_iter().map(|s| s.gt).collect()
    } else {
        stems.iter().map(|s| read_frame(cfg, s)).collect::<Result<_>>()?
    };
    let mut hist = lga_histogram(&grids[0], &cfg.lga);
    for g in &grids[1..] {
        hist.merge(&lga_histogram(g, &cfg.lga));
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("lga_histogram.csv"), &csv_bytes(|b| hist.write_csv(b))?)?;
    Ok(hist)
}

pub fn histogram_summary(h: &LgaHistogram) -> String {
    let total = h.total().max(1) as f64;
    let mut s = String::from("lga\tempty\tnonempty\tshare\n");
    for (a, (e, n)) in h.empty.iter().zip(&h.nonempty).enumerate() {
        let _ = writeln!(s, "{a}\t{e}\t{n}\t{:.4}", (e + n) as f64 / total);
    }
    s
}

/// Writes everything a training run produces into `dir`.
pub fn write_run_outputs(cfg: &ExperimentConfig, report: &RunReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_file(&dir.join("report.csv"), &csv_bytes(|b| report.write_rows_csv(b))?)?;
    write_file(&dir.join("metrics_initial.json"), report.initial_metrics.to_json().as_bytes())?;
    write_file(&dir.join("metrics.json"), report.final_metrics.to_json().as_bytes())?;
    write_file(&dir.join("metrics.csv"), &csv_bytes(|b| report.final_metrics.write_csv(b))?)?;
    write_file(&dir.join("lga_histogram.csv"), &csv_bytes(|b| report.lga_histogram.write_csv(b))?)?;
    Checkpoint {
        params: report.student.clone(),
        teacher_step: None,
    }
    .write(&dir.join("student.ckpt"))?;
    if let Some(t) = &report.teacher {
        Checkpoint {
            params: t.params.clone(),
            teacher_step: Some(t.step),
        }
        .write(&dir.join("teacher.ckpt"))?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunReport> {
    let report = run_training(cfg)?;
    write_run_outputs(cfg, &report, &cfg.out)?;
    Ok(report)
}

fn train_summary(cfg: &ExperimentConfig, r: &RunReport) -> String {
    let mut s = format!("{} steps, outputs in {}\n", r.rows.len(), cfg.out.display());
    for (name, m) in &r.final_metrics.ranges {
        let _ = writeln!(s, "{}: IoU {:.4} mIoU {:.4}", name.as_str(), m.iou, m.miou);
    }
    s
}

pub const ABLATION_TABLE: &str = "ablation.csv";

/// One sweep cell and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: usize,
    pub preset: String,
    pub n: usize,
    pub effective_n: usize,
    pub lambda: f64,
    pub t: f64,
    pub omega: f64,
    pub seed: u64,
    pub status: String,
    pub iou_s: Option<f64>,
    pub miou_s: Option<f64>,
    pub iou_m: Option<f64>,
    pub miou_m: Option<f64>,
    pub iou_l: Option<f64>,
    pub miou_l: Option<f64>,
    pub final_total: Option<f64>,
    pub final_distill: Option<f64>,
}

/// The cartesian product of the sweep lists, each empty list standing for
/// the single configured value. Cells are `(preset label, config)`.
pub fn ablation_cells(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let a = &cfg.ablate;
    let presets: Vec<Option<&str>> = if a.presets.is_empty() {
        vec![None]
    } else {
        a.presets.iter().map(|p| Some(p.as_str())).collect()
    };
    let or_one = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let ns = if a.n.is_empty() { vec![cfg.selection.n] } else { a.n.clone() };
    let lambdas = or_one(&a.lambda, cfg.distill.lambda);
    let ts = or_one(&a.t, cfg.selection.t);
    let omegas = or_one(&a.omega, cfg.selection.omega);
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };

    let mut cells = Vec::new();
    for &p in &presets {
        let toggles = match p {
            Some(name) => Toggles::preset(name)?,
            None => cfg.toggles,
        };
        for &n in &ns {
            for &lambda in &lambdas {
                for &t in &ts {
                    for &omega in &omegas {
                        for &seed in &seeds {
                            let mut c = cfg.clone();
                            c.toggles = toggles;
                            c.selection.n = n;
                            c.selection.t = t;
                            c.selection.omega = omega;
                            c.distill.lambda = lambda;
                            c.seed = seed;
                            c.ablate = Default::default();
                            c.out = cfg.out.join(format!("cell_{:03}", cells.len()));
                            cells.push((p.unwrap_or("config").to_string(), c));
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn ablation_row(cell: usize, preset: &str, c: &ExperimentConfig, outcome: Result<RunReport>) -> AblationRow {
    let mut row = AblationRow {
        cell,
        preset: preset.to_string(),
        n: c.selection.n,
        effective_n: c.effective_n().unwrap_or(0),
        lambda: c.distill.lambda,
        t: c.selection.t,
        omega: c.selection.omega,
        seed: c.seed,
        status: "ok".into(),
        iou_s: None,
        miou_s: None,
        iou_m: None,
        miou_m: None,
        iou_l: None,
        miou_l: None,
        final_total: None,
        final_distill: None,
    };
    match outcome {
        Ok(r) => {
            let m = &r.final_metrics;
            let pick = |n: RangeName| m.get(n).map(|x| (x.iou, x.miou));
            (row.iou_s, row.miou_s) = pick(RangeName::S).unzip();
            (row.iou_m, row.miou_m) = pick(RangeName::M).unzip();
            (row.iou_l, row.miou_l) = pick(RangeName::L).unzip();
            row.final_total = r.rows.last().map(|x| x.total);
            row.final_distill = r.rows.last().map(|x| x.distill);
        }
        Err(e) => row.status = format!("error (exit {}): {e}", e.exit_code()),
    }
    row
}

/// Runs every cell, each writing into its own `cell_NNN` directory. A failed
/// cell is recorded in the table and the sweep continues.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let cells = ablation_cells(cfg)?;
    create_dir(&cfg.out)?;
    let rows: Vec<AblationRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, (preset, c))| {
            let outcome = run_training(c).and_then(|r| write_run_outputs(c, &r, &c.out).map(|_| r));
            ablation_row(i, preset, c, outcome)
        })
        .collect();
    let table = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        for r in &rows {
            w.serialize(r).map_err(crate::hardness::csv_err)?;
        }
        w.flush().map_err(|e| Error::io(ABLATION_TABLE, e))
    })?;
    write_file(&cfg.out.join(ABLATION_TABLE), &table)?;
    Ok(rows)
}

/// Loads a student checkpoint for the configured network shape.
pub fn load_net(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<ToyNet> {
    let ck = Checkpoint::read(checkpoint)?;
    let shape = net_shape(cfg);
    ToyNet::from_params(shape, ck.params).map_err(|e| {
        Error::Version(format!(
            "{} does not fit a network with {} features and {} classes: {e}",
            checkpoint.display(),
            shape.feature_dim,
            shape.num_classes
        ))
    })
}

/// Metrics JSON of a checkpoint on the evaluation scenes, also written to
/// `eval.json`. Only the coarse head, upsampling and argmax run.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<String> {
    let net = load_net(cfg, checkpoint)?;
    let data = Dataset::load(cfg)?;
    let report: MetricsReport = evaluate_net(&net, &data.eval, cfg.scene.num_classes)?;
    let json = report.to_json();
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("eval.json"), json.as_bytes())?;
    Ok(json)
}

/// Decodes a frame and writes its labels, little-endian u16 per voxel in grid
/// order, to `<out>/<name>.grid`.
pub fn cmd_decode(cfg: &ExperimentConfig, stem: &Path) -> Result<(SemanticGrid, PathBuf)> {
    let g = read_frame(cfg, stem)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join(format!("{}.grid", file_stem(stem)));
    let bytes: Vec<u8> = g.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    write_file(&path, &bytes)?;
    Ok((g, path))
}

fn class_summary(g: &SemanticGrid, path: &Path) -> String {
    let mut counts = vec![0u64; g.num_classes()];
    let mut invalid = 0u64;
    for &l in g.labels() {
        match counts.get_mut(l as usize) {
            Some(c) => *c += 1,
            None => invalid += 1,
        }
    }
    let mut s = format!("wrote {}\nclass\tvoxels\n", path.display());
    for (c, n) in counts.iter().enumerate() {
        let _ = writeln!(s, "{c}\t{n}");
    }
    let _ = writeln!(s, "invalid\t{invalid}");
    s
}

/// Reads a dense grid written by `decode` and writes the three frame files
/// next to each other under `<out>/<name>`.
pub fn cmd_encode(cfg: &ExperimentConfig, grid: &Path) -> Result<PathBuf> {
    let dims = cfg.scene.full()?;
    let bytes = fs::read(grid).map_err(|e| Error::io(grid, e))?;
    if bytes.len() != 2 * dims.volume() {
        return Err(Error::Length {
            file: grid.display().to_string(),
            expected: 2 * dims.volume(),
            actual: bytes.len(),
        });
    }
    let labels = bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    let g = SemanticGrid::new(dims, labels, cfg.scene.num_classes, cfg.scene.invalid_id).map_err(|e| Error::Format {
        file: grid.display().to_string(),
        msg: e.to_string(),
    })?;
    let files: VoxelFileSet = encode(&g, &label_map(cfg)?.inverse(), cfg.data.bit_order)?;
    create_dir(&cfg.out)?;
    let name = grid.file_stem().map_or_else(|| "frame".into(), |n| n.to_string_lossy().into_owned());
    let stem = cfg.out.join(name);
    files.write(&stem)?;
    Ok(stem)
}
