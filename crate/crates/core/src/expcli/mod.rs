//! Experiment harness behind the `coin` binary.
//!
//! Commands: `run` (one method, every seed), `compare` (several methods
//! under one epoch budget), `sweep` (one hyperparameter over a value list)
//! and `dump-features` (raw features of a checkpoint for external plotting).
//! Every CSV is a deterministic function of the spec; wall-clock timing only
//! goes to `summary.json` and `compare_timing.json`.

pub mod spec;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{features_to_csv, parse_features_csv, train_test_split};
use crate::error::{CoinError, Result};
use crate::fmt_f64;
use crate::metrics::{s_dbw, SDbwResult};
use crate::model::{load_checkpoint, save_checkpoint, CHECKPOINT_EXTENSION};
use crate::pipeline::{run, EpochRecord, FeatureLayer, Method, RunReport, Stage, TrainConfig};

pub use spec::ExperimentSpec;

pub const REPORT_HEADER: &str = "epoch,stage,train_loss,train_acc,test_acc,scat,dens_bw,s_dbw";

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
}

impl Overrides {
    fn apply(&self, spec: &mut ExperimentSpec) -> Result<PathBuf> {
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(CoinError::validation("--seeds", "at least one seed is required"));
            }
            spec.seeds = seeds.clone();
        }
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err(CoinError::validation("--jobs", "must be >= 1"));
            }
            spec.jobs = Some(j);
        }
        self.out_dir
            .clone()
            .or_else(|| spec.out_dir.clone())
            .ok_or_else(|| CoinError::validation("out_dir", "set `out_dir` in the spec or pass --out"))
    }
}

pub fn report_to_csv(report: &RunReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in &report.per_epoch {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.stage,
            fmt_f64(r.train_loss),
            fmt_f64(r.train_acc),
            fmt_f64(r.test_acc),
            fmt_f64(r.s_dbw.scat),
            fmt_f64(r.s_dbw.dens_bw),
            fmt_f64(r.s_dbw.score),
        );
    }
    out
}

fn parse_field<T: std::str::FromStr>(field: &str, row: usize, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| CoinError::parse(field, format!("row {row}: `{s}`")))
}

/// Reads a `report.csv` back into epoch records.
pub fn parse_report_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(CoinError::parse("header", format!("expected `{REPORT_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(CoinError::parse(format!("row {i}"), "expected 8 fields"));
            }
            let stage = match f[1] {
                "init" => Stage::Init,
                "finetune" => Stage::Finetune,
                other => return Err(CoinError::parse("stage", format!("row {i}: `{other}`"))),
            };
            Ok(EpochRecord {
                epoch: parse_field("epoch", i, f[0])?,
                stage,
                train_loss: parse_field("train_loss", i, f[2])?,
                train_acc: parse_field("train_acc", i, f[3])?,
                test_acc: parse_field("test_acc", i, f[4])?,
                s_dbw: SDbwResult {
                    scat: parse_field("scat", i, f[5])?,
                    dens_bw: parse_field("dens_bw", i, f[6])?,
                    score: parse_field("s_dbw", i, f[7])?,
                },
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    method: Method,
    seed: u64,
    epochs: usize,
    init_epochs: usize,
    finetune_epochs: usize,
    alpha: f64,
    eta: f64,
    tau: f64,
    lambda: f64,
    batch_size: usize,
    final_test_acc: f64,
    final_scat: f64,
    final_dens_bw: f64,
    final_s_dbw: f64,
    pretrain_seconds: f64,
    init_seconds: f64,
    finetune_seconds: f64,
    wall_time_seconds: f64,
    checkpoint: &'a str,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CoinError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CoinError::io(path, e))
}

pub fn run_dir_name(method: Method, seed: u64) -> String {
    format!("{method}-seed{seed}")
}

/// One finished (config, seed) run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub report: RunReport,
    pub dir: PathBuf,
}

/// Runs every `(config, seed)` pair on a pool of `jobs` threads, writing each
/// run's report, summary and checkpoint under `out/<label>/`. Results come
/// back in input order.
fn execute(spec: &ExperimentSpec, jobs: &[(String, TrainConfig)], out: &Path) -> Result<Vec<RunRecord>> {
    let threads = spec.jobs.unwrap_or(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CoinError::Numeric(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(label, cfg)| {
                let data = spec.dataset.generate(cfg.seed)?;
                let outcome = run(cfg, &spec.stack, &spec.pretrain, &data, &spec.options)?;
                let dir = out.join(label);
                create_dir(&dir)?;
                write_file(&dir.join("report.csv"), &report_to_csv(&outcome.report))?;
                let ckpt_name = format!("final.{CHECKPOINT_EXTENSION}");
                save_checkpoint(&outcome.params, &spec.stack, &dir.join(&ckpt_name))?;
                let r = &outcome.report;
                let summary = Summary {
                    method: cfg.method,
                    seed: cfg.seed,
                    epochs: cfg.epochs,
                    init_epochs: cfg.init_epochs(),
                    finetune_epochs: cfg.finetune_epochs(),
                    alpha: cfg.alpha,
                    eta: cfg.eta,
                    tau: cfg.tau,
                    lambda: cfg.lambda,
                    batch_size: cfg.batch_size,
                    final_test_acc: r.final_accuracy,
                    final_scat: r.final_s_dbw.scat,
                    final_dens_bw: r.final_s_dbw.dens_bw,
                    final_s_dbw: r.final_s_dbw.score,
                    pretrain_seconds: r.timing.pretrain_seconds,
                    init_seconds: r.timing.init_seconds,
                    finetune_seconds: r.timing.finetune_seconds,
                    wall_time_seconds: r.timing.wall_time_seconds(),
                    checkpoint: &ckpt_name,
                };
                let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
                write_file(&dir.join("summary.json"), &(json + "\n"))?;
                Ok(RunRecord {
                    config: cfg.clone(),
                    report: outcome.report,
                    dir,
                })
            })
            .collect()
    })
}

fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

/// `run`: the `[train]` configuration for every seed.
pub fn cmd_run(mut spec: ExperimentSpec, ov: &Overrides) -> Result<Vec<RunRecord>> {
    let out = ov.apply(&mut spec)?;
    create_dir(&out)?;
    let jobs: Vec<(String, TrainConfig)> = spec
        .seeds
        .iter()
        .map(|&s| (run_dir_name(spec.train.method, s), seeded(&spec.train, s)))
        .collect();
    execute(&spec, &jobs, &out)
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub config: TrainConfig,
    pub acc: (f64, f64),
    pub s_dbw: (f64, f64),
    pub init_seconds: (f64, f64),
    pub finetune_seconds: (f64, f64),
    pub per_seed_acc: Vec<f64>,
    pub per_seed_s_dbw: Vec<f64>,
}

pub const COMPARE_HEADER: &str = "method,alpha,epochs,init_epochs,finetune_epochs,seeds,test_acc_mean,test_acc_std,s_dbw_mean,s_dbw_std";
#[derive(Serialize)]
struct TimingRow<'a> {
    method: &'a str,
    init_seconds_mean: f64,
    init_seconds_std: f64,
    finetune_seconds_mean: f64,
    finetune_seconds_std: f64,
}

fn method_label(cfg: &TrainConfig, all: &[TrainConfig]) -> String {
    let dup = all.iter().filter(|c| c.method == cfg.method).count() > 1;
    if dup {
        format!("{}-a{}", cfg.method, cfg.alpha)
    } else {
        cfg.method.to_string()
    }
}

fn aggregate(label: String, config: TrainConfig, records: &[&RunRecord]) -> CompareRow {
    let acc: Vec<f64> = records.iter().map(|r| r.report.final_accuracy).collect();
    let sd: Vec<f64> = records.iter().map(|r| r.report.final_s_dbw.score).collect();
    let init: Vec<f64> = records.iter().map(|r| r.report.timing.init_seconds).collect();
    let ft: Vec<f64> = records.iter().map(|r| r.report.timing.finetune_seconds).collect();
    CompareRow {
        label,
        config,
        acc: mean_std(&acc),
        s_dbw: mean_std(&sd),
        init_seconds: mean_std(&init),
        finetune_seconds: mean_std(&ft),
        per_seed_acc: acc,
        per_seed_s_dbw: sd,
    }
}

/// `compare`: every `[[methods]]` entry over every seed under one budget `N`.
pub fn cmd_compare(mut spec: ExperimentSpec, ov: &Overrides) -> Result<Vec<CompareRow>> {
    let out = ov.apply(&mut spec)?;
    if spec.methods.len() < 2 {
        return Err(CoinError::validation("methods", "compare needs at least 2 methods"));
    }
    let n = spec.methods[0].epochs;
    if let Some((i, m)) = spec.methods.iter().enumerate().find(|(_, m)| m.epochs != n) {
        return Err(CoinError::validation(
            format!("methods[{i}].epochs"),
            format!("all methods must share the epoch budget: {} != {n}", m.epochs),
        ));
    }
    let labels: Vec<String> = spec.methods.iter().map(|m| method_label(m, &spec.methods)).collect();
    let mut unique = labels.clone();
    unique.sort();
    unique.dedup();
    if unique.len() != labels.len() {
        return Err(CoinError::validation("methods", "two entries share the same method and alpha"));
    }
    create_dir(&out)?;
    let mut jobs = Vec::new();
    for (label, cfg) in labels.iter().zip(&spec.methods) {
        for &s in &spec.seeds {
            jobs.push((format!("{label}-seed{s}"), seeded(cfg, s)));
        }
    }
    let records = execute(&spec, &jobs, &out)?;
    let k = spec.seeds.len();
    let rows: Vec<CompareRow> = labels
        .iter()
        .zip(&spec.methods)
        .enumerate()
        .map(|(i, (label, cfg))| {
            let mine: Vec<&RunRecord> = records[i * k..(i + 1) * k].iter().collect();
            aggregate(label.clone(), cfg.clone(), &mine)
        })
        .collect();

    let mut table = String::from(COMPARE_HEADER);
    table.push('\n');
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.config.alpha,
            r.config.epochs,
            r.config.init_epochs(),
            r.config.finetune_epochs(),
            k,
            fmt_f64(r.acc.0),
            fmt_f64(r.acc.1),
            fmt_f64(r.s_dbw.0),
            fmt_f64(r.s_dbw.1),
        );
    }
    let timing: Vec<TimingRow> = rows
        .iter()
        .map(|r| TimingRow {
            method: &r.label,
            init_seconds_mean: r.init_seconds.0,
            init_seconds_std: r.init_seconds.1,
            finetune_seconds_mean: r.finetune_seconds.0,
            finetune_seconds_std: r.finetune_seconds.1,
        })
        .collect();
    write_file(&out.join("compare.csv"), &table)?;
    let json = serde_json::to_string_pretty(&timing).expect("timing serialises");
    write_file(&out.join("compare_timing.json"), &(json + "\n"))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Tau,
    Epochs,
}

impl std::str::FromStr for SweepParam {
    type Err = CoinError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "tau" => Ok(SweepParam::Tau),
            "N" | "n" | "epochs" => Ok(SweepParam::Epochs),
            other => Err(CoinError::validation("--param", format!("expected alpha, tau or N, got `{other}`"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Tau => "tau",
            SweepParam::Epochs => "N",
        }
    }

    fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Tau => cfg.tau = value,
            SweepParam::Epochs => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(CoinError::validation("--values", format!("N must be a positive integer, got {value}")));
                }
                cfg.epochs = value as usize;
            }
        }
        cfg.validate().map_err(|e| match e {
            CoinError::Validation { message, .. } => CoinError::validation("--values", format!("{}={value}: {message}", self.name())),
            other => other,
        })?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub acc: (f64, f64),
    pub s_dbw: (f64, f64),
    pub per_seed_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    /// Index of the row with the highest mean accuracy (first on ties).
    pub argmax: usize,
}

pub const SWEEP_HEADER: &str = "param,value,seeds,test_acc_mean,test_acc_std,s_dbw_mean,s_dbw_std";

/// `sweep`: the `[train]` configuration with one parameter varied.
pub fn cmd_sweep(mut spec: ExperimentSpec, ov: &Overrides, param: SweepParam, values: &[f64]) -> Result<SweepTable> {
    let out = ov.apply(&mut spec)?;
    if values.is_empty() {
        return Err(CoinError::validation("--values", "value list is empty"));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(&spec.train, v))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&out)?;
    let mut jobs = Vec::new();
    for (cfg, &v) in configs.iter().zip(values) {
        for &s in &spec.seeds {
            jobs.push((format!("{}-{}{v}-seed{s}", cfg.method, param.name()), seeded(cfg, s)));
        }
    }
    let records = execute(&spec, &jobs, &out)?;
    let k = spec.seeds.len();
    let rows: Vec<SweepRow> = values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let chunk = &records[i * k..(i + 1) * k];
            let acc: Vec<f64> = chunk.iter().map(|r| r.report.final_accuracy).collect();
            let sd: Vec<f64> = chunk.iter().map(|r| r.report.final_s_dbw.score).collect();
            SweepRow {
                value,
                acc: mean_std(&acc),
                s_dbw: mean_std(&sd),
                per_seed_acc: acc,
            }
        })
        .collect();
    let mut argmax = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.acc.0 > rows[argmax].acc.0 {
            argmax = i;
        }
    }
    let row_line = |r: &SweepRow| {
        format!(
            "{},{},{},{},{},{},{}\n",
            param.name(),
            r.value,
            k,
            fmt_f64(r.acc.0),
            fmt_f64(r.acc.1),
            fmt_f64(r.s_dbw.0),
            fmt_f64(r.s_dbw.1)
        )
    };
    let mut table = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        table.push_str(&row_line(r));
    }
    write_file(&out.join("sweep.csv"), &table)?;
    write_file(&out.join("sweep_argmax.csv"), &format!("{SWEEP_HEADER}\n{}", row_line(&rows[argmax])))?;
    Ok(SweepTable { param, rows, argmax })
}

/// Result of `dump-features`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub rows: usize,
    pub cols: usize,
    pub s_dbw: SDbwResult,
}

/// `dump-features`: encodes the test split of the spec's dataset for `seed`
/// (the same split a run with that seed evaluates on) and writes the chosen
/// layer as CSV, followed by `# s_dbw=<value>`.
pub fn cmd_dump_features(
    checkpoint: &Path,
    spec: &ExperimentSpec,
    seed: u64,
    layer: FeatureLayer,
    out_path: &Path,
) -> Result<FeatureDump> {
    let (params, config) = load_checkpoint(checkpoint)?;
    if config.d_in != spec.dataset.dims {
        return Err(CoinError::validation(
            "dataset.dims",
            format!("checkpoint expects {} input features, dataset has {}", config.d_in, spec.dataset.dims),
        ));
    }
    if config.num_classes != spec.dataset.classes {
        return Err(CoinError::validation(
            "dataset.classes",
            format!("checkpoint has {} classes, dataset has {}", config.num_classes, spec.dataset.classes),
        ));
    }
    let data = spec.dataset.generate(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, test) = train_test_split(&data, spec.options.test_fraction, &mut rng)?;
    let z = params.encode(test.features.view())?;
    let feats = match layer {
        FeatureLayer::Z => z,
        FeatureLayer::V => params.project(z.view())?,
    };
    let sd = s_dbw(feats.view(), &test.labels)?;
    let mut text = features_to_csv(&feats, &test.labels);
    let _ = writeln!(text, "# s_dbw={}", fmt_f64(sd.score));
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out_path, &text)?;
    Ok(FeatureDump {
        rows: feats.nrows(),
        cols: feats.ncols(),
        s_dbw: sd,
    })
}

/// Parses a feature dump back into features, labels and the recorded score.
pub fn read_feature_dump(path: &Path) -> Result<(ndarray::Array2<f64>, Vec<usize>, Option<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| CoinError::io(path, e))?;
    let (features, labels) = parse_features_csv(&text)?;
    let score = text
        .lines()
        .filter_map(|l| l.strip_prefix("# s_dbw="))
        .next_back()
        .map(|v| parse_field::<f64>("s_dbw", 0, v))
        .transpose()?;
    Ok((features, labels, score))
}
