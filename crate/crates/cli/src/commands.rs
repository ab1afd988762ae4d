//! The `train`, `eval`, `sweep` and `analyze` commands.

use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aha_core::analysis::{
    gaps_csv, lambda_sweep_report, load_trace, per_head_usage, save_trace, sorted_curve_csv, sorted_usage_curve,
    token_trace_export, window_sweep_report, GateTrace, SweepReport, SweepRow, TokenTrace, UsageReport,
};
use aha_core::checkpoint::Checkpoint;
use aha_core::eval::{evaluate, EvalMetrics};
use aha_core::model::{init_params, GateForcing};
use aha_core::tasks::{gen_needle, MixedStream, TaskKind, TaskMix, TaskSample};
use aha_core::training::{train, StepRecord, CSV_HEADER};
use aha_core::Scalar;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{substream, ConfigError, ExperimentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// From `AHA_PRECISION`; f32 when unset.
    pub fn from_env() -> Result<Self, ConfigError> {
        match std::env::var("AHA_PRECISION") {
            Err(_) => Ok(Precision::F32),
            Ok(v) => match v.as_str() {
                "f32" => Ok(Precision::F32),
                "f64" => Ok(Precision::F64),
                other => Err(ConfigError(format!("AHA_PRECISION must be f32 or f64, got {other:?}"))),
            },
        }
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    /// Held-out evaluation of the final model on the training mix.
    pub metrics: EvalMetrics,
    pub out_dir: PathBuf,
}

/// Held-out samples for a run: an independent stream of the same mix.
pub fn heldout_samples(cfg: &ExperimentConfig) -> Result<Vec<TaskSample>> {
    let stream = MixedStream::new(cfg.tasks.clone(), substream(cfg.seed, "eval"))?;
    Ok(stream.take(cfg.eval.samples).collect())
}

pub fn cmd_train(config: &Path, out: &Path, precision: Precision) -> Result<TrainSummary> {
    let cfg = ExperimentConfig::load(config)?;
    run_experiment(&cfg, out, precision)
}

/// Train, checkpoint and evaluate one resolved configuration into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, precision: Precision) -> Result<TrainSummary> {
    let cfg = cfg.clone().resolved()?;
    match precision {
        Precision::F32 => run_typed::<f32>(&cfg, out),
        Precision::F64 => run_typed::<f64>(&cfg, out),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("resolved_config.json"), cfg.to_pretty_json() + "\n")?;

    let params = init_params::<T>(&cfg.model, substream(cfg.seed, "init"))?;
    let mut data = MixedStream::new(cfg.tasks.clone(), substream(cfg.seed, "data"))?;
    let csv = RefCell::new(BufWriter::new(File::create(out.join("metrics.csv"))?));
    writeln!(csv.borrow_mut(), "{CSV_HEADER}")?;
    let io_err = RefCell::new(None);
    let result = train(params, &cfg.model, &cfg.train, &mut data, |r| {
        if let Err(e) = writeln!(csv.borrow_mut(), "{}", r.csv_row()) {
            io_err.borrow_mut().get_or_insert(e);
        }
    });
    csv.borrow_mut().flush()?;
    if let Some(e) = io_err.into_inner() {
        return Err(e).context("writing metrics.csv");
    }
    let (params, records) = result.context("training")?;

    let meta = serde_json::json!({ "experiment": cfg, "steps": records.len() });
    Checkpoint::from_params(&cfg.model, &params, meta).save(&out.join("checkpoint.json"))?;

    let samples = heldout_samples(cfg)?;
    let (metrics, traces) = evaluate(&params, &cfg.model, &samples, "mixed", GateForcing::Auto)?;
    write_json(&out.join("eval_metrics.json"), &metrics)?;
    write_json(&out.join("usage_report.json"), &metrics.usage)?;
    let dir = out.join("traces");
    fs::create_dir_all(&dir)?;
    for (i, t) in traces.iter().take(cfg.eval.traces).enumerate() {
        save_trace(&dir.join(format!("{i:04}.trace")), t)?;
    }
    Ok(TrainSummary {
        records,
        metrics,
        out_dir: out.to_path_buf(),
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// `counting`, `needle`, `local_lm` or `mixed`.
    pub task: String,
    pub force_gates: Option<GateForcing>,
    pub samples: usize,
    pub seed: u64,
    pub length: Option<usize>,
    pub key_distance: Option<usize>,
    /// Inference window; differs from training only with a warning.
    pub window: Option<usize>,
    pub traces_out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub metrics: EvalMetrics,
    pub warnings: Vec<String>,
}

/// Samples for `task` drawn with the checkpoint's task parameters.
pub fn eval_samples(mix: &TaskMix, opts: &EvalOptions) -> Result<Vec<TaskSample>> {
    let mut mix = mix.clone();
    if let Some(l) = opts.length {
        mix.length = l;
        mix.needle_max_distance = mix.needle_max_distance.min(l.saturating_sub(5));
        mix.needle_min_distance = mix.needle_min_distance.min(mix.needle_max_distance);
    }
    if opts.task != "mixed" {
        let task: TaskKind = opts.task.parse().map_err(|_| {
            ConfigError(format!("unknown task {:?}; expected counting, needle, local_lm or mixed", opts.task))
        })?;
        mix.weights = [0.0; 3];
        mix.weights[TaskKind::ALL.iter().position(|&t| t == task).unwrap()] = 1.0;
    }
    if let Some(d) = opts.key_distance {
        if opts.task != "needle" {
            return Err(ConfigError("--key-distance applies to the needle task only".into()).into());
        }
        return (0..opts.samples as u64)
            .map(|i| Ok(gen_needle(substream(opts.seed, "eval") ^ i, mix.length, d)?))
            .collect();
    }
    mix.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(MixedStream::new(mix, substream(opts.seed, "eval"))?
        .take(opts.samples)
        .collect())
}

pub fn cmd_eval(ckpt: &Path, opts: &EvalOptions, precision: Precision) -> Result<EvalOutcome> {
    let ck = Checkpoint::load(ckpt)?;
    match precision {
        Precision::F32 => eval_typed::<f32>(&ck, opts),
        Precision::F64 => eval_typed::<f64>(&ck, opts),
    }
}

fn eval_typed<T: Scalar>(ck: &Checkpoint, opts: &EvalOptions) -> Result<EvalOutcome> {
    if opts.samples == 0 {
        bail!(ConfigError("--samples must be positive".into()));
    }
    let params = ck.params::<T>()?;
    let mut model = ck.model_config.clone();
    let mut warnings = Vec::new();
    if let Some(w) = opts.window {
        if w != model.window {
            warnings.push(format!(
                "inference window {w} differs from the training window {}; results are not comparable to training",
                model.window
            ));
            model.window = w;
            model.validate().map_err(|e| ConfigError(e.to_string()))?;
        }
    }
    let mix: TaskMix = ck
        .meta
        .get("experiment")
        .and_then(|e| e.get("tasks"))
        .and_then(|t| serde_json::from_value(t.clone()).ok())
        .unwrap_or_default();
    let samples = eval_samples(&mix, opts)?;
    if let Some(s) = samples.iter().find(|s| s.len() > model.max_seq_len) {
        bail!(ConfigError(format!(
            "samples of length {} exceed max_seq_len {}",
            s.len(),
            model.max_seq_len
        )));
    }
    let forcing = opts.force_gates.unwrap_or(GateForcing::Auto);
    let (metrics, traces) = evaluate(&params, &model, &samples, &opts.task, forcing)?;
    if let Some(dir) = &opts.traces_out {
        fs::create_dir_all(dir)?;
        for (i, t) in traces.iter().enumerate() {
            save_trace(&dir.join(format!("{i:04}.trace")), t)?;
        }
    }
    Ok(EvalOutcome { metrics, warnings })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisKind {
    Window,
    Lambda,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub kind: AxisKind,
    pub values: Vec<f64>,
}

impl std::str::FromStr for Axis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let (name, list) = s
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("axis {s:?} must look like w=4,8 or lambda=0,0.01")))?;
        let kind = match name.trim() {
            "w" | "window" => AxisKind::Window,
            "lambda" => AxisKind::Lambda,
            other => return Err(ConfigError(format!("unknown sweep axis {other:?}; use w or lambda"))),
        };
        let values = list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| ConfigError(format!("bad axis value {v:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(ConfigError("sweep axis is empty".into()));
        }
        if kind == AxisKind::Window && values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(ConfigError("window values must be positive integers".into()));
        }
        Ok(Axis { kind, values })
    }
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self.kind {
            AxisKind::Window => "w",
            AxisKind::Lambda => "lambda",
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig, value: f64) {
        match self.kind {
            AxisKind::Window => cfg.model.window = value as usize,
            AxisKind::Lambda => cfg.train.lambda = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub axis_value: f64,
    pub seed: u64,
    pub mu_f: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    /// Seed-averaged table; `None` for a single-point sweep.
    pub report: Option<SweepReport>,
}

/// Seed-averaged rows, in axis order of first appearance.
pub fn average_runs(runs: &[SweepRun]) -> Vec<SweepRow> {
    let mut values: Vec<f64> = Vec::new();
    for r in runs {
        if !values.contains(&r.axis_value) {
            values.push(r.axis_value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let pts: Vec<&SweepRun> = runs.iter().filter(|r| r.axis_value == v).collect();
            let k = pts.len() as f64;
            SweepRow {
                axis_value: v,
                mu_f: pts.iter().map(|r| r.mu_f).sum::<f64>() / k,
                accuracy: Some(pts.iter().map(|r| r.accuracy).sum::<f64>() / k),
            }
        })
        .collect()
}

/// Train every (axis value, seed) pair. Seeds are `base.seed + 0..seeds`.
/// `runs.csv` is appended as runs finish, so a failing point keeps the
/// results gathered before it.
pub fn cmd_sweep(base: &ExperimentConfig, axis: &Axis, seeds: usize, out: &Path, precision: Precision) -> Result<SweepSummary> {
    if seeds == 0 {
        bail!(ConfigError("--seeds must be positive".into()));
    }
    let base = base.clone().resolved()?;
    // Validate every point before any compute.
    for &v in &axis.values {
        let mut c = base.clone();
        axis.apply(&mut c, v);
        c.resolved()
            .map_err(|e| ConfigError(format!("{}={v}: {}", axis.name(), e.0)))?;
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("base_config.json"), base.to_pretty_json() + "\n")?;
    let mut runs_csv = BufWriter::new(File::create(out.join("runs.csv"))?);
    writeln!(runs_csv, "{},seed,mu_f,accuracy,loss", axis.name())?;
    runs_csv.flush()?;
    let mut runs = Vec::new();
    for &v in &axis.values {
        for s in 0..seeds as u64 {
            let mut c = base.clone();
            axis.apply(&mut c, v);
            c.seed = base.seed + s;
            let dir = out.join(format!("{}={v}", axis.name())).join(format!("seed={}", c.seed));
            let summary = run_experiment(&c, &dir, precision)
                .with_context(|| format!("sweep point {}={v}, seed {}", axis.name(), c.seed))?;
            let m = &summary.metrics;
            writeln!(runs_csv, "{v},{},{},{},{}", c.seed, m.usage.mu_f_overall, m.accuracy, m.loss)?;
            runs_csv.flush()?;
            runs.push(SweepRun {
                axis_value: v,
                seed: c.seed,
                mu_f: m.usage.mu_f_overall,
                accuracy: m.accuracy,
                loss: m.loss,
                dir,
            });
        }
    }
    let rows = average_runs(&runs);
    let report = if rows.len() >= 2 {
        let r = match axis.kind {
            AxisKind::Window => window_sweep_report(rows)?,
            AxisKind::Lambda => lambda_sweep_report(rows)?,
        };
        fs::write(out.join("sweep.csv"), r.to_csv())?;
        write_json(&out.join("sweep_report.json"), &r)?;
        Some(r)
    } else {
        None
    };
    Ok(SweepSummary { runs, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub traces: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
    pub mu_f: f64,
}

/// Read every `*.trace` file under `dir` (sorted by name), skipping corrupt
/// ones, and write the heatmap, sorted curve, gap table and token traces.
pub fn cmd_analyze(dir: &Path, out: &Path) -> Result<AnalyzeSummary> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "trace"))
        .collect();
    paths.sort();
    let mut traces: Vec<GateTrace> = Vec::new();
    let mut warnings = Vec::new();
    for p in &paths {
        match load_trace(p) {
            Ok(t) => traces.push(t),
            Err(e) => warnings.push(format!("skipping {}: {e}", p.display())),
        }
    }
    // Traces of different shapes cannot share a heatmap; keep the first shape.
    if let Some(first) = traces.first().map(|t| (t.num_layers, t.m)) {
        let before = traces.len();
        traces.retain(|t| (t.num_layers, t.m) == first);
        if traces.len() < before {
            warnings.push(format!(
                "skipping {} traces whose layer/head count differs from the first",
                before - traces.len()
            ));
        }
    }
    if traces.is_empty() {
        bail!("no traces found in {}", dir.display());
    }
    fs::create_dir_all(out)?;
    let report = UsageReport::from_traces(&traces)?;
    let grid = per_head_usage(&traces)?;
    fs::write(out.join("heatmap.csv"), grid.to_csv())?;
    fs::write(out.join("sorted_curve.csv"), sorted_curve_csv(&sorted_usage_curve(&grid)))?;
    fs::write(out.join("gaps.csv"), gaps_csv(&report.gaps))?;
    let token_traces: Vec<TokenTrace> = traces
        .iter()
        .filter_map(|t| {
            let tokens = t.tokens.as_ref()?;
            let mut tt = token_trace_export(&t.per_token_usage(), tokens).ok()?;
            tt.task = t.task.clone();
            tt.sample_id = t.sample_id;
            Some(tt)
        })
        .collect();
    write_json(&out.join("token_traces.json"), &token_traces)?;
    write_json(&out.join("usage_report.json"), &report)?;
    let summary = AnalyzeSummary {
        traces: traces.len(),
        skipped: paths.len() - traces.len(),
        warnings,
        mu_f: report.mu_f_overall,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Process exit code for an error: 2 configuration, 4 divergence, 3 otherwise.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        match cause.downcast_ref::<aha_core::Error>() {
            Some(aha_core::Error::Config(_)) => return 2,
            Some(aha_core::Error::Diverged { .. }) => return 4,
            _ => {}
        }
    }
    3
}
