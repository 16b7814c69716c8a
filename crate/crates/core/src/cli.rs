//! Command-line front end: `gen-data`, `train`, `eval` and `ablate`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::data::{
    generate, generate_detections, load_checkpoint, load_detections, relation_histogram,
    save_checkpoint, save_detections, Dataset, DetectionRecord, GeneratorConfig,
};
use crate::evaluation::{
    evaluate, per_relation_report, tail_comparison_table, tail_mean_r50, MetricsReport, Mode,
    TailRow, Task,
};
use crate::training::{ablate, fit, TrainConfig, VariantResult, DEFAULT_TASKS, VARIANTS};

pub const CONFIG_FILE: &str = "config.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

#[derive(Debug, Parser)]
#[command(
    name = "sgkt",
    version,
    about = "Long-tail scene-graph relation classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tail dataset.
    GenData(GenArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate the BL, +SO, +KT, +FC ladder over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// JSON config file with flat keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ToggleFlags {
    #[arg(long)]
    pub no_so: bool,
    #[arg(long)]
    pub no_kt: bool,
    #[arg(long)]
    pub no_fc: bool,
    #[arg(long)]
    pub no_bias: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub toggles: ToggleFlags,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Predcls,
    Sgcls,
    Sgdet,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Constrained,
    Unconstrained,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportArg {
    Recall,
    Tail,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    /// Detections file for sgdet; defaults to the one in the data directory.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "recall")]
    pub report: ReportArg,
    /// Number of least frequent relations in the tail report.
    #[arg(long, default_value_t = 10)]
    pub bottom: usize,
    /// Second checkpoint shown beside the first in the tail report.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_bias: bool,
    /// Also score sgdet from the data directory's detections file.
    #[arg(long)]
    pub with_sgdet: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Layers defaults, the config file, `--set` pairs and explicit flags, in that order.
pub fn resolve_config<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    sets: &[String],
    flags: &[(&str, Value)],
) -> Result<T> {
    let mut map = match serde_json::to_value(T::default())? {
        Value::Object(m) => m,
        _ => bail!("config must serialise to an object"),
    };
    if let Some(path) = file {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let Value::Object(fm) = v else {
            bail!("{}: config must be a JSON object", path.display());
        };
        merge(&mut map, fm);
    }
    let mut set_map = Map::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("`--set {s}`: expected KEY=VALUE"))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_map.insert(k.trim().to_string(), value);
    }
    merge(&mut map, set_map);
    for (k, v) in flags {
        map.insert(k.to_string(), v.clone());
    }
    serde_json::from_value(Value::Object(map)).context("invalid configuration")
}

fn merge(into: &mut Map<String, Value>, from: Map<String, Value>) {
    for (k, v) in from {
        into.insert(k, v);
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
    }
}

fn gen_data(a: GenArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(s) = a.seed {
        flags.push(("seed", Value::from(s)));
    }
    let cfg: GeneratorConfig =
        resolve_config(a.overrides.config.as_deref(), &a.overrides.set, &flags)?;
    cfg.validate()?;
    let ds = generate(&cfg)?;
    create_dir(&a.out)?;
    ds.save(&a.out)?;
    let dets = generate_detections(&ds.test, &ds.meta, cfg.seed);
    save_detections(&dets, &a.out.join(DETECTIONS_FILE))?;
    let train_hist = ds.train_relation_counts();
    let test_hist = relation_histogram(&ds.test, ds.meta.n_relations);
    let n_train: u64 = train_hist.iter().sum();
    let n_test: u64 = test_hist.iter().sum();
    let stats = serde_json::json!({
        "train_scenes": ds.train.len(),
        "test_scenes": ds.test.len(),
        "train_triples": n_train,
        "test_triples": n_test,
        "triples": n_train + n_test,
        "train_relation_histogram": train_hist,
        "test_relation_histogram": test_hist,
    });
    write_json(&a.out.join(STATS_FILE), &stats)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    writeln!(
        out,
        "wrote {} train / {} test scenes ({} triples) to {}",
        ds.train.len(),
        ds.test.len(),
        n_train + n_test,
        a.out.display()
    )?;
    Ok(())
}

fn train_flags(
    seed: Option<u64>,
    epochs: Option<usize>,
    t: &ToggleFlags,
) -> Vec<(&'static str, Value)> {
    let mut flags = Vec::new();
    if let Some(s) = seed {
        flags.push(("seed", Value::from(s)));
    }
    if let Some(e) = epochs {
        flags.push(("epochs", Value::from(e)));
    }
    for (on, key) in [
        (t.no_so, "so"),
        (t.no_kt, "kt"),
        (t.no_fc, "fc"),
        (t.no_bias, "bias"),
    ] {
        if on {
            flags.push((key, Value::Bool(false)));
        }
    }
    flags
}

fn load_data_detections(dir: &Path, ds: &Dataset) -> Result<Option<Vec<DetectionRecord>>> {
    let path = dir.join(DETECTIONS_FILE);
    if path.exists() {
        Ok(Some(load_detections(&path, &ds.meta)?))
    } else {
        Ok(None)
    }
}

fn default_tasks(dets: &Option<Vec<DetectionRecord>>) -> Vec<Task> {
    let mut t = DEFAULT_TASKS.to_vec();
    if dets.is_some() {
        t.push(Task::SgDet);
    }
    t
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg: TrainConfig = resolve_config(
        a.overrides.config.as_deref(),
        &a.overrides.set,
        &train_flags(a.seed, a.epochs, &a.toggles),
    )?;
    cfg.validate()?;
    let ds = Dataset::load(&a.data)?;
    let dets = load_data_detections(&a.data, &ds)?;
    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    let log_path = a.out.join(LOG_FILE);
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log_err = None;
    let result = fit(&ds, &cfg, |e| {
        let line = serde_json::to_string(e).expect("log entries serialise");
        if let Err(err) = writeln!(log, "{line}") {
            log_err.get_or_insert(err);
        }
        let _ = writeln!(
            out,
            "epoch {:>3}  loss {:.4}  pair acc {:.3}  object acc {:.3}",
            e.epoch, e.loss_total, e.train_pair_accuracy, e.train_object_accuracy
        );
    });
    if let Some(err) = log_err {
        return Err(err).context("writing training log");
    }
    let run_config = serde_json::to_value(&cfg)?;
    let model = match result {
        Ok((m, _)) => m,
        Err(crate::training::TrainError::Diverged {
            epoch,
            source,
            last_good,
        }) => {
            let path = a.out.join("last_good.ckpt");
            save_checkpoint(&path, &last_good, &run_config)?;
            bail!(
                "training diverged in epoch {epoch}: {source}; last good parameters saved to {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &model, &run_config)?;
    let report = evaluate(&model, &ds.test, &default_tasks(&dets), dets.as_deref())?;
    write_report(&a.out, &report)?;
    write!(out, "{}", report.to_table())?;
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_json(&dir.join(METRICS_JSON), report)?;
    fs::write(dir.join(METRICS_TXT), report.to_table()).context("writing metrics table")
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let m = &model.config;
    if (m.n_object_classes, m.n_relations, m.d_v)
        != (ds.meta.n_object_classes, ds.meta.n_relations, ds.meta.d_v)
    {
        bail!(
            "checkpoint was trained for {} classes / {} relations / d_v {}, dataset has {} / {} / {}",
            m.n_object_classes,
            m.n_relations,
            m.d_v,
            ds.meta.n_object_classes,
            ds.meta.n_relations,
            ds.meta.d_v
        );
    }
    let dets = match &a.detections {
        Some(p) => Some(load_detections(p, &ds.meta)?),
        None => load_data_detections(&a.data, &ds)?,
    };
    let tasks = match a.task {
        TaskArg::Predcls => vec![Task::PredCls],
        TaskArg::Sgcls => vec![Task::SgCls],
        TaskArg::Sgdet => {
            if dets.is_none() {
                bail!(
                    "--task sgdet needs --detections (no {DETECTIONS_FILE} in the data directory)"
                );
            }
            vec![Task::SgDet]
        }
        TaskArg::All => default_tasks(&dets),
    };
    create_dir(&a.out)?;
    let mut report = evaluate(&model, &ds.test, &tasks, dets.as_deref())?;
    // Tail tables are always unconstrained, so the filter only shapes recall reports.
    if a.mode != ModeArg::Both && a.report == ReportArg::Recall {
        let keep = if a.mode == ModeArg::Constrained {
            Mode::Constrained
        } else {
            Mode::Unconstrained
        };
        for t in &mut report.tasks {
            t.modes.retain(|m| m.mode == keep);
        }
    }
    match a.report {
        ReportArg::Recall => {
            write_report(&a.out, &report)?;
            write!(out, "{}", report.to_table())?;
        }
        ReportArg::Tail => {
            let task = tasks[0];
            let counts = ds.train_relation_counts();
            let rows = per_relation_report(&report, task, &counts, a.bottom);
            let (table, json) = match &a.baseline {
                Some(p) => {
                    let (base, _) = load_checkpoint(p)?;
                    let base_report = evaluate(&base, &ds.test, &[task], dets.as_deref())?;
                    let base_rows = per_relation_report(&base_report, task, &counts, a.bottom);
                    (
                        tail_comparison_table(&base_rows, &rows, ("baseline", "model")),
                        serde_json::json!({"task": task, "baseline": base_rows, "model": rows}),
                    )
                }
                None => (
                    tail_comparison_table(&rows, &rows, ("model", "model")),
                    serde_json::json!({"task": task, "model": rows}),
                ),
            };
            write_json(&a.out.join("tail.json"), &json)?;
            fs::write(a.out.join("tail.txt"), &table).context("writing tail table")?;
            write!(out, "{table}")?;
        }
    }
    Ok(())
}

/// Per-variant summary across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_recall: f64,
    pub spread: f64,
    pub per_seed: Vec<f64>,
    pub tail_r50: Vec<Option<f64>>,
}

fn mean_and_spread(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Bottom-`n` tail rows (unconstrained, PredCls) for one variant result.
pub fn tail_rows(r: &VariantResult, train_counts: &[u64], n: usize) -> Vec<TailRow> {
    per_relation_report(&r.report, Task::PredCls, train_counts, n)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<13} {:>8} {:>8}  per seed\n",
        "variant", "mean", "spread"
    );
    for r in rows {
        let seeds: Vec<String> = r
            .per_seed
            .iter()
            .map(|x| format!("{:.2}", 100.0 * x))
            .collect();
        s += &format!(
            "{:<13} {:>8.2} {:>8.2}  {}\n",
            r.variant,
            100.0 * r.mean_recall,
            100.0 * r.spread,
            seeds.join(" ")
        );
    }
    s
}

fn ablate_cmd(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    if a.seeds < 1 {
        bail!("--seeds must be at least 1");
    }
    let mut flags = Vec::new();
    if let Some(e) = a.epochs {
        flags.push(("epochs", Value::from(e)));
    }
    if a.no_bias {
        flags.push(("bias", Value::Bool(false)));
    }
    let base: TrainConfig =
        resolve_config(a.overrides.config.as_deref(), &a.overrides.set, &flags)?;
    base.validate()?;
    let ds = Dataset::load(&a.data)?;
    let dets = if a.with_sgdet {
        let d = load_data_detections(&a.data, &ds)?;
        if d.is_none() {
            bail!("--with-sgdet needs {DETECTIONS_FILE} in the data directory");
        }
        d
    } else {
        None
    };
    let tasks = default_tasks(&dets);
    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &base)?;
    let counts = ds.train_relation_counts();
    let mut results: Vec<Vec<VariantResult>> = Vec::new();
    for k in 0..a.seeds as u64 {
        let cfg = TrainConfig {
            seed: base.seed + k,
            ..base.clone()
        };
        let res = ablate(&ds, &cfg, &tasks, dets.as_deref())?;
        for r in &res {
            writeln!(
                out,
                "seed {} {:<13} mean recall {:.2}",
                cfg.seed,
                r.variant,
                100.0 * r.report.mean_recall
            )?;
        }
        results.push(res);
    }
    let rows: Vec<AblationRow> = VARIANTS
        .iter()
        .enumerate()
        .map(|(vi, (name, _))| {
            let per_seed: Vec<f64> = results.iter().map(|r| r[vi].report.mean_recall).collect();
            let (mean, spread) = mean_and_spread(&per_seed);
            AblationRow {
                variant: name.to_string(),
                mean_recall: mean,
                spread,
                tail_r50: results
                    .iter()
                    .map(|r| tail_mean_r50(&tail_rows(&r[vi], &counts, 10)))
                    .collect(),
                per_seed,
            }
        })
        .collect();
    write_json(
        &a.out.join("ablation.json"),
        &serde_json::json!({"rows": rows, "runs": results}),
    )?;
    let table = ablation_table(&rows);
    fs::write(a.out.join("ablation.txt"), &table).context("writing ablation table")?;
    write!(out, "{table}")?;
    Ok(())
}
