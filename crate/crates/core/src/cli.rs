//! Command-line entry points.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ConfigError, RunConfig};
use crate::data::{self, DataError, HistoricalAverage, SeriesFormat, TrafficSeries};
use crate::params::{Checkpoint, CheckpointError};
use crate::synth::{self, SynthConfig};
use crate::tokenizer::{self, Folding};
use crate::train::{self, Dataset, Metrics, Split, TrainError, MAPE_FLOOR};
use crate::visibility::MaskStrategy;

#[derive(Debug, Parser)]
#[command(name = "tfgcast", version, about = "Traffic forecasting with temporal folding and node visibility")]
pub struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint, log and resolved config.
    Train(DatasetArg),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Token, parameter, memory and timing report over a (r, s) grid.
    Bench {
        #[command(flatten)]
        dataset: DatasetArg,
        /// Mask ratios.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.5, 0.8])]
        ratios: Vec<f64>,
        /// Subgraph sizes (default: the configured size).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Timed epochs per grid point; the fastest is reported.
        #[arg(long, default_value_t = 1)]
        epochs: usize,
    },
    /// Train one model per value of an axis and compare them.
    Ablate {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        axis: Axis,
        /// Axis values (comma separated); defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
        /// Steps per day.
        #[arg(long, default_value_t = 48)]
        freq: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Output file (default: `<out>/synth.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write the binary format instead of text.
        #[arg(long)]
        binary: bool,
    },
    /// Export learned embedding tables as CSV.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file (default: `<out>/embeddings.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArg {
    /// Dataset file; overrides the `dataset` config key.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "mask_ratio")]
    MaskRatio,
    #[value(name = "subgraph_size")]
    SubgraphSize,
    #[value(name = "mask_strategy")]
    MaskStrategy,
    #[value(name = "folding")]
    Folding,
}

impl Axis {
    pub fn key(self) -> &'static str {
        match self {
            Axis::MaskRatio => "mask_ratio",
            Axis::SubgraphSize => "subgraph_size",
            Axis::MaskStrategy => "mask_strategy",
            Axis::Folding => "folding",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::MaskRatio => &["0", "0.2", "0.5", "0.8", "0.9"],
            Axis::SubgraphSize => &["10", "20", "30", "40", "50"],
            Axis::MaskStrategy => &["node_level", "all_zero", "partial_zero", "random_value"],
            Axis::Folding => &["tfg", "sf"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// Failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::visibility::VisibilityError> for CliError {
    fn from(e: crate::visibility::VisibilityError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

/// Resolves the configuration: file, then `--set`, then `--seed`/`--out`.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.set_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_path(cfg: &mut RunConfig, arg: &DatasetArg) -> CliResult<PathBuf> {
    if let Some(p) = &arg.dataset {
        cfg.dataset = Some(p.clone());
    }
    let path = cfg
        .dataset
        .clone()
        .ok_or_else(|| CliError::Config("no dataset given (use --dataset or the `dataset` key)".into()))?;
    if !path.is_file() {
        return Err(CliError::Config(format!("dataset {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_dataset(cfg: &RunConfig, path: &Path) -> CliResult<Dataset> {
    let raw = data::load_series(path, SeriesFormat::Auto)?;
    let t = &cfg.train;
    Ok(Dataset::prepare(raw, t.input_len, t.horizon, t.split)?)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label}: rmse {:.4} mae {:.4} mape {:.2}%", m.rmse, m.mae, m.mape);
}

/// Historical-average test metrics fit on the training windows.
pub fn historical_average_metrics(data: &Dataset) -> CliResult<Metrics> {
    let ha = HistoricalAverage::fit(&data.raw, &data.splits.train)?;
    let mut sums = train::MetricSums::default();
    for w in &data.splits.test {
        for (t, p) in w.target(&data.raw).iter().zip(ha.predict(&data.raw, w)) {
            sums.push(*t, p);
        }
    }
    if sums.count() == 0 {
        return Err(CliError::Data("no test windows".into()));
    }
    Ok(sums.finish())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth {
            nodes,
            days,
            freq,
            noise,
            output,
            binary,
        } => {
            let cfg = resolve_config(&cli)?;
            let synth_cfg = SynthConfig {
                nodes: *nodes,
                days: *days,
                frequency: *freq,
                noise: *noise,
                seed: cfg.train.seed,
                ..SynthConfig::default()
            };
            let series = synth::generate(&synth_cfg).map_err(|e| CliError::Config(e.to_string()))?;
            let path = match output {
                Some(p) => p.clone(),
                None => {
                    ensure_dir(&cfg.out_dir)?;
                    cfg.out_dir.join(if *binary { "synth.bin" } else { "synth.csv" })
                }
            };
            write_series(&series, &path, *binary)?;
            println!(
                "wrote {} ({} steps x {} nodes)",
                path.display(),
                series.steps(),
                series.nodes()
            );
            Ok(())
        }
        Command::Train(arg) => cmd_train(&cli, arg),
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => cmd_eval(&cli, checkpoint, dataset, *split),
        Command::Bench {
            dataset,
            ratios,
            sizes,
            epochs,
        } => cmd_bench(&cli, dataset, ratios, sizes, *epochs),
        Command::Ablate { dataset, axis, values } => cmd_ablate(&cli, dataset, *axis, values),
        Command::DumpEmbeddings { checkpoint, output } => {
            let cfg = resolve_config(&cli)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let path = match output {
                Some(p) => p.clone(),
                None => {
                    ensure_dir(&cfg.out_dir)?;
                    cfg.out_dir.join("embeddings.csv")
                }
            };
            let mut buf = Vec::new();
            tokenizer::dump_embeddings(&ckpt.params, &mut buf).map_err(|e| io_err(&path, e))?;
            fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn write_series(series: &TrafficSeries, path: &Path, binary: bool) -> CliResult<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let res = if binary {
        data::write_binary(series, &mut w)
    } else {
        data::write_text(series, &mut w)
    };
    res.and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn cmd_train(cli: &Cli, arg: &DatasetArg) -> CliResult<()> {
    let mut cfg = resolve_config(cli)?;
    let path = dataset_path(&mut cfg, arg)?;
    let data = load_dataset(&cfg, &path)?;
    ensure_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let wall = cfg.log_wall_time;
    let mut log = format!("{}\n", train::LOG_HEADER);
    let outcome = train::train(&cfg.train, &data, |row| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val mae {}",
            row.epoch,
            row.train_loss,
            row.val.map_or("-".to_string(), |m| format!("{:.4}", m.mae))
        );
        log.push_str(&row.csv_row(wall));
        log.push('\n');
    });
    // the log is kept even when training aborts
    write_file(&log_path, &log)?;
    let outcome = outcome?;
    let resolved = cfg.to_text();
    write_file(&cfg.out_dir.join("config.resolved"), &resolved)?;
    let mut meta = BTreeMap::new();
    meta.insert("run.config".to_string(), resolved);
    if let Some(e) = outcome.best_epoch {
        meta.insert("run.best_epoch".to_string(), e.to_string());
    }
    let ckpt_path = cfg.out_dir.join("checkpoint.tfgk");
    train::model_checkpoint(&outcome.model, &data.stats, meta).save(&ckpt_path)?;
    println!("checkpoint {}", ckpt_path.display());
    if let Some(m) = outcome.best_val {
        print_metrics("best val", &m);
    }
    if !data.splits.test.is_empty() {
        let test = train::evaluate(&outcome.model, &data, &data.splits.test, cfg.train.parallelism)?;
        print_metrics("test", &test.metrics);
        print_metrics("historical average test", &historical_average_metrics(&data)?);
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, arg: &DatasetArg, split: Split) -> CliResult<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, stats) = train::model_from_checkpoint(&ckpt)?;
    // settings come from the training run unless overridden here
    let mut cfg = match (&cli.config, ckpt.meta.get("run.config")) {
        (None, Some(text)) => RunConfig::from_text(text)?,
        _ => resolve_config(cli)?,
    };
    for kv in &cli.overrides {
        cfg.set_override(kv)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let path = dataset_path(&mut cfg, arg)?;
    let raw = data::load_series(&path, SeriesFormat::Auto)?;
    let c = model.config;
    if raw.nodes() != c.nodes || raw.frequency() != c.frequency {
        return Err(CliError::Data(format!(
            "dataset has {} nodes at {} steps/day, checkpoint expects {} at {}",
            raw.nodes(),
            raw.frequency(),
            c.nodes,
            c.frequency
        )));
    }
    let splits = data::make_windows(&raw, c.input_len, c.horizon, cfg.train.split)?;
    let data = Dataset::with_stats(raw, stats, splits);
    let report = train::evaluate(&model, &data, data.windows(split), cfg.train.parallelism)?;
    print_metrics(&format!("{split:?}").to_lowercase(), &report.metrics);
    println!("samples {}  (mape excludes |truth| < {MAPE_FLOOR})", report.samples);
    let mut csv = String::from("horizon,rmse,mae,mape,mape_floor\n");
    for (i, m) in report.per_horizon.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{},{MAPE_FLOOR}\n", i + 1, m.rmse, m.mae, m.mape));
    }
    let m = report.metrics;
    csv.push_str(&format!("all,{},{},{},{MAPE_FLOOR}\n", m.rmse, m.mae, m.mape));
    ensure_dir(&cfg.out_dir)?;
    let name = format!("eval_{}.csv", format!("{split:?}").to_lowercase());
    write_file(&cfg.out_dir.join(name), &csv)
}

fn cmd_bench(cli: &Cli, arg: &DatasetArg, ratios: &[f64], sizes: &[usize], epochs: usize) -> CliResult<()> {
    let mut cfg = resolve_config(cli)?;
    let path = dataset_path(&mut cfg, arg)?;
    let data = load_dataset(&cfg, &path)?;
    let nodes = data.raw.nodes();
    let sizes = if sizes.is_empty() {
        vec![cfg.train.effective_subgraph_size(nodes)]
    } else {
        sizes.to_vec()
    };
    let mut grid = Vec::new();
    for &s in &sizes {
        for &r in ratios {
            if !(0.0..1.0).contains(&r) {
                return Err(CliError::Config(format!("mask ratio {r} must be in [0, 1)")));
            }
            if s == 0 || s > nodes {
                return Err(CliError::Config(format!("subgraph size {s} must be in 1..={nodes}")));
            }
            grid.push((r, s));
        }
    }
    let rows = train::bench(&cfg.train, &data, &grid, epochs)?;
    let mut csv = format!("{}\n", train::BENCH_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    print!("{csv}");
    if let Some(kib) = train::peak_rss_kib() {
        eprintln!("peak resident memory {kib} KiB");
    }
    ensure_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("bench.csv"), &csv)
}

pub const ABLATE_HEADER: &str =
    "axis,value,test_rmse,test_mae,test_mape,best_epoch,epochs,tokens,params,act_floats,epoch_seconds,note";

fn cmd_ablate(cli: &Cli, arg: &DatasetArg, axis: Axis, values: &[String]) -> CliResult<()> {
    let mut cfg = resolve_config(cli)?;
    let path = dataset_path(&mut cfg, arg)?;
    let values = if values.is_empty() {
        axis.default_values()
    } else {
        values.to_vec()
    };
    // validate every value before training anything
    let mut variants = Vec::with_capacity(values.len());
    let mut probe = cfg.clone();
    for v in &values {
        probe.set(axis.key(), v)?;
        probe.validate()?;
        variants.push(probe.train.clone());
    }
    let data = load_dataset(&cfg, &path)?;
    let nodes = data.raw.nodes();
    let mut csv = format!("{ABLATE_HEADER}\n");
    for (value, tc) in values.iter().zip(&variants) {
        eprintln!("{} = {value}", axis.key());
        let outcome = train::train(tc, &data, |_| {})?;
        let test = train::evaluate(&outcome.model, &data, &data.splits.test, tc.parallelism)?.metrics;
        let mcfg = outcome.model.config;
        let s = tc.effective_subgraph_size(nodes);
        let (tokens, act) = match tc.folding {
            Folding::Temporal => {
                let plan = crate::visibility::plan_with_strategy(nodes, tc.mask_ratio, s, 0, tc.mask_strategy)?;
                (plan.token_count(), train::activation_floats(&mcfg, Some(&plan)))
            }
            Folding::Spatial => (tc.input_len, train::activation_floats(&mcfg, None)),
        };
        let seconds = outcome
            .log
            .iter()
            .map(|l| l.epoch_seconds)
            .fold(f64::INFINITY, f64::min);
        let mut notes = Vec::new();
        if tc.subgraph_size > nodes {
            notes.push(format!("subgraph size clamped to {nodes}"));
        }
        if tc.folding == Folding::Spatial {
            notes.push("snapshot tokens; visibility not applied".to_string());
        }
        if tc.mask_strategy != MaskStrategy::NodeLevel {
            notes.push("masked rows kept in place".to_string());
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{}\n",
            axis.key(),
            value,
            test.rmse,
            test.mae,
            test.mape,
            outcome.best_epoch.map_or(String::new(), |e| e.to_string()),
            outcome.log.len(),
            tokens,
            outcome.model.params.count(),
            act,
            seconds,
            notes.join("; ")
        ));
    }
    print!("{csv}");
    ensure_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(format!("ablate_{}.csv", axis.key())), &csv)
}
