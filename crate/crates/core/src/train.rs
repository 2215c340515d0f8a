//! Training loop, evaluation metrics and resource benchmarking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{huber, Tape};
use crate::data::{self, DataError, NormStats, SampleWindow, SplitRatios, TrafficSeries, WindowSplits};
use crate::exec::{self, Parallelism};
use crate::model::{Model, ModelConfig, RowLayout, WindowInput};
use crate::params::{Adam, AdamConfig, Checkpoint, CheckpointError, MilestoneSchedule};
use crate::tensor::TensorError;
use crate::tokenizer::Folding;
use crate::visibility::{self, MaskStrategy, VisibilityError, VisibilityPlan};

/// Entries whose ground truth is below this magnitude are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;

/// Windows per inference pass in [`evaluate`].
pub const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Visibility(#[from] VisibilityError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("{0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub batch_size: usize,
    /// Windows per forward/backward pass; a batch is split into passes
    /// that may run concurrently.
    pub micro_batch: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub patience: usize,
    pub huber_delta: f64,
    pub mask_ratio: f64,
    pub subgraph_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub folding: Folding,
    pub mask_strategy: MaskStrategy,
    pub split: SplitRatios,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile("pems04").unwrap()
    }
}

impl TrainConfig {
    pub const PROFILES: [&'static str; 3] = ["pems04", "pems08", "seattle"];

    /// Published hyperparameters for each dataset.
    pub fn profile(name: &str) -> Option<Self> {
        let (embed_dim, subgraph_size, milestone) = match name {
            "pems04" => (64, 50, 55),
            "pems08" => (32, 30, 65),
            "seattle" => (64, 50, 55),
            _ => return None,
        };
        Some(Self {
            input_len: 24,
            horizon: 24,
            embed_dim,
            ffn_dim: 1024,
            heads: 4,
            layers: 1,
            batch_size: 16,
            micro_batch: 8,
            lr: 1e-4,
            milestones: vec![milestone],
            decay: 0.1,
            patience: 10,
            huber_delta: 1.0,
            mask_ratio: 0.2,
            subgraph_size,
            seed: 0,
            max_epochs: 200,
            folding: Folding::Temporal,
            mask_strategy: MaskStrategy::NodeLevel,
            split: SplitRatios::default(),
            parallelism: Parallelism::default(),
        })
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (k, v) in [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("micro_batch", self.micro_batch),
            ("subgraph_size", self.subgraph_size),
        ] {
            if v == 0 {
                return Err(format!("{k} must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr {} must be positive", self.lr));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(format!("decay {} must be positive", self.decay));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(format!("huber_delta {} must be positive", self.huber_delta));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(format!("mask_ratio {} must be in [0, 1)", self.mask_ratio));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("milestones {:?} must be strictly ascending", self.milestones));
        }
        if !(4 * self.embed_dim).is_multiple_of(self.heads) {
            return Err(format!(
                "heads ({}) must divide 4 * embed_dim ({})",
                self.heads,
                4 * self.embed_dim
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, series: &TrafficSeries) -> ModelConfig {
        ModelConfig {
            nodes: series.nodes(),
            input_len: self.input_len,
            horizon: self.horizon,
            frequency: series.frequency(),
            embed_dim: self.embed_dim,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            layers: self.layers,
            folding: self.folding,
        }
    }

    /// Subgraph size actually used on a graph of `nodes` nodes.
    pub fn effective_subgraph_size(&self, nodes: usize) -> usize {
        self.subgraph_size.min(nodes)
    }

    pub fn schedule(&self) -> MilestoneSchedule {
        MilestoneSchedule {
            base: self.lr,
            milestones: self.milestones.clone(),
            decay: self.decay,
        }
    }
}

/// A series with its normalizer and chronological window splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub raw: TrafficSeries,
    pub normalized: TrafficSeries,
    pub stats: NormStats,
    pub splits: WindowSplits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

impl Dataset {
    /// Windows the series and fits the z-score on the rows the training
    /// windows cover.
    pub fn prepare(raw: TrafficSeries, input_len: usize, horizon: usize, split: SplitRatios) -> Result<Self> {
        let splits = data::make_windows(&raw, input_len, horizon, split)?;
        if splits.train.is_empty() {
            return Err(TrainError::Empty("no training windows".into()));
        }
        let stats = data::fit_normalizer_rows(&raw, splits.train_rows())?;
        Ok(Self::with_stats(raw, stats, splits))
    }

    /// Uses externally supplied statistics (e.g. from a checkpoint).
    pub fn with_stats(raw: TrafficSeries, stats: NormStats, splits: WindowSplits) -> Self {
        let normalized = data::apply_zscore(&raw, &stats);
        Self {
            raw,
            normalized,
            stats,
            splits,
        }
    }

    pub fn windows(&self, split: Split) -> &[SampleWindow] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }
}

/// Errors in original signal units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MetricSums {
    se: f64,
    ae: f64,
    ape: f64,
    count: usize,
    ape_count: usize,
}

impl MetricSums {
    pub fn push(&mut self, truth: f64, pred: f64) {
        let e = pred - truth;
        self.se += e * e;
        self.ae += e.abs();
        self.count += 1;
        if truth.abs() >= MAPE_FLOOR {
            self.ape += (e / truth).abs();
            self.ape_count += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            rmse: (self.se / n).sqrt(),
            mae: self.ae / n,
            mape: if self.ape_count == 0 {
                0.0
            } else {
                100.0 * self.ape / self.ape_count as f64
            },
        }
    }
}

/// RMSE, MAE and MAPE of `pred` against `truth`.
pub fn compute_metrics(truth: &[f64], pred: &[f64]) -> Metrics {
    assert_eq!(truth.len(), pred.len());
    let mut s = MetricSums::default();
    for (&t, &p) in truth.iter().zip(pred) {
        s.push(t, p);
    }
    s.finish()
}

/// Mean Huber loss over entries whose mask is `true` (all when `None`).
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64, mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != target.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(TensorError::ShapeMismatch {
            op: "huber_loss",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        }
        .into());
    }
    if delta <= 0.0 {
        return Err(TrainError::Config(format!("huber delta {delta} must be positive")));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask.is_none_or(|m| m[i]) {
            total += huber(pred[i] - target[i], delta);
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::Empty("every loss entry is excluded".into()));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// One entry per forecast step.
    pub per_horizon: Vec<Metrics>,
    pub samples: usize,
}

/// Inference-mode metrics over `windows`: full graph, no masking,
/// predictions de-normalized before comparison with the raw series.
pub fn evaluate(model: &Model, data: &Dataset, windows: &[SampleWindow], par: Parallelism) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(TrainError::Empty("no windows to evaluate".into()));
    }
    let chunks: Vec<&[SampleWindow]> = windows.chunks(EVAL_CHUNK).collect();
    let preds = exec::map(&chunks, par, |chunk| {
        let inputs: Vec<Vec<f64>> = chunk.iter().map(|w| w.input(&data.normalized)).collect();
        let batch: Vec<WindowInput<'_>> = chunk
            .iter()
            .zip(&inputs)
            .map(|(w, input)| WindowInput {
                input,
                tod_index: w.tod_index,
                dow_index: w.dow_index,
            })
            .collect();
        model.predict_batch(&batch)
    });
    let mut flat = Vec::with_capacity(windows.len());
    for p in preds {
        flat.extend(p?.into_iter().map(|v| data::invert_zscore(&v, &data.stats)));
    }
    let horizon = model.config.horizon;
    let mut overall = MetricSums::default();
    let mut steps = vec![MetricSums::default(); horizon];
    for (w, pred) in windows.iter().zip(flat) {
        let truth = w.target(&data.raw);
        for (i, (&t, &p)) in truth.iter().zip(&pred).enumerate() {
            overall.push(t, p);
            steps[i % horizon].push(t, p);
        }
    }
    Ok(EvalReport {
        metrics: overall.finish(),
        per_horizon: steps.iter().map(MetricSums::finish).collect(),
        samples: windows.len(),
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Metrics>,
    pub epoch_seconds: f64,
    pub tokens_processed: usize,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_rmse,val_mae,val_mape,epoch_seconds,tokens_processed";

impl EpochLog {
    /// CSV row. Wall time is left blank unless `wall_time` is set, which
    /// keeps logs of identical runs byte-identical.
    pub fn csv_row(&self, wall_time: bool) -> String {
        let mut s = format!("{},{},{}", self.epoch, self.lr, self.train_loss);
        match self.val {
            Some(m) => write!(s, ",{},{},{}", m.rmse, m.mae, m.mape).unwrap(),
            None => s.push_str(",,,"),
        }
        if wall_time {
            write!(s, ",{:.6}", self.epoch_seconds).unwrap();
        } else {
            s.push(',');
        }
        write!(s, ",{}", self.tokens_processed).unwrap();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub tokens: usize,
    pub seconds: f64,
}

struct SampleJob<'w> {
    window: &'w SampleWindow,
    plan: Option<VisibilityPlan>,
}

struct PassGrad {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

/// Optimizer state for one run.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model,
    data: &'d Dataset,
    adam: Adam,
    rng: ChaCha8Rng,
    subgraph_size: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        config.validate().map_err(TrainError::Config)?;
        let mcfg = config.model_config(&data.raw);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(mcfg, rng.random()).map_err(TrainError::Config)?;
        let subgraph_size = config.effective_subgraph_size(mcfg.nodes);
        Ok(Self {
            config,
            model,
            data,
            adam: Adam::new(),
            rng,
            subgraph_size,
        })
    }

    pub fn subgraph_size(&self) -> usize {
        self.subgraph_size
    }

    fn plan(&mut self) -> Result<Option<VisibilityPlan>> {
        if self.config.folding != Folding::Temporal {
            return Ok(None);
        }
        let seed = self.rng.random();
        Ok(Some(visibility::plan_with_strategy(
            self.model.config.nodes,
            self.config.mask_ratio,
            self.subgraph_size,
            seed,
            self.config.mask_strategy,
        )?))
    }

    /// One pass over the shuffled training windows.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let started = Instant::now();
        let adam_cfg = AdamConfig {
            lr: self.config.schedule().lr_at(epoch),
            ..AdamConfig::default()
        };
        let mut order: Vec<&SampleWindow> = self.data.splits.train.iter().collect();
        order.shuffle(&mut self.rng);
        let (nodes, horizon) = (self.model.config.nodes, self.model.config.horizon);
        let mut loss_total = 0.0;
        let mut batches = 0;
        let mut tokens = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut jobs = Vec::with_capacity(chunk.len());
            for &window in chunk {
                jobs.push(SampleJob {
                    window,
                    plan: self.plan()?,
                });
            }
            let included: usize = jobs
                .iter()
                .map(|j| match &j.plan {
                    Some(p) => p.slots.iter().flatten().count() * horizon,
                    None => nodes * horizon,
                })
                .sum();
            tokens += jobs
                .iter()
                .map(|j| j.plan.as_ref().map_or(self.model.config.embedding_spec().token_count(), |p| p.token_count()))
                .sum::<usize>();
            let scale = 1.0 / included as f64;
            let (model, data, delta) = (&self.model, self.data, self.config.huber_delta);
            let passes: Vec<&[SampleJob<'_>]> = jobs.chunks(self.config.micro_batch).collect();
            let results = exec::map(&passes, self.config.parallelism, |pass| {
                pass_gradient(model, data, pass, delta, scale)
            });
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let r = r.map_err(|e| match e {
                    TrainError::Divergence { detail, .. } => TrainError::Divergence {
                        epoch,
                        batch: b,
                        detail,
                    },
                    other => other,
                })?;
                batch_loss += r.loss;
                match grads.as_mut() {
                    None => grads = Some(r.grads),
                    Some(acc) => {
                        for (acc, g) in acc.iter_mut().zip(&r.grads) {
                            for (a, x) in acc.iter_mut().zip(g) {
                                *a += x;
                            }
                        }
                    }
                }
            }
            let grads = grads.expect("non-empty batch");
            if !batch_loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss {batch_loss}"),
                });
            }
            self.adam.step(&mut self.model.params, &grads, &adam_cfg)?;
            loss_total += batch_loss;
            batches += 1;
        }
        Ok(EpochStats {
            train_loss: loss_total / batches.max(1) as f64,
            tokens,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

fn pass_gradient(model: &Model, data: &Dataset, jobs: &[SampleJob<'_>], delta: f64, scale: f64) -> Result<PassGrad> {
    let horizon = model.config.horizon;
    let inputs: Vec<Vec<f64>> = jobs.iter().map(|j| j.window.input(&data.normalized)).collect();
    let windows: Vec<WindowInput<'_>> = jobs
        .iter()
        .zip(&inputs)
        .map(|(j, input)| WindowInput {
            input,
            tod_index: j.window.tod_index,
            dow_index: j.window.dow_index,
        })
        .collect();
    let plans: Option<Vec<VisibilityPlan>> = jobs.iter().map(|j| j.plan.clone()).collect();
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape);
    let (pred, layouts) = model.forward_batch(&mut tape, &vars, &windows, plans.as_deref())?;
    let mut rows_target = Vec::with_capacity(tape.value(pred).len());
    let mut weight = Vec::with_capacity(tape.value(pred).len());
    for (job, layout) in jobs.iter().zip(&layouts) {
        let target = job.window.target(&data.normalized);
        match layout {
            RowLayout::Nodes => {
                weight.extend(std::iter::repeat_n(1.0, target.len()));
                rows_target.extend(target);
            }
            RowLayout::Slots(slots) => {
                for s in slots {
                    match *s {
                        Some(n) => {
                            rows_target.extend_from_slice(&target[n * horizon..(n + 1) * horizon]);
                            weight.extend(std::iter::repeat_n(1.0, horizon));
                        }
                        None => {
                            rows_target.extend(std::iter::repeat_n(0.0, horizon));
                            weight.extend(std::iter::repeat_n(0.0, horizon));
                        }
                    }
                }
            }
        }
    }
    let loss = tape.huber(pred, &rows_target, &weight, delta, scale)?;
    if let Some(op) = tape.first_nonfinite() {
        return Err(TrainError::Divergence {
            epoch: 0,
            batch: 0,
            detail: format!("non-finite values from {op}"),
        });
    }
    let mut grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).data()[0];
    let per_param = (0..vars.len())
        .map(|i| {
            grads
                .take(vars.get(i))
                .unwrap_or_else(|| vec![0.0; model.params.tensor(i).len()])
        })
        .collect();
    Ok(PassGrad {
        loss: loss_value,
        grads: per_param,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation MAE (the last
    /// epoch when there is no validation split).
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Trains with early stopping on validation MAE.
pub fn train(config: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let mut best = trainer.model.clone();
    let mut best_epoch = None;
    let mut best_val: Option<Metrics> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        let stats = trainer.train_epoch(epoch)?;
        let val = if data.splits.val.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, data, &data.splits.val, config.parallelism)?.metrics)
        };
        match val {
            Some(m) if best_val.is_none_or(|b| m.mae < b.mae) => {
                best_val = Some(m);
                best_epoch = Some(epoch);
                best = trainer.model.clone();
                since_best = 0;
            }
            Some(_) => since_best += 1,
            None => {
                best_epoch = Some(epoch);
                best = trainer.model.clone();
            }
        }
        let row = EpochLog {
            epoch,
            lr: config.schedule().lr_at(epoch),
            train_loss: stats.train_loss,
            val,
            epoch_seconds: stats.seconds,
            tokens_processed: stats.tokens,
        };
        on_epoch(&row);
        log.push(row);
        if val.is_some() && since_best >= config.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_val,
        log,
        stopped_early,
    })
}

/// Floats written to the tape by one forward pass (leaves and reshapes
/// excluded). `plan` is the training plan, `None` for inference.
pub fn activation_floats(cfg: &ModelConfig, plan: Option<&VisibilityPlan>) -> usize {
    let (d, dm, f, fh, h) = (cfg.embed_dim, cfg.hidden(), cfg.ffn_dim, cfg.head_hidden(), cfg.heads);
    let n_tokens = cfg.embedding_spec().token_count();
    // projection, bias, the three table lookups (the spatial slot is a
    // constant under snapshot folding) and the concatenation
    let lookups = if cfg.folding == Folding::Temporal { 5 } else { 4 };
    let mut total = lookups * n_tokens * d + n_tokens * dm;
    let (rows, groups, size) = match (cfg.folding, plan) {
        (Folding::Temporal, Some(p)) => {
            if !p.strategy.removes_nodes() && !p.masked.is_empty() {
                total += n_tokens * dm;
            }
            total += p.token_count() * dm;
            (p.token_count(), p.subgraph_count, p.subgraph_size)
        }
        _ => (n_tokens, 1, n_tokens),
    };
    total += cfg.layers * (23 * rows * dm + 3 * rows * f + 3 * groups * h * size * size);
    let out = match cfg.folding {
        Folding::Temporal => cfg.horizon,
        Folding::Spatial => cfg.nodes,
    };
    total += 3 * rows * fh + 2 * rows * out;
    if cfg.folding == Folding::Spatial {
        total += cfg.nodes * cfg.input_len + 2 * cfg.nodes * cfg.horizon;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub config_id: String,
    pub mask_ratio: f64,
    pub subgraph_size: usize,
    /// Tokens per sample, `N - M + p`.
    pub tokens: usize,
    pub params: usize,
    pub act_floats: usize,
    /// Fastest of the measured epochs.
    pub epoch_seconds: f64,
    /// `K * s^2`.
    pub attention_pairs: usize,
}

pub const BENCH_HEADER: &str = "config_id,r,s,tokens,params,act_floats,epoch_seconds";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6}",
            self.config_id,
            self.mask_ratio,
            self.subgraph_size,
            self.tokens,
            self.params,
            self.act_floats,
            self.epoch_seconds
        )
    }
}

/// Resource report for each `(mask_ratio, subgraph_size)` point: token and
/// parameter accounting plus the fastest of `epochs` timed training epochs.
pub fn bench(config: &TrainConfig, data: &Dataset, grid: &[(f64, usize)], epochs: usize) -> Result<Vec<BenchRow>> {
    let nodes = data.raw.nodes();
    let mut rows = Vec::with_capacity(grid.len());
    for (i, &(r, s)) in grid.iter().enumerate() {
        if s == 0 || s > nodes {
            return Err(TrainError::Config(format!("subgraph size {s} must be in 1..={nodes}")));
        }
        let cfg = TrainConfig {
            mask_ratio: r,
            subgraph_size: s,
            ..config.clone()
        };
        let mut trainer = Trainer::new(cfg, data)?;
        let plan = visibility::plan_with_strategy(nodes, r, s, 0, config.mask_strategy)?;
        let mcfg = trainer.model.config;
        let mut fastest = f64::INFINITY;
        for e in 0..epochs.max(1) {
            fastest = fastest.min(trainer.train_epoch(e)?.seconds);
        }
        let plan_ref = (mcfg.folding == Folding::Temporal).then_some(&plan);
        rows.push(BenchRow {
            config_id: format!("c{i}"),
            mask_ratio: r,
            subgraph_size: s,
            tokens: plan_ref.map_or(mcfg.embedding_spec().token_count(), |p| p.token_count()),
            params: trainer.model.params.count(),
            act_floats: activation_floats(&mcfg, plan_ref),
            epoch_seconds: fastest,
            attention_pairs: plan_ref.map_or(
                mcfg.embedding_spec().token_count().pow(2),
                VisibilityPlan::attention_pairs,
            ),
        });
    }
    Ok(rows)
}

/// Peak resident set size in KiB, where the platform reports it.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Packs parameters, architecture and normalizer into a checkpoint.
/// `extra` entries are stored alongside (e.g. the resolved run config).
pub fn model_checkpoint(model: &Model, stats: &NormStats, extra: BTreeMap<String, String>) -> Checkpoint {
    let c = &model.config;
    let mut meta = extra;
    for (k, v) in [
        ("model.nodes", c.nodes.to_string()),
        ("model.input_len", c.input_len.to_string()),
        ("model.horizon", c.horizon.to_string()),
        ("model.frequency", c.frequency.to_string()),
        ("model.embed_dim", c.embed_dim.to_string()),
        ("model.ffn_dim", c.ffn_dim.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.layers", c.layers.to_string()),
        ("model.folding", c.folding.as_str().to_string()),
        ("norm.mean", stats.mean.to_string()),
        ("norm.std", stats.std.to_string()),
    ] {
        meta.insert(k.to_string(), v);
    }
    Checkpoint {
        meta,
        params: model.params.clone(),
    }
}

/// Rebuilds the model and normalizer stored by [`model_checkpoint`].
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> std::result::Result<(Model, NormStats), CheckpointError> {
    fn field<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> std::result::Result<T, CheckpointError> {
        let raw = ckpt
            .meta
            .get(key)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing metadata {key}")))?;
        raw.parse()
            .map_err(|_| CheckpointError::Corrupt(format!("bad metadata {key}={raw:?}")))
    }
    let config = ModelConfig {
        nodes: field(ckpt, "model.nodes")?,
        input_len: field(ckpt, "model.input_len")?,
        horizon: field(ckpt, "model.horizon")?,
        frequency: field(ckpt, "model.frequency")?,
        embed_dim: field(ckpt, "model.embed_dim")?,
        ffn_dim: field(ckpt, "model.ffn_dim")?,
        heads: field(ckpt, "model.heads")?,
        layers: field(ckpt, "model.layers")?,
        folding: field(ckpt, "model.folding")?,
    };
    let stats = NormStats {
        mean: field(ckpt, "norm.mean")?,
        std: field(ckpt, "norm.std")?,
    };
    let model = Model::from_params(config, ckpt.params.clone()).map_err(CheckpointError::Manifest)?;
    Ok((model, stats))
}
