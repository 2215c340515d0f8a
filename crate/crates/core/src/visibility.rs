//! Node-level masking and subgraph sampling, applied during training only.
//!
//! A plan removes `M = floor(r * N)` random nodes, pads the remaining
//! `N - M` with `p` zero tokens so they divide into `K` subgraphs of
//! exactly `s` slots, and assigns slots uniformly at random. Attention is
//! later confined to each subgraph.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::tensor::{self, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VisibilityError {
    #[error("mask ratio {0} must be in [0, 1)")]
    MaskRatio(f64),
    #[error("subgraph size {size} must be in 1..={nodes}")]
    SubgraphSize { size: usize, nodes: usize },
    #[error("plan covers {plan} nodes but the input has {input}")]
    NodeMismatch { plan: usize, input: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What happens to the nodes selected by the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MaskStrategy {
    /// Masked nodes are removed from the encoder input.
    #[default]
    NodeLevel,
    /// Masked nodes stay; their token projection is zeroed.
    AllZero,
    /// Masked nodes stay; half of their projection entries are zeroed.
    PartialZero,
    /// Masked nodes stay; their projection is replaced with N(0, 1) noise.
    RandomValue,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::NodeLevel,
        MaskStrategy::AllZero,
        MaskStrategy::PartialZero,
        MaskStrategy::RandomValue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::NodeLevel => "node_level",
            MaskStrategy::AllZero => "all_zero",
            MaskStrategy::PartialZero => "partial_zero",
            MaskStrategy::RandomValue => "random_value",
        }
    }

    pub fn removes_nodes(self) -> bool {
        self == MaskStrategy::NodeLevel
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown mask strategy {s:?} (expected node_level, all_zero, partial_zero or random_value)")
            })
    }
}

/// Number of nodes removed at ratio `r`. The small epsilon keeps decimal
/// ratios such as 0.29 * 100 from flooring one short.
pub fn masked_count(nodes: usize, ratio: f64) -> usize {
    ((ratio * nodes as f64) + 1e-9).floor() as usize
}

/// Zero tokens needed to divide `remaining` into groups of `size`.
pub fn padding_count(remaining: usize, size: usize) -> usize {
    (size - remaining % size) % size
}

/// Tokens the encoder processes per sample: `N - M + p`.
pub fn processed_tokens(nodes: usize, ratio: f64, size: usize) -> usize {
    let remaining = nodes - masked_count(nodes, ratio);
    remaining + padding_count(remaining, size)
}

/// The realized masking and partition for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityPlan {
    pub nodes: usize,
    pub mask_ratio: f64,
    pub strategy: MaskStrategy,
    /// Removed (or perturbed) node ids, ascending.
    pub masked: Vec<usize>,
    /// Remaining node ids, ascending.
    pub kept: Vec<usize>,
    pub subgraph_size: usize,
    pub pad_count: usize,
    pub subgraph_count: usize,
    /// Slot `i` belongs to subgraph `i / subgraph_size`; `None` is a pad.
    pub slots: Vec<Option<usize>>,
    pub rng_seed: u64,
}

/// Draws a plan with node-level masking.
pub fn plan_visibility(
    nodes: usize,
    ratio: f64,
    size: usize,
    seed: u64,
) -> Result<VisibilityPlan, VisibilityError> {
    plan_with_strategy(nodes, ratio, size, seed, MaskStrategy::NodeLevel)
}

/// Draws a plan. For the value-perturbing strategies every node keeps a
/// slot and only the masked set is recorded.
pub fn plan_with_strategy(
    nodes: usize,
    ratio: f64,
    size: usize,
    seed: u64,
    strategy: MaskStrategy,
) -> Result<VisibilityPlan, VisibilityError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(VisibilityError::MaskRatio(ratio));
    }
    if size < 1 || size > nodes {
        return Err(VisibilityError::SubgraphSize { size, nodes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = masked_count(nodes, ratio);
    let mut order: Vec<usize> = (0..nodes).collect();
    order.shuffle(&mut rng);
    let mut masked = order[..m].to_vec();
    let mut kept = order[m..].to_vec();
    masked.sort_unstable();
    kept.sort_unstable();

    let members: Vec<usize> = if strategy.removes_nodes() {
        kept.clone()
    } else {
        (0..nodes).collect()
    };
    let pad = padding_count(members.len(), size);
    let mut slots: Vec<Option<usize>> = members.iter().copied().map(Some).collect();
    slots.extend(std::iter::repeat_n(None, pad));
    slots.shuffle(&mut rng);
    // order within a subgraph carries no meaning; canonicalize it
    for group in slots.chunks_mut(size) {
        group.sort_unstable_by_key(|s| s.unwrap_or(usize::MAX));
    }
    let count = slots.len() / size;
    Ok(VisibilityPlan {
        nodes,
        mask_ratio: ratio,
        strategy,
        masked,
        kept,
        subgraph_size: size,
        pad_count: pad,
        subgraph_count: count,
        slots,
        rng_seed: seed,
    })
}

impl VisibilityPlan {
    /// The inference plan: every node, one subgraph, identity order.
    pub fn full(nodes: usize) -> Self {
        Self {
            nodes,
            mask_ratio: 0.0,
            strategy: MaskStrategy::NodeLevel,
            masked: Vec::new(),
            kept: (0..nodes).collect(),
            subgraph_size: nodes,
            pad_count: 0,
            subgraph_count: 1,
            slots: (0..nodes).map(Some).collect(),
            rng_seed: 0,
        }
    }

    pub fn token_count(&self) -> usize {
        self.slots.len()
    }

    /// Attention pairs evaluated: `K * s^2`.
    pub fn attention_pairs(&self) -> usize {
        self.subgraph_count * self.subgraph_size * self.subgraph_size
    }

    pub fn subgraph_of(&self, node: usize) -> Option<usize> {
        self.slots
            .iter()
            .position(|&s| s == Some(node))
            .map(|i| i / self.subgraph_size)
    }

    /// One flag per slot, grouped by subgraph; `true` marks padding.
    pub fn pad_mask(&self) -> Vec<Vec<bool>> {
        self.slots
            .chunks(self.subgraph_size)
            .map(|g| g.iter().map(Option::is_none).collect())
            .collect()
    }

    /// For each original node, the slot holding its prediction.
    pub fn node_slots(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.nodes];
        for (i, s) in self.slots.iter().enumerate() {
            if let Some(n) = *s {
                out[n] = Some(i);
            }
        }
        out
    }
}

/// Gathers a sample's fused `[N, 4d]` tokens into `[K, s, 4d]`, with zero
/// rows at pad slots and removed nodes absent.
pub fn apply_visibility(
    tape: &mut Tape,
    fused: Var,
    plan: &VisibilityPlan,
) -> Result<Var, VisibilityError> {
    let shape = tape.value(fused).shape().to_vec();
    if shape.len() != 2 || shape[0] != plan.nodes {
        return Err(VisibilityError::NodeMismatch {
            plan: plan.nodes,
            input: shape[0],
        });
    }
    let rows = tape.gather_rows(fused, &plan.slots)?;
    Ok(tape.reshape(rows, &[plan.subgraph_count, plan.subgraph_size, shape[1]])?)
}

/// Applies `plan` under its strategy. Removal uses [`apply_visibility`]; the
/// other strategies perturb the masked rows' first `dim` columns (the token
/// projection) and then partition all nodes.
pub fn masking_variant(
    tape: &mut Tape,
    fused: Var,
    plan: &VisibilityPlan,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<Var, VisibilityError> {
    if plan.strategy.removes_nodes() {
        return apply_visibility(tape, fused, plan);
    }
    let shape = tape.value(fused).shape().to_vec();
    if shape.len() != 2 || shape[0] != plan.nodes {
        return Err(VisibilityError::NodeMismatch {
            plan: plan.nodes,
            input: shape[0],
        });
    }
    let (keep, fill) = variant_masks(plan, shape[1], dim, rng);
    let perturbed = tape.mask_fill(fused, keep, &fill)?;
    apply_visibility(tape, perturbed, plan)
}

/// Keep and fill arrays (`N x width`) perturbing the masked rows.
fn variant_masks(plan: &VisibilityPlan, width: usize, dim: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let mut keep = vec![1.0; plan.nodes * width];
    let mut fill = vec![0.0; plan.nodes * width];
    for &n in &plan.masked {
        for j in 0..dim.min(width) {
            let i = n * width + j;
            match plan.strategy {
                MaskStrategy::AllZero => keep[i] = 0.0,
                MaskStrategy::PartialZero => {
                    if rng.random_bool(0.5) {
                        keep[i] = 0.0;
                    }
                }
                MaskStrategy::RandomValue => {
                    keep[i] = 0.0;
                    fill[i] = rng.sample(StandardNormal);
                }
                MaskStrategy::NodeLevel => {}
            }
        }
    }
    (keep, fill)
}

/// The generator a plan's value perturbations are drawn from.
pub fn variant_rng(plan: &VisibilityPlan) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(plan.rng_seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Applies one plan per window to fused tokens stacked as `[B*N, 4d]`,
/// giving `[B*K, s, 4d]`. Perturbations come from [`variant_rng`].
pub fn apply_visibility_batch(
    tape: &mut Tape,
    fused: Var,
    plans: &[VisibilityPlan],
    dim: usize,
) -> Result<Var, VisibilityError> {
    let shape = tape.value(fused).shape().to_vec();
    let first = plans.first().ok_or_else(|| TensorError::Invalid {
        op: "apply_visibility",
        msg: "no plans".into(),
    })?;
    let (nodes, size) = (first.nodes, first.subgraph_size);
    if shape.len() != 2 || shape[0] != nodes * plans.len() {
        return Err(VisibilityError::NodeMismatch {
            plan: nodes * plans.len(),
            input: shape[0],
        });
    }
    let width = shape[1];
    let mut src = fused;
    if plans.iter().any(|p| !p.strategy.removes_nodes() && !p.masked.is_empty()) {
        let mut keep = Vec::with_capacity(shape[0] * width);
        let mut fill = Vec::with_capacity(shape[0] * width);
        for p in plans {
            let (k, f) = variant_masks(p, width, dim, &mut variant_rng(p));
            keep.extend(k);
            fill.extend(f);
        }
        src = tape.mask_fill(fused, keep, &fill)?;
    }
    let mut rows = Vec::new();
    let mut groups = 0;
    for (b, p) in plans.iter().enumerate() {
        if p.nodes != nodes || p.subgraph_size != size {
            return Err(TensorError::Invalid {
                op: "apply_visibility",
                msg: "plans in one batch must share node count and subgraph size".into(),
            }
            .into());
        }
        rows.extend(p.slots.iter().map(|s| s.map(|n| b * nodes + n)));
        groups += p.subgraph_count;
    }
    let gathered = tape.gather_rows(src, &rows)?;
    Ok(tape.reshape(gathered, &[groups, size, width])?)
}

/// Predictions routed back to original node positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scattered {
    /// `N x T'`, node-major; rows of excluded nodes are zero.
    pub values: Vec<f64>,
    /// Per node: `true` if the node has a prediction and enters the loss.
    pub included: Vec<bool>,
}

impl Scattered {
    pub fn excluded_count(&self) -> usize {
        self.included.iter().filter(|&&i| !i).count()
    }
}

/// Routes per-slot predictions (`slots x T'`) to node order.
pub fn scatter_back(
    predictions: &[f64],
    plan: &VisibilityPlan,
    horizon: usize,
) -> Result<Scattered, VisibilityError> {
    if predictions.len() != plan.slots.len() * horizon {
        return Err(TensorError::ShapeMismatch {
            op: "scatter_back",
            lhs: vec![predictions.len()],
            rhs: vec![plan.slots.len(), horizon],
        }
        .into());
    }
    let mut values = vec![0.0; plan.nodes * horizon];
    let mut included = vec![false; plan.nodes];
    for (slot, s) in plan.slots.iter().enumerate() {
        if let Some(n) = *s {
            values[n * horizon..(n + 1) * horizon]
                .copy_from_slice(&predictions[slot * horizon..(slot + 1) * horizon]);
            included[n] = true;
        }
    }
    Ok(Scattered { values, included })
}

/// A batch of visible subgraphs stacked along the first axis.
#[derive(Debug, Clone)]
pub struct VisibleBatch {
    /// `(B*K) x s x 4d`.
    pub z0: tensor::Tensor,
    pub plans: Vec<VisibilityPlan>,
    pub pad_mask: Vec<Vec<bool>>,
}

/// Stacks the visible subgraphs of several samples; all plans must share
/// the subgraph size.
pub fn visible_batch(
    fused: &[tensor::Tensor],
    plans: Vec<VisibilityPlan>,
) -> Result<VisibleBatch, VisibilityError> {
    let mut tape = Tape::new();
    let mut data = Vec::new();
    let mut pad_mask = Vec::new();
    let mut subgraphs = 0;
    let mut inner: Option<(usize, usize)> = None;
    for (f, plan) in fused.iter().zip(&plans) {
        let v = tape.constant(f.clone());
        let z = apply_visibility(&mut tape, v, plan)?;
        let shape = tape.value(z).shape().to_vec();
        if *inner.get_or_insert((shape[1], shape[2])) != (shape[1], shape[2]) {
            return Err(TensorError::ShapeMismatch {
                op: "visible_batch",
                lhs: vec![inner.unwrap().0, inner.unwrap().1],
                rhs: shape[1..].to_vec(),
            }
            .into());
        }
        subgraphs += shape[0];
        data.extend_from_slice(tape.value(z).data());
        pad_mask.extend(plan.pad_mask());
    }
    let (s, w) = inner.ok_or_else(|| TensorError::Invalid {
        op: "visible_batch",
        msg: "empty batch".into(),
    })?;
    Ok(VisibleBatch {
        z0: tensor::Tensor::new(&[subgraphs, s, w], data)?,
        plans,
        pad_mask,
    })
}
