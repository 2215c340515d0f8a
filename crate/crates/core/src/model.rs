//! Pre-LN Transformer encoder and MLP prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::params::{init_uniform, ParamStore, ParamVars};
use crate::tensor::{Result, Tensor, TensorError};
use crate::tokenizer::{self, EmbeddingSpec, EmbeddingTables, Folding};
use crate::visibility::{self, VisibilityPlan};

pub const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub frequency: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub folding: Folding,
}

impl ModelConfig {
    /// Encoder width, `4d`.
    pub fn hidden(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.hidden() / self.heads
    }

    /// Hidden width of the prediction head; equal to the FFN width.
    pub fn head_hidden(&self) -> usize {
        self.ffn_dim
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("nodes", self.nodes),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("frequency", self.frequency),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("layers", self.layers),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{k} must be positive"));
        }
        if !self.hidden().is_multiple_of(self.heads) {
            return Err(format!(
                "heads ({}) must divide the hidden width 4 * embed_dim ({})",
                self.heads,
                self.hidden()
            ));
        }
        Ok(())
    }

    pub fn embedding_spec(&self) -> EmbeddingSpec {
        EmbeddingSpec {
            nodes: self.nodes,
            input_len: self.input_len,
            frequency: self.frequency,
            dim: self.embed_dim,
            folding: self.folding,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv: usize,
    qkv_b: usize,
    wo: usize,
    wo_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    ffn0: usize,
    ffn0_b: usize,
    ffn1: usize,
    ffn1_b: usize,
}

/// One encoder layer's parameters bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv: Var,
    pub qkv_bias: Var,
    pub wo: Var,
    pub wo_bias: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ffn0: Var,
    pub ffn0_bias: Var,
    pub ffn1: Var,
    pub ffn1_bias: Var,
}

impl LayerIdx {
    fn bind(&self, v: &ParamVars) -> EncoderLayerVars {
        EncoderLayerVars {
            ln1_gamma: v.get(self.ln1_g),
            ln1_beta: v.get(self.ln1_b),
            qkv: v.get(self.qkv),
            qkv_bias: v.get(self.qkv_b),
            wo: v.get(self.wo),
            wo_bias: v.get(self.wo_b),
            ln2_gamma: v.get(self.ln2_g),
            ln2_beta: v.get(self.ln2_b),
            ffn0: v.get(self.ffn0),
            ffn0_bias: v.get(self.ffn0_b),
            ffn1: v.get(self.ffn1),
            ffn1_bias: v.get(self.ffn1_b),
        }
    }
}

/// How forward rows map back to nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum RowLayout {
    /// Row `n` is node `n`.
    Nodes,
    /// Row `i` is slot `i` of a visibility plan.
    Slots(Vec<Option<usize>>),
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Inference,
    Train(&'a VisibilityPlan),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Vec<LayerIdx>,
}

impl Model {
    /// Fresh parameters: uniform(+-1/sqrt(fan_in)) projections, N(0, 0.02)
    /// embedding tables, unit layer-norm scales.
    pub fn new(config: ModelConfig, seed: u64) -> std::result::Result<Self, String> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        config.embedding_spec().init(&mut store, &mut rng);
        let (dm, f) = (config.hidden(), config.ffn_dim);
        for l in 0..config.layers {
            let p = |s: &str| format!("enc.{l}.{s}");
            store.insert(p("ln1.gamma"), Tensor::full(&[dm], 1.0));
            store.insert(p("ln1.beta"), Tensor::zeros(&[dm]));
            store.insert(p("qkv"), init_uniform(&[dm, 3 * dm], dm, &mut rng));
            store.insert(p("qkv.bias"), init_uniform(&[3 * dm], dm, &mut rng));
            store.insert(p("wo"), init_uniform(&[dm, dm], dm, &mut rng));
            store.insert(p("wo.bias"), init_uniform(&[dm], dm, &mut rng));
            store.insert(p("ln2.gamma"), Tensor::full(&[dm], 1.0));
            store.insert(p("ln2.beta"), Tensor::zeros(&[dm]));
            store.insert(p("ffn.0"), init_uniform(&[dm, f], dm, &mut rng));
            store.insert(p("ffn.0.bias"), init_uniform(&[f], dm, &mut rng));
            store.insert(p("ffn.1"), init_uniform(&[f, dm], f, &mut rng));
            store.insert(p("ffn.1.bias"), init_uniform(&[dm], f, &mut rng));
        }
        let fh = config.head_hidden();
        let out = match config.folding {
            Folding::Temporal => config.horizon,
            Folding::Spatial => config.nodes,
        };
        store.insert("head.0", init_uniform(&[dm, fh], dm, &mut rng));
        store.insert("head.0.bias", init_uniform(&[fh], dm, &mut rng));
        store.insert("head.1", init_uniform(&[fh, out], fh, &mut rng));
        store.insert("head.1.bias", init_uniform(&[out], fh, &mut rng));
        if config.folding == Folding::Spatial {
            let t = config.input_len;
            store.insert("sf.time", init_uniform(&[t, config.horizon], t, &mut rng));
            store.insert("sf.time.bias", init_uniform(&[config.horizon], t, &mut rng));
        }
        Self::from_params(config, store)
    }

    /// Wraps existing parameters, checking that every expected entry exists.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> std::result::Result<Self, String> {
        config.validate()?;
        let reference = if params.is_empty() {
            None
        } else {
            Some(Self::new_unchecked_manifest(config))
        };
        if let Some(expected) = reference {
            if expected != params.manifest() {
                return Err("parameter manifest does not match the model configuration".into());
            }
        }
        let idx = |name: String| {
            params
                .index_of(&name)
                .ok_or_else(|| format!("missing parameter {name}"))
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("enc.{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: idx(p("ln1.gamma"))?,
                ln1_b: idx(p("ln1.beta"))?,
                qkv: idx(p("qkv"))?,
                qkv_b: idx(p("qkv.bias"))?,
                wo: idx(p("wo"))?,
                wo_b: idx(p("wo.bias"))?,
                ln2_g: idx(p("ln2.gamma"))?,
                ln2_b: idx(p("ln2.beta"))?,
                ffn0: idx(p("ffn.0"))?,
                ffn0_b: idx(p("ffn.0.bias"))?,
                ffn1: idx(p("ffn.1"))?,
                ffn1_b: idx(p("ffn.1.bias"))?,
            });
        }
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    /// Expected manifest for `config`, without sampling initial values.
    fn new_unchecked_manifest(config: ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (dm, f, fh) = (config.hidden(), config.ffn_dim, config.head_hidden());
        let spec = config.embedding_spec();
        let (w, d) = (spec.token_width(), config.embed_dim);
        let mut m: Vec<(String, Vec<usize>)> = vec![
            (tokenizer::WX.into(), vec![w, d]),
            (tokenizer::WX_BIAS.into(), vec![d]),
        ];
        if config.folding == Folding::Temporal {
            m.push((tokenizer::SPATIAL.into(), vec![config.nodes, d]));
        }
        m.push((tokenizer::TOD.into(), vec![config.frequency, d]));
        m.push((tokenizer::DOW.into(), vec![7, d]));
        for l in 0..config.layers {
            for (s, shape) in [
                ("ln1.gamma", vec![dm]),
                ("ln1.beta", vec![dm]),
                ("qkv", vec![dm, 3 * dm]),
                ("qkv.bias", vec![3 * dm]),
                ("wo", vec![dm, dm]),
                ("wo.bias", vec![dm]),
                ("ln2.gamma", vec![dm]),
                ("ln2.beta", vec![dm]),
                ("ffn.0", vec![dm, f]),
                ("ffn.0.bias", vec![f]),
                ("ffn.1", vec![f, dm]),
                ("ffn.1.bias", vec![dm]),
            ] {
                m.push((format!("enc.{l}.{s}"), shape));
            }
        }
        let out = match config.folding {
            Folding::Temporal => config.horizon,
            Folding::Spatial => config.nodes,
        };
        m.push(("head.0".into(), vec![dm, fh]));
        m.push(("head.0.bias".into(), vec![fh]));
        m.push(("head.1".into(), vec![fh, out]));
        m.push(("head.1.bias".into(), vec![out]));
        if config.folding == Folding::Spatial {
            m.push(("sf.time".into(), vec![config.input_len, config.horizon]));
            m.push(("sf.time.bias".into(), vec![config.horizon]));
        }
        m
    }

    pub fn layer_vars(&self, vars: &ParamVars) -> Vec<EncoderLayerVars> {
        self.layers.iter().map(|l| l.bind(vars)).collect()
    }

    fn var(&self, vars: &ParamVars, name: &str) -> Var {
        vars.get(self.params.index_of(name).expect("parameter registered"))
    }

    /// Forecast for one window in normalized units.
    ///
    /// `input` is the node-major `N x T` window. Returns `[rows, T']` and how
    /// rows map to nodes: slot order under a training plan with temporal
    /// folding, node order otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        input: &[f64],
        tod_index: usize,
        dow_index: usize,
        mode: Mode<'_>,
    ) -> Result<(Var, RowLayout)> {
        let sample = WindowInput {
            input,
            tod_index,
            dow_index,
        };
        let (pred, mut layouts) = match mode {
            Mode::Inference => self.forward_batch(tape, vars, &[sample], None)?,
            Mode::Train(plan) => self.forward_batch(tape, vars, &[sample], Some(std::slice::from_ref(plan)))?,
        };
        Ok((pred, layouts.remove(0)))
    }

    /// Forward pass over several windows in one tape. `plans` (one per
    /// window) selects training mode. Returns the stacked `[rows, T']`
    /// predictions, window by window, and each window's row layout.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        windows: &[WindowInput<'_>],
        plans: Option<&[VisibilityPlan]>,
    ) -> Result<(Var, Vec<RowLayout>)> {
        let c = &self.config;
        let b = windows.len();
        if b == 0 || plans.is_some_and(|p| p.len() != b) {
            return Err(TensorError::Invalid {
                op: "forward",
                msg: format!("{b} windows for {} plans", plans.map_or(0, |p| p.len())),
            });
        }
        let tables = EmbeddingTables::bind(&self.params, vars).expect("embedding tables registered");
        let mut data = Vec::with_capacity(b * c.nodes * c.input_len);
        let mut shape = Vec::new();
        for w in windows {
            let t = match c.folding {
                Folding::Temporal => tokenizer::fold_temporal(w.input, c.nodes, c.input_len)?,
                Folding::Spatial => tokenizer::fold_spatial(w.input, c.nodes, c.input_len)?,
            };
            shape = t.shape().to_vec();
            data.extend_from_slice(t.data());
        }
        let per_window = shape[0];
        let tokens = tape.constant(Tensor::new(&[b * per_window, shape[1]], data)?);
        let calendar: Vec<(usize, usize)> = windows.iter().map(|w| (w.tod_index, w.dow_index)).collect();
        let fused = tokenizer::fuse_embeddings_batch(tape, tokens, &tables, &calendar)?;
        let width = c.hidden();

        let (z0, layouts) = match (c.folding, plans) {
            (Folding::Temporal, Some(plans)) => {
                let z = visibility::apply_visibility_batch(tape, fused, plans, c.embed_dim).map_err(|e| match e {
                    visibility::VisibilityError::Tensor(t) => t,
                    other => TensorError::Invalid {
                        op: "visibility",
                        msg: other.to_string(),
                    },
                })?;
                (z, plans.iter().map(|p| RowLayout::Slots(p.slots.clone())).collect())
            }
            _ => (
                tape.reshape(fused, &[b, per_window, width])?,
                vec![RowLayout::Nodes; b],
            ),
        };

        let mut z = z0;
        for layer in self.layer_vars(vars) {
            z = encoder_layer(tape, z, &layer, c.heads)?;
        }
        let pred = prediction_head(
            tape,
            z,
            self.var(vars, "head.0"),
            self.var(vars, "head.0.bias"),
            self.var(vars, "head.1"),
            self.var(vars, "head.1.bias"),
        )?;
        let shape = tape.value(pred).shape().to_vec();
        match c.folding {
            Folding::Temporal => Ok((tape.reshape(pred, &[shape[0] * shape[1], shape[2]])?, layouts)),
            Folding::Spatial => {
                // [B, T, N] -> [B, N, T] -> [B, N, T']
                let per_node = tape.transpose_last2(pred)?;
                let proj = tape.matmul(per_node, self.var(vars, "sf.time"))?;
                let out = tape.add(proj, self.var(vars, "sf.time.bias"))?;
                Ok((tape.reshape(out, &[b * c.nodes, c.horizon])?, layouts))
            }
        }
    }

    /// Inference forecast as a node-major `N x T'` vector (normalized units).
    pub fn predict(&self, input: &[f64], tod_index: usize, dow_index: usize) -> Result<Vec<f64>> {
        let mut out = self.predict_batch(&[WindowInput {
            input,
            tod_index,
            dow_index,
        }])?;
        Ok(out.remove(0))
    }

    /// [`Model::predict`] for several windows in one pass.
    pub fn predict_batch(&self, windows: &[WindowInput<'_>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let (pred, _) = self.forward_batch(&mut tape, &vars, windows, None)?;
        let per = self.config.nodes * self.config.horizon;
        Ok(tape.value(pred).data().chunks(per).map(<[f64]>::to_vec).collect())
    }
}

/// One window's model input.
#[derive(Debug, Clone, Copy)]
pub struct WindowInput<'a> {
    /// Node-major `N x T`.
    pub input: &'a [f64],
    pub tod_index: usize,
    pub dow_index: usize,
}

/// Multi-head self-attention within each group of `z: [G, s, D]`.
/// Returns the projected output `[G, s, D]` and the attention weights
/// `[G, h, s, s]`.
pub fn msa(tape: &mut Tape, z: Var, layer: &EncoderLayerVars, heads: usize) -> Result<(Var, Var)> {
    let shape = tape.value(z).shape().to_vec();
    let (g, s, dm) = (shape[0], shape[1], shape[2]);
    if dm % heads != 0 {
        return Err(TensorError::Invalid {
            op: "msa",
            msg: format!("{heads} heads do not divide width {dm}"),
        });
    }
    let dh = dm / heads;
    let qkv = tape.matmul(z, layer.qkv)?;
    let qkv = tape.add(qkv, layer.qkv_bias)?;
    let qkv = tape.reshape(qkv, &[g, s, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let q = tape.slice_outer(qkv, 0)?;
    let k = tape.slice_outer(qkv, 1)?;
    let v = tape.slice_outer(qkv, 2)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores);
    let heads_out = tape.matmul(attn, v)?;
    let merged = tape.permute(heads_out, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[g, s, dm])?;
    let out = tape.matmul(merged, layer.wo)?;
    Ok((tape.add(out, layer.wo_bias)?, attn))
}

/// `Z' = MSA(LN(Z)) + Z; Z_out = FFN(LN(Z')) + Z'`.
pub fn encoder_layer(tape: &mut Tape, z: Var, layer: &EncoderLayerVars, heads: usize) -> Result<Var> {
    let h = tape.layer_norm(z, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    let (attn_out, _) = msa(tape, h, layer, heads)?;
    let z1 = tape.add(z, attn_out)?;
    let h2 = tape.layer_norm(z1, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
    let f = tape.matmul(h2, layer.ffn0)?;
    let f = tape.add(f, layer.ffn0_bias)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, layer.ffn1)?;
    let f = tape.add(f, layer.ffn1_bias)?;
    tape.add(z1, f)
}

pub fn encoder_forward(tape: &mut Tape, z0: Var, layers: &[EncoderLayerVars], heads: usize) -> Result<Var> {
    if layers.is_empty() {
        return Err(TensorError::Invalid {
            op: "encoder",
            msg: "at least one layer required".into(),
        });
    }
    layers
        .iter()
        .try_fold(z0, |z, layer| encoder_layer(tape, z, layer, heads))
}

/// Two-layer GELU MLP applied per token.
pub fn prediction_head(tape: &mut Tape, z: Var, w0: Var, b0: Var, w1: Var, b1: Var) -> Result<Var> {
    let h = tape.matmul(z, w0)?;
    let h = tape.add(h, b0)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, w1)?;
    tape.add(y, b1)
}
