//! Shared helpers: central finite differences and small fixtures.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfgcast::autograd::{Tape, Var};
use tfgcast::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `||a - n|| / (||a|| + ||n||)`, falling back to the absolute error when
/// both gradients vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / (norm(a) + norm(n)).max(1e-8)
}

/// Compares the gradient of `sum(w * f(inputs))` for random weights `w`
/// with central differences. Returns the worst relative error over the
/// inputs.
pub fn check_gradients<F>(inputs: &[Tensor], rng: &mut impl Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars);
    let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = tape.backward_with_seed(out, &weights).unwrap();

    let objective = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).data().iter().zip(&weights).map(|(v, w)| v * w).sum()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = numeric_gradient(inputs, i, &objective);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Central-difference gradient of `objective` with respect to `inputs[i]`.
pub fn numeric_gradient(inputs: &[Tensor], i: usize, objective: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let mut xs = inputs.to_vec();
    (0..inputs[i].len())
        .map(|j| {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = objective(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = objective(&xs);
            xs[i].data_mut()[j] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

use tfgcast::model::{self, EncoderLayerVars, Model, ModelConfig, RowLayout};
use tfgcast::params::ParamVars;
use tfgcast::tokenizer::{self, EmbeddingTables, Folding};
use tfgcast::visibility::{self, VisibilityPlan};

/// One randomized gradient check: returns the worst relative error.
pub type GradCase = fn(&mut ChaCha8Rng) -> f64;

fn dims(rng: &mut impl Rng) -> usize {
    rng.random_range(1..=4)
}

fn layer_tensors(width: usize, ffn: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let mut gamma = random_tensor(&[width], rng);
    for g in gamma.data_mut() {
        *g += 1.0;
    }
    vec![
        gamma.clone(),
        random_tensor(&[width], rng),
        random_tensor(&[width, 3 * width], rng),
        random_tensor(&[3 * width], rng),
        random_tensor(&[width, width], rng),
        random_tensor(&[width], rng),
        gamma,
        random_tensor(&[width], rng),
        random_tensor(&[width, ffn], rng),
        random_tensor(&[ffn], rng),
        random_tensor(&[ffn, width], rng),
        random_tensor(&[width], rng),
    ]
}

pub fn bind_layer(v: &[Var]) -> EncoderLayerVars {
    EncoderLayerVars {
        ln1_gamma: v[0],
        ln1_beta: v[1],
        qkv: v[2],
        qkv_bias: v[3],
        wo: v[4],
        wo_bias: v[5],
        ln2_gamma: v[6],
        ln2_beta: v[7],
        ffn0: v[8],
        ffn0_bias: v[9],
        ffn1: v[10],
        ffn1_bias: v[11],
    }
}

pub fn grad_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (dims(rng), dims(rng), dims(rng));
            let a = random_tensor(&[m, k], rng);
            let b = random_tensor(&[k, n], rng);
            check_gradients(&[a, b], rng, |t, v| t.matmul(v[0], v[1]).unwrap())
        }),
        ("matmul_folded", |rng| {
            let (g, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng));
            let a = random_tensor(&[g, m, k], rng);
            let b = random_tensor(&[k, n], rng);
            check_gradients(&[a, b], rng, |t, v| t.matmul(v[0], v[1]).unwrap())
        }),
        ("matmul_broadcast", |rng| {
            let (g, h, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng), dims(rng));
            let a = random_tensor(&[g, 1, m, k], rng);
            let b = random_tensor(&[h, k, n], rng);
            check_gradients(&[a, b], rng, |t, v| t.matmul(v[0], v[1]).unwrap())
        }),
        ("add", |rng| {
            let (r, c) = (dims(rng), dims(rng));
            let a = random_tensor(&[r, c], rng);
            let b = random_tensor(&[r, c], rng);
            check_gradients(&[a, b], rng, |t, v| t.add(v[0], v[1]).unwrap())
        }),
        ("add_bias", |rng| {
            let (r, c) = (dims(rng), dims(rng));
            let a = random_tensor(&[2, r, c], rng);
            let b = random_tensor(&[c], rng);
            check_gradients(&[a, b], rng, |t, v| t.add(v[0], v[1]).unwrap())
        }),
        ("mul", |rng| {
            let (r, c) = (dims(rng), dims(rng));
            let a = random_tensor(&[r, c], rng);
            let b = random_tensor(&[r, c], rng);
            check_gradients(&[a, b], rng, |t, v| t.mul(v[0], v[1]).unwrap())
        }),
        ("scale", |rng| {
            let a = random_tensor(&[dims(rng), dims(rng)], rng);
            let f = rng.random_range(-2.0..2.0);
            check_gradients(&[a], rng, move |t, v| t.scale(v[0], f))
        }),
        ("gelu", |rng| {
            let mut a = random_tensor(&[dims(rng), dims(rng)], rng);
            for x in a.data_mut() {
                *x *= 3.0;
            }
            check_gradients(&[a], rng, |t, v| t.gelu(v[0]))
        }),
        ("softmax", |rng| {
            let mut a = random_tensor(&[dims(rng), dims(rng), dims(rng) + 1], rng);
            for x in a.data_mut() {
                *x *= 3.0;
            }
            check_gradients(&[a], rng, |t, v| t.softmax(v[0]))
        }),
        ("layer_norm", |rng| {
            let (r, c) = (dims(rng), dims(rng) + 2);
            let x = random_tensor(&[r, c], rng);
            let g = random_tensor(&[c], rng);
            let b = random_tensor(&[c], rng);
            check_gradients(&[x, g, b], rng, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())
        }),
        ("concat", |rng| {
            let r = dims(rng);
            let a = random_tensor(&[r, dims(rng)], rng);
            let b = random_tensor(&[r, dims(rng)], rng);
            let c = random_tensor(&[r, dims(rng)], rng);
            check_gradients(&[a, b, c], rng, |t, v| t.concat(v).unwrap())
        }),
        ("gather_rows", |rng| {
            let rows = dims(rng) + 1;
            let a = random_tensor(&[rows, dims(rng)], rng);
            let picks = vec![Some(0), None, Some(rows - 1), Some(0), Some(rows / 2)];
            check_gradients(&[a], rng, move |t, v| t.gather_rows(v[0], &picks).unwrap())
        }),
        ("reshape", |rng| {
            let (r, c) = (dims(rng), dims(rng));
            let a = random_tensor(&[r, c, 2], rng);
            check_gradients(&[a], rng, move |t, v| t.reshape(v[0], &[2 * c, r]).unwrap())
        }),
        ("permute", |rng| {
            let a = random_tensor(&[dims(rng), dims(rng), dims(rng), 2], rng);
            check_gradients(&[a], rng, |t, v| t.permute(v[0], &[2, 0, 3, 1]).unwrap())
        }),
        ("transpose_last2", |rng| {
            let a = random_tensor(&[dims(rng), dims(rng), dims(rng)], rng);
            check_gradients(&[a], rng, |t, v| t.transpose_last2(v[0]).unwrap())
        }),
        ("slice_outer", |rng| {
            let a = random_tensor(&[3, dims(rng), dims(rng)], rng);
            check_gradients(&[a], rng, |t, v| t.slice_outer(v[0], 1).unwrap())
        }),
        ("mask_fill", |rng| {
            let a = random_tensor(&[dims(rng), dims(rng)], rng);
            let keep: Vec<f64> = (0..a.len()).map(|i| (i % 2) as f64).collect();
            let fill: Vec<f64> = (0..a.len()).map(|i| i as f64 * 0.1).collect();
            check_gradients(&[a], rng, move |t, v| t.mask_fill(v[0], keep.clone(), &fill).unwrap())
        }),
        ("huber", |rng| {
            let n = 8;
            let delta = rng.random_range(0.5..2.0);
            // residuals on both sides of the knee, near it and exactly at it
            let offsets = [0.1, -0.3, 2.5, -3.0, 1.0 + 1e-3, -(1.0 - 1e-3), 1.0, -1.0];
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pred: Vec<f64> = target.iter().zip(offsets).map(|(t, o)| t + o * delta).collect();
            let weight: Vec<f64> = (0..n).map(|i| if i == 3 { 0.0 } else { 1.0 }).collect();
            let p = Tensor::new(&[n], pred).unwrap();
            check_gradients(&[p], rng, move |t, v| t.huber(v[0], &target, &weight, delta, 0.5).unwrap())
        }),
        ("sum", |rng| {
            let a = random_tensor(&[dims(rng), dims(rng)], rng);
            check_gradients(&[a], rng, |t, v| t.sum(v[0]))
        }),
        ("msa", |rng| {
            let (g, s, heads) = (dims(rng), dims(rng), 2);
            let width = 4;
            let mut inputs = vec![random_tensor(&[g, s, width], rng)];
            inputs.extend(layer_tensors(width, 6, rng));
            check_gradients(&inputs, rng, move |t, v| {
                model::msa(t, v[0], &bind_layer(&v[1..]), heads).unwrap().0
            })
        }),
        ("encoder_layer", |rng| {
            let (g, s, heads) = (dims(rng), dims(rng), 2);
            let width = 4;
            let mut inputs = vec![random_tensor(&[g, s, width], rng)];
            inputs.extend(layer_tensors(width, 6, rng));
            check_gradients(&inputs, rng, move |t, v| {
                model::encoder_layer(t, v[0], &bind_layer(&v[1..]), heads).unwrap()
            })
        }),
        ("fuse_embeddings", |rng| {
            let (n, steps, d, freq) = (dims(rng), dims(rng), 2, 4);
            let inputs = vec![
                random_tensor(&[n, steps], rng),
                random_tensor(&[steps, d], rng),
                random_tensor(&[d], rng),
                random_tensor(&[n, d], rng),
                random_tensor(&[freq, d], rng),
                random_tensor(&[7, d], rng),
            ];
            let (tod, dow) = (rng.random_range(0..freq), rng.random_range(0..7));
            check_gradients(&inputs, rng, move |t, v| {
                let tables = EmbeddingTables {
                    wx: v[1],
                    wx_bias: v[2],
                    spatial: Some(v[3]),
                    tod: v[4],
                    dow: v[5],
                };
                tokenizer::fuse_embeddings(t, v[0], &tables, tod, dow).unwrap()
            })
        }),
        ("apply_visibility", |rng| {
            let n = dims(rng) + 3;
            let plan = visibility::plan_visibility(n, 0.3, 2, rng.random()).unwrap();
            let fused = random_tensor(&[n, 3], rng);
            check_gradients(&[fused], rng, move |t, v| visibility::apply_visibility(t, v[0], &plan).unwrap())
        }),
        ("prediction_head", |rng| {
            let (rows, width, hidden, out) = (dims(rng), 4, 5, 2);
            let inputs = vec![
                random_tensor(&[1, rows, width], rng),
                random_tensor(&[width, hidden], rng),
                random_tensor(&[hidden], rng),
                random_tensor(&[hidden, out], rng),
                random_tensor(&[out], rng),
            ];
            check_gradients(&inputs, rng, |t, v| model::prediction_head(t, v[0], v[1], v[2], v[3], v[4]).unwrap())
        }),
    ]
}

/// The toy architecture used by end-to-end checks.
pub fn toy_config(folding: Folding) -> ModelConfig {
    ModelConfig {
        nodes: 4,
        input_len: 3,
        horizon: 2,
        frequency: 4,
        embed_dim: 4,
        ffn_dim: 8,
        heads: 2,
        layers: 1,
        folding,
    }
}

/// Huber loss of the toy model on one random window, optionally under a
/// training plan. Parameters are taken from `model`.
pub fn toy_loss(
    model: &Model,
    tape: &mut Tape,
    frozen: bool,
    input: &[f64],
    target: &[f64],
    plan: Option<&VisibilityPlan>,
) -> (Var, ParamVars) {
    let vars = if frozen {
        model.params.register_frozen(tape)
    } else {
        model.params.register(tape)
    };
    let mode = match plan {
        Some(p) => model::Mode::Train(p),
        None => model::Mode::Inference,
    };
    let (pred, layout) = model.forward(tape, &vars, input, 1, 2, mode).unwrap();
    let h = model.config.horizon;
    let (t, w): (Vec<f64>, Vec<f64>) = match layout {
        RowLayout::Nodes => (target.to_vec(), vec![1.0; target.len()]),
        RowLayout::Slots(slots) => slots
            .iter()
            .flat_map(|s| match *s {
                Some(n) => (0..h).map(|j| (target[n * h + j], 1.0)).collect::<Vec<_>>(),
                None => vec![(0.0, 0.0); h],
            })
            .unzip(),
    };
    let n = t.len() as f64;
    (tape.huber(pred, &t, &w, 1.0, 1.0 / n).unwrap(), vars)
}

/// Worst relative error between backprop and central differences over
/// every parameter tensor of the toy model.
pub fn toy_model_gradient_error(seed: u64, folding: Folding, plan_ratio: Option<f64>) -> f64 {
    let cfg = toy_config(folding);
    let mut rng = rng(seed);
    let model = Model::new(cfg, seed).unwrap();
    let input: Vec<f64> = (0..cfg.nodes * cfg.input_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..cfg.nodes * cfg.horizon).map(|_| rng.random_range(-2.0..2.0)).collect();
    let plan = plan_ratio.map(|r| visibility::plan_visibility(cfg.nodes, r, 2, seed).unwrap());

    let mut tape = Tape::new();
    let (loss, vars) = toy_loss(&model, &mut tape, false, &input, &target, plan.as_ref());
    let mut grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = (0..model.params.len())
        .map(|i| {
            grads
                .take(vars.get(i))
                .unwrap_or_else(|| vec![0.0; model.params.tensor(i).len()])
        })
        .collect();

    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let mut probe = model.clone();
        let numeric: Vec<f64> = (0..model.params.tensor(i).len())
            .map(|j| {
                let orig = model.params.tensor(i).data()[j];
                let mut eval = |x: f64| {
                    probe.params.tensor_mut(i).data_mut()[j] = x;
                    let mut t = Tape::new();
                    let (l, _) = toy_loss(&probe, &mut t, true, &input, &target, plan.as_ref());
                    t.value(l).data()[0]
                };
                let up = eval(orig + FD_STEP);
                let down = eval(orig - FD_STEP);
                probe.params.tensor_mut(i).data_mut()[j] = orig;
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}
