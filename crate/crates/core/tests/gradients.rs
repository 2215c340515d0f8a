mod common;

use common::{bind_layer, grad_cases, random_tensor, rng, toy_model_gradient_error};
use rand::Rng;
use tfgcast::autograd::{gelu, Tape};
use tfgcast::model;
use tfgcast::tokenizer::Folding;

const TRIALS: u64 = 100;

#[test]
fn every_op_matches_finite_differences() {
    for (name, case) in grad_cases() {
        let mut worst = 0.0f64;
        for trial in 0..TRIALS {
            let mut r = rng(1000 + trial);
            worst = worst.max(case(&mut r));
        }
        assert!(worst < 1e-4, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn toy_model_matches_finite_differences() {
    for seed in 0..3 {
        let e = toy_model_gradient_error(seed, Folding::Temporal, Some(0.0));
        assert!(e < 1e-3, "full graph, seed {seed}: {e:e}");
        let e = toy_model_gradient_error(seed, Folding::Temporal, Some(0.5));
        assert!(e < 1e-3, "masked, seed {seed}: {e:e}");
        let e = toy_model_gradient_error(seed, Folding::Spatial, None);
        assert!(e < 1e-3, "snapshot folding, seed {seed}: {e:e}");
    }
}

/// Attention written as explicit loops over groups, heads and positions.
fn attention_by_loops(z: &[f64], g: usize, s: usize, dm: usize, heads: usize, p: &[Vec<f64>]) -> Vec<f64> {
    let (wqkv, bqkv, wo, bo) = (&p[2], &p[3], &p[4], &p[5]);
    let dh = dm / heads;
    let mut out = vec![0.0; g * s * dm];
    for gi in 0..g {
        let row = |i: usize| &z[(gi * s + i) * dm..(gi * s + i + 1) * dm];
        // projections: [s][3*dm]
        let proj: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                (0..3 * dm)
                    .map(|c| bqkv[c] + (0..dm).map(|k| row(i)[k] * wqkv[k * 3 * dm + c]).sum::<f64>())
                    .collect()
            })
            .collect();
        let mut merged = vec![vec![0.0; dm]; s];
        for h in 0..heads {
            let q = |i: usize, j: usize| proj[i][h * dh + j];
            let k = |i: usize, j: usize| proj[i][dm + h * dh + j];
            let v = |i: usize, j: usize| proj[i][2 * dm + h * dh + j];
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|t| (0..dh).map(|j| q(i, j) * k(t, j)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                for j in 0..dh {
                    merged[i][h * dh + j] = (0..s).map(|t| exp[t] / total * v(t, j)).sum();
                }
            }
        }
        for i in 0..s {
            for c in 0..dm {
                out[(gi * s + i) * dm + c] = bo[c] + (0..dm).map(|k| merged[i][k] * wo[k * dm + c]).sum::<f64>();
            }
        }
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (g, s, heads) = (r.random_range(1..4), r.random_range(1..6), 2);
        let dm = 2 * r.random_range(1..4);
        let z = random_tensor(&[g, s, dm], &mut r);
        let params = [random_tensor(&[dm], &mut r),
            random_tensor(&[dm], &mut r),
            random_tensor(&[dm, 3 * dm], &mut r),
            random_tensor(&[3 * dm], &mut r),
            random_tensor(&[dm, dm], &mut r),
            random_tensor(&[dm], &mut r)];
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let mut vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
        // layer-norm and FFN slots are unused by attention
        while vars.len() < 12 {
            vars.push(vars[0]);
        }
        let (out, attn) = model::msa(&mut tape, zv, &bind_layer(&vars), heads).unwrap();
        let raw: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
        let oracle = attention_by_loops(z.data(), g, s, dm, heads, &raw);
        let got = tape.value(out).data();
        let dev = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-10, "seed {seed}: deviation {dev:e}");
        for row in tape.value(attn).data().chunks(s) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn gelu_knee_free_and_smooth() {
    for i in -50..=50 {
        let x = i as f64 / 10.0;
        let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
        assert!((fd - tfgcast::autograd::gelu_grad(x)).abs() < 1e-6);
    }
}
