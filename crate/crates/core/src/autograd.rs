//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node indices are
//! therefore a topological order and [`Tape::backward`] walks them once in
//! reverse.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::tensor::{gemm, strides, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        // (a offset, b offset, out offset) per batch matrix
        blocks: Vec<(usize, usize, usize)>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Gelu {
        a: Var,
        /// Local derivative at each input.
        slope: Vec<f64>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gather {
        src: Var,
        rows: Vec<Option<usize>>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    SliceOuter {
        a: Var,
        index: usize,
    },
    MaskFill {
        a: Var,
        keep: Vec<f64>,
    },
    Huber {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        delta: f64,
        scale: f64,
    },
    Sum {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    first_nonfinite: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation that produced a NaN or infinity, when
    /// finiteness checking is on (debug builds).
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        self.first_nonfinite
    }

    /// Floats held by computed nodes. Inputs and reshapes are not counted
    /// because they own no new storage.
    pub fn computed_floats(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Reshape { .. }))
            .map(|n| n.value.len())
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.check_finite && self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds an input; gradients are tracked if the tensor asks for them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push("leaf", t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push("param", t.clone().with_requires_grad(true), Op::Leaf, true)
    }

    /// Matrix product over the last two axes. Leading (batch) axes
    /// broadcast numpy-style.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];

        let (out_shape, m_eff, blocks) = if batch_b.is_empty() {
            // fold every leading axis of `a` into the row dimension
            let rows: usize = batch_a.iter().product::<usize>() * m;
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (shape, rows, vec![(0, 0, 0)])
        } else {
            let rank = batch_a.len().max(batch_b.len());
            let pad = |s: &[usize]| {
                let mut v = vec![1; rank - s.len()];
                v.extend_from_slice(s);
                v
            };
            let (pa, pb) = (pad(batch_a), pad(batch_b));
            let mut batch = Vec::with_capacity(rank);
            for (&x, &y) in pa.iter().zip(&pb) {
                if x != y && x != 1 && y != 1 {
                    return Err(mismatch());
                }
                batch.push(x.max(y));
            }
            let (st_a, st_b) = (strides(&pa), strides(&pb));
            let count: usize = batch.iter().product();
            let mut blocks = Vec::with_capacity(count);
            let mut idx = vec![0usize; rank];
            for out_i in 0..count {
                let (mut ia, mut ib) = (0, 0);
                for ax in 0..rank {
                    if pa[ax] != 1 {
                        ia += idx[ax] * st_a[ax];
                    }
                    if pb[ax] != 1 {
                        ib += idx[ax] * st_b[ax];
                    }
                }
                blocks.push((ia * m * k, ib * k * n, out_i * m * n));
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if idx[ax] < batch[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            let mut shape = batch;
            shape.push(m);
            shape.push(n);
            (shape, m, blocks)
        };

        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for &(oa, ob, oc) in &blocks {
                gemm(
                    m_eff,
                    k,
                    n,
                    &da[oa..oa + m_eff * k],
                    false,
                    &db[ob..ob + k * n],
                    false,
                    &mut out[oc..oc + m_eff * n],
                    0.0,
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                m: m_eff,
                k,
                n,
                blocks,
            },
            rg,
        ))
    }

    /// Elementwise sum; `b` may also be a trailing-shape suffix of `a`
    /// (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bl = tb.len();
        let bd = tb.data();
        let out: Vec<f64> = ta
            .data()
            .chunks_exact(bl)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(sa, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push("add", value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push("mul", value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape(), out).unwrap();
        let rg = self.any_grad(&[a]);
        self.push("scale", value, Op::Scale { a, factor }, rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let rg = self.any_grad(&[a]);
        let (out, slope) = if rg {
            ta.data()
                .iter()
                .map(|&x| {
                    let cdf = normal_cdf(x);
                    (x * cdf, cdf + x * normal_pdf(x))
                })
                .unzip()
        } else {
            (ta.data().iter().map(|&x| gelu(x)).collect(), Vec::new())
        };
        let value = Tensor::new(ta.shape(), out).unwrap();
        self.push("gelu", value, Op::Gelu { a, slope }, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let width = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_exact_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(ta.shape(), out).unwrap();
        let rg = self.any_grad(&[a]);
        self.push("softmax", value, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let width = tx.last_dim();
        for p in [gamma, beta] {
            let tp = self.value(p);
            if tp.shape() != [width] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.outer_len();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks_exact(width).enumerate() {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            let base = r * width;
            for j in 0..width {
                let h = (row[j] - mean) * is;
                xhat[base + j] = h;
                out[base + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows (slices along axis 0) of `src`; `None` yields a zero row.
    pub fn gather_rows(&mut self, src: Var, rows: &[Option<usize>]) -> Result<Var> {
        let ts = self.value(src);
        let n = ts.shape()[0];
        let width = ts.len() / n;
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index".into(),
            });
        }
        let mut out = vec![0.0; rows.len() * width];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= n {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: r,
                        len: n,
                    });
                }
                out[i * width..(i + 1) * width]
                    .copy_from_slice(&ts.data()[r * width..(r + 1) * width]);
            }
        }
        let mut shape = ts.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[src]);
        Ok(self.push(
            "gather_rows",
            value,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push("reshape", value, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of rank {rank}"),
            });
        }
        let (shape, out) = permute_data(ta.data(), ta.shape(), axes);
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            "permute",
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: "rank < 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// `a[index]` along axis 0.
    pub fn slice_outer(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.shape()[0];
        if index >= n || ta.rank() < 2 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_outer",
                index,
                len: n,
            });
        }
        let width = ta.len() / n;
        let out = ta.data()[index * width..(index + 1) * width].to_vec();
        let value = Tensor::new(&ta.shape()[1..], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push("slice_outer", value, Op::SliceOuter { a, index }, rg))
    }

    /// `a * keep + fill` elementwise with constant `keep` and `fill`.
    pub fn mask_fill(&mut self, a: Var, keep: Vec<f64>, fill: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if keep.len() != ta.len() || fill.len() != ta.len() {
            return Err(TensorError::Invalid {
                op: "mask_fill",
                msg: format!("mask length {} for {} values", keep.len(), ta.len()),
            });
        }
        let out = ta
            .data()
            .iter()
            .zip(&keep)
            .zip(fill)
            .map(|((x, k), f)| x * k + f)
            .collect();
        let value = Tensor::new(ta.shape(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push("mask_fill", value, Op::MaskFill { a, keep }, rg))
    }

    /// `scale * sum_i weight_i * huber(pred_i - target_i)`.
    pub fn huber(
        &mut self,
        pred: Var,
        target: &[f64],
        weight: &[f64],
        delta: f64,
        scale: f64,
    ) -> Result<Var> {
        let tp = self.value(pred);
        if target.len() != tp.len() || weight.len() != tp.len() {
            return Err(TensorError::Invalid {
                op: "huber",
                msg: format!("target length {} for {} predictions", target.len(), tp.len()),
            });
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .filter(|(_, &w)| w != 0.0)
            .map(|((p, t), w)| w * huber(p - t, delta))
            .sum();
        let value = Tensor::scalar(scale * total);
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            "huber",
            value,
            Op::Huber {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
                delta,
                scale,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push("sum", Tensor::scalar(total), Op::Sum { a }, rg)
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("root must be a scalar, got shape {:?}", rt.shape()),
            });
        }
        self.backward_with_seed(root, &[1.0])
    }

    pub fn backward_with_seed(&self, root: Var, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.value(root).len() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.value(root).shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.to_vec());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                blocks,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    for &(oa, ob, oc) in blocks {
                        gemm(
                            m,
                            n,
                            k,
                            &g[oc..oc + m * n],
                            false,
                            &bv[ob..ob + k * n],
                            true,
                            &mut ga[oa..oa + m * k],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = grad_slot(&self.nodes, grads, *b) {
                    for &(oa, ob, oc) in blocks {
                        gemm(
                            k,
                            m,
                            n,
                            &av[oa..oa + m * k],
                            true,
                            &g[oc..oc + m * n],
                            false,
                            &mut gb[ob..ob + k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = grad_slot(&self.nodes, grads, *b) {
                    let bl = gb.len();
                    for chunk in g.chunks_exact(bl) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    for ((acc, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *acc += gi * bi;
                    }
                }
                if let Some(gb) = grad_slot(&self.nodes, grads, *b) {
                    for ((acc, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *acc += gi * ai;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    for (acc, gi) in ga.iter_mut().zip(g) {
                        *acc += gi * factor;
                    }
                }
            }
            Op::Gelu { a, slope } => {
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    for ((acc, gi), d) in ga.iter_mut().zip(g).zip(slope) {
                        *acc += gi * d;
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let width = node.value.last_dim();
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    for ((acc, gy), yy) in ga
                        .chunks_exact_mut(width)
                        .zip(g.chunks_exact(width))
                        .zip(y.chunks_exact(width))
                    {
                        let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                        for j in 0..width {
                            acc[j] += yy[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let width = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(gg) = grad_slot(&self.nodes, grads, *gamma) {
                    for (gy, xh) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                        for j in 0..width {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = grad_slot(&self.nodes, grads, *beta) {
                    for gy in g.chunks_exact(width) {
                        add_into(gb, gy);
                    }
                }
                if let Some(gx) = grad_slot(&self.nodes, grads, *x) {
                    let nf = width as f64;
                    let mut dxhat = vec![0.0; width];
                    for (r, (gy, xh)) in g
                        .chunks_exact(width)
                        .zip(xhat.chunks_exact(width))
                        .enumerate()
                    {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..width {
                            dxhat[j] = gy[j] * gam[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xh[j];
                        }
                        let is = inv_std[r];
                        let row = &mut gx[r * width..(r + 1) * width];
                        for j in 0..width {
                            row[j] += is / nf * (nf * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.outer_len();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = grad_slot(&self.nodes, grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { src, rows } => {
                let width = node.value.len() / rows.len();
                if let Some(gs) = grad_slot(&self.nodes, grads, *src) {
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            add_into(
                                &mut gs[r * width..(r + 1) * width],
                                &g[i * width..(i + 1) * width],
                            );
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Permute { a, axes } => {
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (_, back) = permute_data(g, node.value.shape(), &inverse);
                    add_into(ga, &back);
                }
            }
            Op::SliceOuter { a, index } => {
                let width = node.value.len();
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    add_into(&mut ga[index * width..(index + 1) * width], g);
                }
            }
            Op::MaskFill { a, keep } => {
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    for ((acc, gi), k) in ga.iter_mut().zip(g).zip(keep) {
                        *acc += gi * k;
                    }
                }
            }
            Op::Huber {
                pred,
                target,
                weight,
                delta,
                scale,
            } => {
                let pv = self.value(*pred).data();
                let g0 = g[0] * scale;
                if let Some(gp) = grad_slot(&self.nodes, grads, *pred) {
                    for i in 0..gp.len() {
                        if weight[i] != 0.0 {
                            gp[i] += g0 * weight[i] * huber_grad(pv[i] - target[i], *delta);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = grad_slot(&self.nodes, grads, *a) {
                    for acc in ga.iter_mut() {
                        *acc += g[0];
                    }
                }
            }
        }
    }
}

fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner, inner_stride) = (out_shape[last], src_strides[last]);
    let outer = data.len() / inner;
    for _ in 0..outer {
        let base: usize = (0..last).map(|ax| idx[ax] * src_strides[ax]).sum();
        out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Pointwise Huber loss of residual `e`.
pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);

        let x = tape.leaf(t(&[1, 1], &[2.0]));
        let y = tape.leaf(t(&[1, 1], &[3.0]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn batched_matmul_broadcasts() {
        let mut tape = Tape::new();
        // two 1x2 matrices against one shared 2x1 matrix, batched on both sides
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[1, 2, 1], &[10.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1, 1]);
        assert_eq!(tape.value(c).data(), &[12.0, 34.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.leaf(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x);
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[5.0, 5.0, 5.0]));
        let g = tape.leaf(Tensor::full(&[3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_of_unit_pair() {
        // population variance of [1,-1] is 1, so the output is +-1/sqrt(1+eps)
        let golden = 0.999_995_000_037_499_7;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -1.0]));
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - golden).abs() < 1e-12);
        assert!((v[1] + golden).abs() < 1e-12);
        assert!((v[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        let mut prev = 0.0;
        for i in 1..200 {
            let v = gelu(i as f64 * 0.05);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn concat_widths() {
        let mut tape = Tape::new();
        let parts: Vec<Var> = (0..4)
            .map(|i| tape.leaf(Tensor::full(&[3, 64], i as f64)))
            .collect();
        let c = tape.concat(&parts).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 256]);
        assert_eq!(tape.value(c).get(&[1, 130]), 2.0);

        let single = tape.concat(&parts[..1]).unwrap();
        assert_eq!(tape.value(single), tape.value(parts[0]));

        let odd = tape.leaf(Tensor::zeros(&[2, 64]));
        assert!(tape.concat(&[parts[0], odd]).is_err());
    }

    #[test]
    fn gather_rows_pads_with_zero() {
        let mut tape = Tape::new();
        let src = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true));
        let g = tape.gather_rows(src, &[Some(1), None, Some(1)]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let s = tape.sum(g);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(src).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather_rows(src, &[Some(2)]).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (shape, out) = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(shape, vec![4, 2, 3]);
        // out[i][j][k] = in[j][k][i]
        assert_eq!(out[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let (back_shape, back) = permute_data(&out, &shape, &[1, 2, 0]);
        assert_eq!(back_shape, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(3.0, 1.0), 2.5);
        assert_eq!(huber(1.0, 1.0), 0.5);
        assert_eq!(huber(-3.0, 1.0), 2.5);
        // one-sided values agree at the knee
        assert!((huber(1.0 + 1e-12, 1.0) - 0.5).abs() < 1e-11);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn records_nonfinite_op() {
        let mut tape = Tape::new();
        tape.check_finite = true;
        let a = tape.leaf(t(&[1], &[1e308]));
        let _ = tape.scale(a, 10.0);
        assert_eq!(tape.first_nonfinite(), Some("scale"));
    }
}
