//! Temporal folding and embedding fusion.
//!
//! A window's `N x T` input becomes `N` tokens (one per node, each carrying
//! all `T` steps). Each token is projected to `d` dimensions and
//! concatenated with a learned per-node embedding and the time-of-day and
//! day-of-week embeddings of the window's last input step, giving `4d`.

use std::io::Write;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{init_normal, init_uniform, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// How a window is cut into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Folding {
    /// One token per node (temporal folding graph).
    Temporal,
    /// One token per time step carrying every node value.
    Spatial,
}

impl Folding {
    pub fn as_str(self) -> &'static str {
        match self {
            Folding::Temporal => "tfg",
            Folding::Spatial => "sf",
        }
    }
}

impl std::str::FromStr for Folding {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tfg" | "temporal" => Ok(Folding::Temporal),
            "sf" | "spatial" => Ok(Folding::Spatial),
            other => Err(format!("unknown folding {other:?} (expected tfg or sf)")),
        }
    }
}

/// Node-major `N x T` input to `N` TF-tokens of length `T`. The folding is a
/// pure relabelling of the same values.
pub fn fold_temporal(input: &[f64], nodes: usize, steps: usize) -> Result<Tensor> {
    Tensor::new(&[nodes, steps], input.to_vec())
}

/// Inverse of [`fold_temporal`].
pub fn unfold_temporal(tokens: &Tensor) -> Vec<f64> {
    tokens.data().to_vec()
}

/// Node-major `N x T` input to `T` SF-tokens of length `N`.
pub fn fold_spatial(input: &[f64], nodes: usize, steps: usize) -> Result<Tensor> {
    if input.len() != nodes * steps {
        return Err(TensorError::InvalidShape {
            shape: vec![nodes, steps],
            len: input.len(),
        });
    }
    let mut out = vec![0.0; input.len()];
    for n in 0..nodes {
        for t in 0..steps {
            out[t * nodes + n] = input[n * steps + t];
        }
    }
    Tensor::new(&[steps, nodes], out)
}

/// Token counts: one per node for temporal folding, one per node and step
/// for the snapshot view.
pub fn tfg_token_count(nodes: usize) -> usize {
    nodes
}

pub fn snapshot_token_count(nodes: usize, steps: usize) -> usize {
    nodes * steps
}

pub const WX: &str = "emb.wx";
pub const WX_BIAS: &str = "emb.wx.bias";
pub const SPATIAL: &str = "emb.spatial";
pub const TOD: &str = "emb.tod";
pub const DOW: &str = "emb.dow";

/// Shape parameters of the embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingSpec {
    pub nodes: usize,
    pub input_len: usize,
    pub frequency: usize,
    pub dim: usize,
    pub folding: Folding,
}

impl EmbeddingSpec {
    /// Width of a token before projection.
    pub fn token_width(&self) -> usize {
        match self.folding {
            Folding::Temporal => self.input_len,
            Folding::Spatial => self.nodes,
        }
    }

    pub fn token_count(&self) -> usize {
        match self.folding {
            Folding::Temporal => self.nodes,
            Folding::Spatial => self.input_len,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (w, d) = (self.token_width(), self.dim);
        store.insert(WX, init_uniform(&[w, d], w, rng));
        store.insert(WX_BIAS, init_uniform(&[d], w, rng));
        if self.folding == Folding::Temporal {
            store.insert(SPATIAL, init_normal(&[self.nodes, d], 0.02, rng));
        }
        store.insert(TOD, init_normal(&[self.frequency, d], 0.02, rng));
        store.insert(DOW, init_normal(&[7, d], 0.02, rng));
    }
}

/// The embedding tables registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub wx: Var,
    pub wx_bias: Var,
    pub spatial: Option<Var>,
    pub tod: Var,
    pub dow: Var,
}

impl EmbeddingTables {
    pub fn bind(store: &ParamStore, vars: &crate::params::ParamVars) -> Option<Self> {
        let v = |name| store.index_of(name).map(|i| vars.get(i));
        Some(Self {
            wx: v(WX)?,
            wx_bias: v(WX_BIAS)?,
            spatial: v(SPATIAL),
            tod: v(TOD)?,
            dow: v(DOW)?,
        })
    }
}

/// `E_x || E_s || E_tod || E_dow` for one window.
///
/// `tokens` is `[count, width]`. Temporal embeddings are looked up once and
/// repeated on every token. Without a spatial table the `E_s` slot is zero.
pub fn fuse_embeddings(
    tape: &mut Tape,
    tokens: Var,
    tables: &EmbeddingTables,
    tod_index: usize,
    dow_index: usize,
) -> Result<Var> {
    fuse_embeddings_batch(tape, tokens, tables, &[(tod_index, dow_index)])
}

/// [`fuse_embeddings`] for several windows stacked along the rows of
/// `tokens`; `calendar` holds each window's `(tod, dow)` indices.
pub fn fuse_embeddings_batch(
    tape: &mut Tape,
    tokens: Var,
    tables: &EmbeddingTables,
    calendar: &[(usize, usize)],
) -> Result<Var> {
    let total = tape.value(tokens).shape()[0];
    let freq = tape.value(tables.tod).shape()[0];
    let dim = tape.value(tables.wx).shape()[1];
    if calendar.is_empty() || !total.is_multiple_of(calendar.len()) {
        return Err(TensorError::Invalid {
            op: "fuse_embeddings",
            msg: format!("{total} token rows for {} windows", calendar.len()),
        });
    }
    let count = total / calendar.len();
    for &(tod, dow) in calendar {
        if tod >= freq {
            return Err(TensorError::IndexOutOfRange {
                op: "tod embedding",
                index: tod,
                len: freq,
            });
        }
        if dow >= 7 {
            return Err(TensorError::IndexOutOfRange {
                op: "dow embedding",
                index: dow,
                len: 7,
            });
        }
    }
    let proj = tape.matmul(tokens, tables.wx)?;
    let ex = tape.add(proj, tables.wx_bias)?;
    let es = match tables.spatial {
        Some(table) => {
            let rows = tape.value(table).shape()[0];
            if rows != count {
                return Err(TensorError::ShapeMismatch {
                    op: "spatial embedding",
                    lhs: tape.value(tokens).shape().to_vec(),
                    rhs: tape.value(table).shape().to_vec(),
                });
            }
            let index: Vec<Option<usize>> = (0..total).map(|r| Some(r % count)).collect();
            tape.gather_rows(table, &index)?
        }
        None => tape.constant(Tensor::zeros(&[total, dim])),
    };
    let per_row = |pick: fn(&(usize, usize)) -> usize| -> Vec<Option<usize>> {
        calendar
            .iter()
            .flat_map(|c| std::iter::repeat_n(Some(pick(c)), count))
            .collect()
    };
    let etod = tape.gather_rows(tables.tod, &per_row(|c| c.0))?;
    let edow = tape.gather_rows(tables.dow, &per_row(|c| c.1))?;
    tape.concat(&[ex, es, etod, edow])
}

/// Writes the spatial, time-of-day and day-of-week tables as CSV with
/// header `table,index,dim0..dim{d-1}`.
pub fn dump_embeddings(store: &ParamStore, w: &mut impl Write) -> std::io::Result<()> {
    let tod = store
        .get(TOD)
        .ok_or_else(|| std::io::Error::other("parameters have no time-of-day table"))?;
    let dim = tod.last_dim();
    let mut header = String::from("table,index");
    for j in 0..dim {
        header.push_str(&format!(",dim{j}"));
    }
    writeln!(w, "{header}")?;
    for (label, name) in [("spatial", SPATIAL), ("tod", TOD), ("dow", DOW)] {
        let Some(t) = store.get(name) else { continue };
        for (i, row) in t.data().chunks_exact(dim).enumerate() {
            let mut line = format!("{label},{i}");
            for v in row {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tables(spec: EmbeddingSpec, zero: bool) -> (Tape, EmbeddingTables) {
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        if zero {
            for i in 0..store.len() {
                store.tensor_mut(i).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let vars = store.register(&mut tape);
        let t = EmbeddingTables::bind(&store, &vars).unwrap();
        (tape, t)
    }

    fn spec(nodes: usize, input_len: usize, dim: usize) -> EmbeddingSpec {
        EmbeddingSpec {
            nodes,
            input_len,
            frequency: 24,
            dim,
            folding: Folding::Temporal,
        }
    }

    #[test]
    fn temporal_fold_is_identity_reshape() {
        let tok = fold_temporal(&[1.0, 2.0, 3.0], 1, 3).unwrap();
        assert_eq!(tok.shape(), &[1, 3]);
        assert_eq!(tok.data(), &[1.0, 2.0, 3.0]);
        let x: Vec<f64> = (0..307 * 24).map(|i| i as f64).collect();
        let tok = fold_temporal(&x, 307, 24).unwrap();
        assert_eq!(tok.shape()[0], 307);
        assert_eq!(unfold_temporal(&tok), x);
        assert_eq!(snapshot_token_count(307, 24), 7368);
        assert_eq!(tfg_token_count(307), 307);
    }

    #[test]
    fn spatial_fold_transposes() {
        let tok = fold_spatial(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(tok.data(), &[1.0, 3.0, 2.0, 4.0]);
        let tok = fold_spatial(&vec![0.0; 5 * 24], 5, 24).unwrap();
        assert_eq!(tok.shape(), &[24, 5]);
    }

    #[test]
    fn fused_width_is_four_d() {
        let (mut tape, t) = tables(spec(3, 4, 64), false);
        let x = tape.constant(Tensor::full(&[3, 4], 0.5));
        let e = fuse_embeddings(&mut tape, x, &t, 5, 2).unwrap();
        assert_eq!(tape.value(e).shape(), &[3, 256]);
    }

    #[test]
    fn identical_rows_differ_only_in_spatial_slice() {
        let d = 4;
        let (mut tape, t) = tables(spec(2, 3, d), false);
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let e = fuse_embeddings(&mut tape, x, &t, 0, 0).unwrap();
        let v = tape.value(e).data();
        for j in 0..4 * d {
            let same = v[j] == v[4 * d + j];
            assert_eq!(same, !(d..2 * d).contains(&j), "column {j}");
        }
    }

    #[test]
    fn zero_tables_give_zero_tokens() {
        let (mut tape, t) = tables(spec(3, 2, 4), true);
        let x = tape.constant(Tensor::full(&[3, 2], 9.0));
        let e = fuse_embeddings(&mut tape, x, &t, 1, 1).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn calendar_index_out_of_range() {
        let (mut tape, t) = tables(spec(2, 2, 4), false);
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(fuse_embeddings(&mut tape, x, &t, 24, 0).is_err());
        assert!(fuse_embeddings(&mut tape, x, &t, 0, 7).is_err());
    }

    #[test]
    fn spatial_folding_has_no_node_table() {
        let s = EmbeddingSpec {
            folding: Folding::Spatial,
            ..spec(5, 3, 4)
        };
        let (mut tape, t) = tables(s, false);
        assert!(t.spatial.is_none());
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        let e = fuse_embeddings(&mut tape, x, &t, 0, 0).unwrap();
        let v = tape.value(e);
        assert_eq!(v.shape(), &[3, 16]);
        for r in 0..3 {
            assert!((4..8).all(|j| v.get(&[r, j]) == 0.0));
        }
    }

    #[test]
    fn dump_lists_every_table_row() {
        let mut store = ParamStore::new();
        spec(3, 2, 2).init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut out = Vec::new();
        dump_embeddings(&store, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "table,index,dim0,dim1");
        assert_eq!(lines.len(), 1 + 3 + 24 + 7);
        assert!(lines[1].starts_with("spatial,0,"));
        assert!(lines.last().unwrap().starts_with("dow,6,"));
    }
}
