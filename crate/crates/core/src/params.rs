//! Named parameter storage, Adam, the learning-rate schedule and the
//! checkpoint file format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Ordered collection of learnable tensors. Order is the manifest order
/// used by checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameter handles registered on one tape, parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, index: usize) -> Var {
        self.0[index]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its manifest index.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Registers every parameter on `tape` as a gradient-tracked leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.param(t)).collect())
    }

    /// Registers every parameter as a constant (no gradient tracking).
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Normal(0, std).
pub fn init_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| dist.sample(rng)).collect()).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Vec<f64>],
        cfg: &AdamConfig,
    ) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam",
                msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            let t = params.tensor(i);
            if g.len() != t.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: t.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.zeros_like();
            self.v = params.zeros_like();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensor_mut(i).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Step decay at fixed epochs: `base * decay^(milestones passed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl MilestoneSchedule {
    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.decay.powi(passed as i32)
    }
}

pub const CHECKPOINT_VERSION: u8 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFGK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),
}

/// A parameter snapshot plus free-form string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

// Layout (all integers little-endian):
//   u8 version | "TFGK" | u32 meta count | (str key, str value)*
//   u32 entry count | (str name, u32 rank, u64 dim*)* | f64 values in manifest order
// where str is u32 byte length followed by UTF-8 bytes.
impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_str(w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for (_, t) in self.params.iter() {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let version = cur.take(1)?[0];
        if cur.take(4).map(|m| m != CHECKPOINT_MAGIC).unwrap_or(true) {
            return Err(CheckpointError::BadMagic);
        }
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..cur.u32()? {
            let k = cur.string()?;
            let v = cur.string()?;
            meta.insert(k, v);
        }
        let count = cur.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            manifest.push((name, shape));
        }
        let mut params = ParamStore::new();
        for (name, shape) in manifest {
            let len: usize = shape.iter().product();
            let raw = cur.take(len.checked_mul(8).ok_or_else(|| {
                CheckpointError::Corrupt(format!("{name}: shape {shape:?} overflows"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        if cur.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }

    /// Fails unless `expected` has exactly the same names and shapes.
    pub fn check_manifest(&self, expected: &ParamStore) -> Result<(), CheckpointError> {
        let (ours, theirs) = (self.params.manifest(), expected.manifest());
        if ours.len() != theirs.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} entries, model expects {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((n1, s1), (n2, s2)) in ours.iter().zip(&theirs) {
            if n1 != n2 || s1 != s2 {
                return Err(CheckpointError::Manifest(format!(
                    "{n1}{s1:?} vs expected {n2}{s2:?}"
                )));
            }
        }
        Ok(())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = scalar_store(1.5);
        let mut adam = Adam::new();
        adam.step(&mut store, &[vec![0.0]], &AdamConfig::default()).unwrap();
        assert_eq!(store.tensor(0).data(), &[1.5]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        Adam::new().step(&mut store, &[vec![1.0]], &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((store.tensor(0).data()[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new();
        let mut prev = 1.0;
        for _ in 0..10 {
            let p = store.tensor(0).data()[0];
            adam.step(&mut store, &[vec![2.0 * p]], &cfg).unwrap();
            let p = store.tensor(0).data()[0];
            assert!(p * p < prev);
            prev = p * p;
        }
    }

    #[test]
    fn adam_rejects_mismatched_gradient() {
        let mut store = scalar_store(0.0);
        let err = Adam::new().step(&mut store, &[vec![1.0, 2.0]], &AdamConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn milestones_decay_learning_rate() {
        let s = MilestoneSchedule {
            base: 1e-4,
            milestones: vec![55],
            decay: 0.1,
        };
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(54), 1e-4);
        assert!((s.lr_at(55) - 1e-5).abs() < 1e-20);
        assert!((s.lr_at(120) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let mut params = ParamStore::new();
        params.insert("enc.0.qkv", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.0]).unwrap());
        params.insert("head.0", Tensor::scalar(f64::MIN_POSITIVE));
        let mut meta = BTreeMap::new();
        meta.insert("embed_dim".to_string(), "4".to_string());
        let ck = Checkpoint { meta, params };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(buf[0], CHECKPOINT_VERSION);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        back.check_manifest(&ck.params).unwrap();

        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            Checkpoint::read_from(&mut &truncated[..]),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn manifest_mismatch_is_reported() {
        let a = scalar_store(0.0);
        let mut b = ParamStore::new();
        b.insert("q", Tensor::scalar(0.0));
        let ck = Checkpoint {
            meta: BTreeMap::new(),
            params: a,
        };
        assert!(matches!(ck.check_manifest(&b), Err(CheckpointError::Manifest(_))));
    }
}
