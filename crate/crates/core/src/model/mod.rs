//! Signal encoder, parameter storage, optimizer, and augmentations.
//!
//! The encoder is a stack of valid-padding 1-D convolutions with ReLU,
//! optional average pooling per stage, and a tap set: selected stage
//! outputs are global-average-pooled into per-level feature vectors r_j,
//! pushed through per-level two-layer projection heads, and L2-normalized
//! into embeddings z_j on the unit sphere. All shapes are derived from
//! `EncoderSpec`, all parameters live in a `ParamStore` in declaration
//! order, and every forward pass records a `tape::Tape` for exact
//! reverse-mode gradients.

pub mod augment;
pub mod checkpoint;
pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub use augment::{augment, AugmentConfig};
pub use tape::{NodeId, Tape};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub input_len: usize,
    /// Output channels per conv stage.
    pub conv_channels: Vec<usize>,
    /// Kernel width per stage.
    pub conv_kernels: Vec<usize>,
    /// Stride per stage.
    pub conv_strides: Vec<usize>,
    /// Average-pool window (= stride) applied after each stage's ReLU;
    /// 1 means no pooling.
    pub pool: Vec<usize>,
    /// 1-based stage indices whose outputs become levels.
    pub taps: Vec<usize>,
    /// Hidden width of each projection head.
    pub proj_hidden: usize,
    /// Embedding dimension after projection.
    pub embed_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            in_channels: 1,
            input_len: 512,
            conv_channels: vec![8, 16, 32, 32, 32],
            conv_kernels: vec![7, 5, 5, 3, 3],
            conv_strides: vec![4, 2, 2, 2, 2],
            pool: vec![1, 1, 1, 1, 1],
            taps: vec![3, 4, 5],
            proj_hidden: 32,
            embed_dim: 8,
        }
    }
}

impl EncoderSpec {
    /// Time length after each stage; errors if any stage underflows.
    pub fn stage_lengths(&self) -> Result<Vec<usize>> {
        let n = self.conv_channels.len();
        if self.conv_kernels.len() != n || self.conv_strides.len() != n || self.pool.len() != n {
            return Err(Error::Dim {
                context: "EncoderSpec",
                detail: "conv_channels/kernels/strides/pool lengths differ".into(),
            });
        }
        let mut t = self.input_len;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            if self.conv_kernels[i] == 0 || self.conv_strides[i] == 0 || self.pool[i] == 0 {
                return Err(Error::InvalidArg {
                    context: "EncoderSpec",
                    detail: format!("stage {} has a zero kernel/stride/pool", i + 1),
                });
            }
            if t < self.conv_kernels[i] {
                return Err(Error::Dim {
                    context: "EncoderSpec",
                    detail: format!(
                        "stage {} input length {t} shorter than kernel {}",
                        i + 1,
                        self.conv_kernels[i]
                    ),
                });
            }
            t = (t - self.conv_kernels[i]) / self.conv_strides[i] + 1;
            if self.pool[i] > 1 {
                if t < self.pool[i] {
                    return Err(Error::Dim {
                        context: "EncoderSpec",
                        detail: format!("stage {} pool {} exceeds length {t}", i + 1, self.pool[i]),
                    });
                }
                t = (t - self.pool[i]) / self.pool[i] + 1;
            }
            out.push(t);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.input_len == 0 {
            return Err(Error::InvalidArg {
                context: "EncoderSpec",
                detail: "in_channels and input_len must be positive".into(),
            });
        }
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidArg {
                context: "EncoderSpec",
                detail: "need at least one conv stage".into(),
            });
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidArg {
                context: "EncoderSpec",
                detail: format!("embed_dim {} < 2", self.embed_dim),
            });
        }
        if self.proj_hidden == 0 {
            return Err(Error::InvalidArg {
                context: "EncoderSpec",
                detail: "proj_hidden must be positive".into(),
            });
        }
        if self.taps.is_empty() {
            return Err(Error::InvalidArg {
                context: "EncoderSpec",
                detail: "tap set must be nonempty".into(),
            });
        }
        for &tap in &self.taps {
            if tap == 0 || tap > self.conv_channels.len() {
                return Err(Error::InvalidArg {
                    context: "EncoderSpec",
                    detail: format!(
                        "tap {tap} outside stages 1..={}",
                        self.conv_channels.len()
                    ),
                });
            }
        }
        self.stage_lengths()?;
        Ok(())
    }
}

/// Named parameter tensors plus Adam moment buffers, in declaration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, tensor: Matrix) -> Result<usize> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidArg {
                context: "ParamStore",
                detail: format!("duplicate parameter name {name}"),
            });
        }
        self.m.push(Matrix::zeros(tensor.rows(), tensor.cols()));
        self.v.push(Matrix::zeros(tensor.rows(), tensor.cols()));
        self.tensors.push(tensor);
        self.names.push(name.to_string());
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Matrix {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.rows() * t.cols()).sum()
    }

    /// Deterministic content fingerprint over tensors in declaration order.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in &self.tensors {
            for &x in t.data() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }

    /// AdamW: decoupled weight decay, bias-corrected moments.
    pub fn adam_step(&mut self, grads: &[Matrix], cfg: &OptimConfig) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::LengthMismatch {
                context: "adam_step",
                left: grads.len(),
                right: self.tensors.len(),
            });
        }
        for (idx, g) in grads.iter().enumerate() {
            let t = &self.tensors[idx];
            if g.rows() != t.rows() || g.cols() != t.cols() {
                return Err(Error::Dim {
                    context: "adam_step",
                    detail: format!("gradient {idx} shaped unlike its parameter"),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    context: self.names[idx].clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for idx in 0..self.tensors.len() {
            let g = grads[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = self.tensors[idx].data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Fan-in scaled uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub(crate) fn kaiming_uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.range_f64(-bound, bound);
    }
    m
}

/// Build and initialize all encoder parameters. Each tensor draws from its
/// own stream forked off `seed` by parameter name, so adding or reordering
/// unrelated tensors never changes another tensor's values.
pub fn init_encoder(spec: &EncoderSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let root = Rng::new(seed);
    let mut store = ParamStore::new();
    let mut c_in = spec.in_channels;
    for (i, (&c_out, (&k, _))) in spec
        .conv_channels
        .iter()
        .zip(spec.conv_kernels.iter().zip(&spec.conv_strides))
        .enumerate()
    {
        let stage = i + 1;
        let wname = format!("conv{stage}.w");
        let mut r = root.fork(fnv1a(wname.as_bytes()));
        store.add(&wname, kaiming_uniform(&mut r, c_out, c_in * k, c_in * k))?;
        store.add(&format!("conv{stage}.b"), Matrix::zeros(1, c_out))?;
        c_in = c_out;
    }
    for &tap in &spec.taps {
        let feat = spec.conv_channels[tap - 1];
        let w1name = format!("proj{tap}.w1");
        let mut r = root.fork(fnv1a(w1name.as_bytes()));
        store.add(&w1name, kaiming_uniform(&mut r, spec.proj_hidden, feat, feat))?;
        store.add(&format!("proj{tap}.b1"), Matrix::zeros(1, spec.proj_hidden))?;
        let w2name = format!("proj{tap}.w2");
        let mut r = root.fork(fnv1a(w2name.as_bytes()));
        store.add(
            &w2name,
            kaiming_uniform(&mut r, spec.embed_dim, spec.proj_hidden, spec.proj_hidden),
        )?;
        store.add(&format!("proj{tap}.b2"), Matrix::zeros(1, spec.embed_dim))?;
    }
    Ok(store)
}

/// One level's forward outputs: pooled features r and unit embeddings z,
/// both batched (one row per sample), still attached to the tape.
#[derive(Debug, Clone, Copy)]
pub struct LevelNodes {
    pub level: usize,
    pub r: NodeId,
    pub z: NodeId,
}

pub struct MultiscaleForward {
    pub tape: Tape,
    pub levels: Vec<LevelNodes>,
}

/// Run the encoder over a batch of (channels, time) signals, producing
/// per-level feature and embedding nodes. Gradients for any loss expressed
/// on the z (or r) nodes flow back to every parameter through
/// `tape.backward_from`.
pub fn forward_multiscale(
    store: &ParamStore,
    spec: &EncoderSpec,
    signals: &[Matrix],
) -> Result<MultiscaleForward> {
    spec.validate()?;
    if signals.is_empty() {
        return Err(Error::InsufficientSamples {
            context: "forward_multiscale",
            need: 1,
            got: 0,
        });
    }
    for (i, s) in signals.iter().enumerate() {
        if s.rows() != spec.in_channels || s.cols() != spec.input_len {
            return Err(Error::Dim {
                context: "forward_multiscale",
                detail: format!(
                    "signal {i} is ({}, {}), spec wants ({}, {})",
                    s.rows(),
                    s.cols(),
                    spec.in_channels,
                    spec.input_len
                ),
            });
        }
        if !s.is_finite() {
            return Err(Error::NonFinite {
                context: "forward_multiscale",
            });
        }
    }

    let mut tape = Tape::new();
    let n_stages = spec.conv_channels.len();
    let mut conv_params = Vec::with_capacity(n_stages);
    for stage in 1..=n_stages {
        let w = param_by_name(&mut tape, store, &format!("conv{stage}.w"))?;
        let b = param_by_name(&mut tape, store, &format!("conv{stage}.b"))?;
        conv_params.push((w, b));
    }

    // Per-sample conv towers; taps pool to (1, channels) rows.
    let mut tapped: Vec<Vec<NodeId>> = vec![Vec::with_capacity(signals.len()); spec.taps.len()];
    for sig in signals {
        let mut h = tape.constant(sig.clone());
        for stage in 1..=n_stages {
            let (w, b) = conv_params[stage - 1];
            h = tape.conv1d(h, w, b, spec.conv_kernels[stage - 1], spec.conv_strides[stage - 1])?;
            h = tape.relu(h);
            if spec.pool[stage - 1] > 1 {
                h = tape.avg_pool1d(h, spec.pool[stage - 1], spec.pool[stage - 1])?;
            }
            if let Some(slot) = spec.taps.iter().position(|&t| t == stage) {
                tapped[slot].push(tape.global_avg_pool(h));
            }
        }
    }

    let mut levels = Vec::with_capacity(spec.taps.len());
    for (slot, &tap) in spec.taps.iter().enumerate() {
        let r = tape.concat_rows(&tapped[slot])?;
        let w1 = param_by_name(&mut tape, store, &format!("proj{tap}.w1"))?;
        let b1 = param_by_name(&mut tape, store, &format!("proj{tap}.b1"))?;
        let w2 = param_by_name(&mut tape, store, &format!("proj{tap}.w2"))?;
        let b2 = param_by_name(&mut tape, store, &format!("proj{tap}.b2"))?;
        let h = tape.affine(r, w1, b1)?;
        let h = tape.relu(h);
        let u = tape.affine(h, w2, b2)?;
        let z = tape.row_l2_norm(u, 1e-12);
        levels.push(LevelNodes { level: tap, r, z });
    }
    Ok(MultiscaleForward { tape, levels })
}

pub(crate) fn param_by_name(tape: &mut Tape, store: &ParamStore, name: &str) -> Result<NodeId> {
    let idx = store.index_of(name).ok_or_else(|| Error::InvalidArg {
        context: "forward_multiscale",
        detail: format!("parameter {name} missing from store"),
    })?;
    Ok(tape.param(store, idx))
}
