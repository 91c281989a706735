//! Sequence-to-vector pooling: temporal, statistical, self-attentive and
//! self multi-head attentive.
//!
//! Multi-head attention splits each state `h_t ∈ R^d` into `k` contiguous
//! heads `h_tj ∈ R^{d/k}` and the trainable vector `u` into matching
//! `u_j`. Each head gets its own softmax over time of `h_tjᵀ u_j`, pools its
//! own slice with those weights, and the head outputs are concatenated in
//! head order. With `k = 1` this is plain self-attentive pooling. The
//! number of attention parameters is `d` for every `k`.
//!
//! The free functions here work on plain values; [`pool_on_tape`] is the
//! differentiable equivalent used in training.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::softmax_in_place;
use crate::autodiff::{Tape, Tensor, Var, STD_EPS};
use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Temporal,
    Statistical,
    Attention,
    Mha,
}

impl PoolingKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Temporal => "temporal",
            PoolingKind::Statistical => "statistical",
            PoolingKind::Attention => "attention",
            PoolingKind::Mha => "mha",
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, PoolingKind::Attention | PoolingKind::Mha)
    }
}

impl std::str::FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(PoolingKind::Temporal),
            "statistical" => Ok(PoolingKind::Statistical),
            "attention" => Ok(PoolingKind::Attention),
            "mha" => Ok(PoolingKind::Mha),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected temporal, statistical, attention or mha)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    /// Head count for `mha`; ignored by the other kinds.
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_heads() -> usize {
    64
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            kind: PoolingKind::Mha,
            heads: default_heads(),
        }
    }
}

impl PoolingConfig {
    pub fn new(kind: PoolingKind, heads: usize) -> Self {
        PoolingConfig { kind, heads }
    }

    /// Heads actually used: `heads` for mha, 1 for single-head attention.
    pub fn effective_heads(&self) -> usize {
        match self.kind {
            PoolingKind::Mha => self.heads,
            _ => 1,
        }
    }

    pub fn output_dim(&self, d: usize) -> usize {
        match self.kind {
            PoolingKind::Statistical => 2 * d,
            _ => d,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.kind == PoolingKind::Mha {
            MultiHeadConfig::new(d, self.heads)?;
        }
        Ok(())
    }
}

/// `k` heads of size `d/k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadConfig {
    heads: usize,
    head_size: usize,
}

impl MultiHeadConfig {
    pub fn new(d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d={d} is not divisible by k={heads} heads"
            )));
        }
        Ok(MultiHeadConfig {
            heads,
            head_size: d / heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_size(&self) -> usize {
        self.head_size
    }
}

/// The trainable attention vector `u ∈ R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub u: Tensor,
}

impl AttentionParams {
    pub fn new(u: Vec<f64>) -> Self {
        AttentionParams { u: Tensor::vector(u) }
    }

    /// Uniform in `±√(6/d)`.
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / d as f64).sqrt();
        Self::new((0..d).map(|_| rng.random_range(-bound..bound)).collect())
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// Always `d`: splitting into heads adds no parameters.
    pub fn parameter_count(&self) -> usize {
        self.u.len()
    }

    /// Head `j`'s slice `u_j`.
    pub fn head(&self, cfg: &MultiHeadConfig, j: usize) -> &[f64] {
        &self.u.data()[j * cfg.head_size..(j + 1) * cfg.head_size]
    }
}

/// `k × T` attention weights; row `j` is head `j`'s distribution over time.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    heads: usize,
    len: usize,
    data: Vec<f64>,
}

impl AttentionWeights {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head(&self, j: usize) -> &[f64] {
        &self.data[j * self.len..(j + 1) * self.len]
    }

    pub fn at(&self, j: usize, t: usize) -> f64 {
        self.data[j * self.len + t]
    }
}

/// Utterance-level vector `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledVector(pub Vec<f64>);

impl PooledVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `c = (1/T) Σ_t h_t`.
pub fn temporal_pool(h: &EncodedSequence) -> Result<PooledVector> {
    let t = h.len() as f64;
    Ok(PooledVector(
        (0..h.dim()).map(|i| h.row(i).iter().sum::<f64>() / t).collect(),
    ))
}

/// `[mean; std]` per dimension, population std with a `1e-8` variance floor.
pub fn statistical_pool(h: &EncodedSequence) -> Result<PooledVector> {
    let t = h.len() as f64;
    let mut mean = Vec::with_capacity(h.dim());
    let mut std = Vec::with_capacity(h.dim());
    for i in 0..h.dim() {
        let row = h.row(i);
        let m = row.iter().sum::<f64>() / t;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t;
        mean.push(m);
        std.push((var + STD_EPS).sqrt());
    }
    mean.extend(std);
    Ok(PooledVector(mean))
}

fn check_u(h: &EncodedSequence, u: &AttentionParams) -> Result<()> {
    if u.dim() != h.dim() {
        return Err(Error::dim("attention", &[h.dim()], &[u.dim()]));
    }
    Ok(())
}

/// Per-head softmax over time of `h_tjᵀ u_j`. With `heads = 1` these are
/// the single-vector self-attention weights.
pub fn attention_weights(
    h: &EncodedSequence,
    u: &AttentionParams,
    heads: usize,
) -> Result<AttentionWeights> {
    let cfg = MultiHeadConfig::new(h.dim(), heads)?;
    check_u(h, u)?;
    let len = h.len();
    let mut data = vec![0.0; heads * len];
    for j in 0..heads {
        let row = &mut data[j * len..(j + 1) * len];
        let uj = u.head(&cfg, j);
        for (t, slot) in row.iter_mut().enumerate() {
            let mut score = 0.0;
            for (r, &uv) in uj.iter().enumerate() {
                score += h.at(j * cfg.head_size + r, t) * uv;
            }
            *slot = score;
        }
        softmax_in_place(row);
    }
    Ok(AttentionWeights { heads, len, data })
}

/// Single-vector self-attentive pooling: `w_t = softmax_t(h_tᵀ u)`,
/// `c = Σ_t w_t h_t`.
pub fn self_attention_pool(h: &EncodedSequence, u: &AttentionParams) -> Result<PooledVector> {
    check_u(h, u)?;
    let uv = u.u.data();
    let mut w: Vec<f64> = (0..h.len())
        .map(|t| {
            let mut score = 0.0;
            for (i, &ui) in uv.iter().enumerate() {
                score += h.at(i, t) * ui;
            }
            score
        })
        .collect();
    softmax_in_place(&mut w);
    Ok(PooledVector(
        (0..h.dim())
            .map(|i| {
                let mut acc = 0.0;
                for (t, &wt) in w.iter().enumerate() {
                    acc += wt * h.at(i, t);
                }
                acc
            })
            .collect(),
    ))
}

/// Self multi-head attentive pooling: head `j` pools its slice with its own
/// weights, `c_j = Σ_t w_tj h_tj`, and `c = [c_1 … c_k]`.
pub fn multi_head_pool(
    h: &EncodedSequence,
    u: &AttentionParams,
    cfg: &MultiHeadConfig,
) -> Result<PooledVector> {
    let weights = attention_weights(h, u, cfg.heads)?;
    Ok(PooledVector(
        (0..h.dim())
            .map(|i| {
                let w = weights.head(i / cfg.head_size);
                let mut acc = 0.0;
                for (t, &wt) in w.iter().enumerate() {
                    acc += wt * h.at(i, t);
                }
                acc
            })
            .collect(),
    ))
}

/// The `k` head sub-sequences `h_j ∈ R^{(d/k) × T}`.
pub fn split_heads(h: &EncodedSequence, heads: usize) -> Result<Vec<EncodedSequence>> {
    let cfg = MultiHeadConfig::new(h.dim(), heads)?;
    let len = h.len();
    (0..heads)
        .map(|j| {
            let start = j * cfg.head_size * len;
            let data = h.as_tensor().data()[start..start + cfg.head_size * len].to_vec();
            EncodedSequence::new(cfg.head_size, len, data)
        })
        .collect()
}

/// Per-head weights plus their per-step average across heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInspection {
    pub weights: AttentionWeights,
    pub cumulative: Vec<f64>,
}

impl AttentionInspection {
    /// One line per head (`head_1` …) and a final `cumulative` line; columns
    /// are time steps.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut line = |label: &str, values: &[f64]| {
            out.push_str(label);
            for v in values {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        };
        for j in 0..self.weights.heads() {
            line(&format!("head_{}", j + 1), self.weights.head(j));
        }
        line("cumulative", &self.cumulative);
        out
    }
}

pub fn inspect_attention(
    h: &EncodedSequence,
    u: &AttentionParams,
    cfg: &MultiHeadConfig,
) -> Result<AttentionInspection> {
    let weights = attention_weights(h, u, cfg.heads)?;
    let k = weights.heads() as f64;
    let cumulative = (0..weights.len())
        .map(|t| (0..weights.heads()).map(|j| weights.at(j, t)).sum::<f64>() / k)
        .collect();
    Ok(AttentionInspection {
        weights,
        cumulative,
    })
}

/// Dispatches on the configured pooling kind.
pub fn pool(
    h: &EncodedSequence,
    attention: Option<&AttentionParams>,
    cfg: &PoolingConfig,
) -> Result<PooledVector> {
    let need_u = || {
        attention.ok_or_else(|| {
            Error::Config(format!("{} pooling needs attention parameters", cfg.kind.name()))
        })
    };
    match cfg.kind {
        PoolingKind::Temporal => temporal_pool(h),
        PoolingKind::Statistical => statistical_pool(h),
        PoolingKind::Attention => self_attention_pool(h, need_u()?),
        PoolingKind::Mha => multi_head_pool(h, need_u()?, &MultiHeadConfig::new(h.dim(), cfg.heads)?),
    }
}

/// Differentiable pooling of `h: [d, T]` into a `[dim]` vector.
pub fn pool_on_tape(tape: &mut Tape, h: Var, u: Option<Var>, cfg: &PoolingConfig) -> Result<Var> {
    match cfg.kind {
        PoolingKind::Temporal => tape.mean(h, 1),
        PoolingKind::Statistical => {
            let m = tape.mean(h, 1)?;
            let s = tape.std(h, 1)?;
            tape.concat(&[m, s], 0)
        }
        PoolingKind::Attention | PoolingKind::Mha => {
            let u = u.ok_or_else(|| {
                Error::Config(format!("{} pooling needs attention parameters", cfg.kind.name()))
            })?;
            attention_on_tape(tape, h, u, cfg.effective_heads(), None)
        }
    }
}

/// Multi-head attentive pooling on a tape. When `valid_len` is given, time
/// steps at or beyond it are padding: their logits become `-inf`, so they
/// get zero weight and the result equals pooling the unpadded prefix.
pub fn attention_on_tape(
    tape: &mut Tape,
    h: Var,
    u: Var,
    heads: usize,
    valid_len: Option<usize>,
) -> Result<Var> {
    let mut scores = tape.segment_dot(h, u, heads)?;
    if let Some(valid) = valid_len {
        scores = tape.mask_tail(scores, valid)?;
    }
    let w = tape.softmax(scores, 1)?;
    tape.segment_weighted_sum(h, w)
}
