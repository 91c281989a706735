//! The full network: features, encoder, pooling and head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Mode, Tape, Tensor, Var};
use crate::encoder::{encode, encode_on_tape, init_encoder, EncoderConfig, EncoderParams, EncoderVars, LAYER_NAMES};
use crate::error::{Error, Result};
use crate::features::{mel_spectrogram, AudioClip, FeatureConfig, MelSpectrogram};
use crate::head::{init_head, HeadConfig, HeadParams, SpeakerEmbedding};
use crate::pooling::{
    self, inspect_attention, pool_on_tape, AttentionInspection, AttentionParams, MultiHeadConfig,
    PoolingConfig, PoolingKind, PooledVector,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pooling: PoolingConfig,
    #[serde(default)]
    pub head: HeadConfig,
    pub n_speakers: usize,
}

impl ModelConfig {
    pub fn new(n_speakers: usize) -> Self {
        ModelConfig {
            features: FeatureConfig::default(),
            encoder: EncoderConfig::default(),
            pooling: PoolingConfig::default(),
            head: HeadConfig::default(),
            n_speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.encoder.validate()?;
        self.pooling.validate(self.encoder.output_dim())?;
        self.head.validate()?;
        if self.n_speakers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        self.pooling.output_dim(self.encoder.output_dim())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub attention: Option<AttentionParams>,
    pub head: HeadParams,
}

/// Loss, gradients (in [`Model::trainable`] order) and batchnorm statistics
/// of one training batch.
pub struct BatchGradients {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor>,
    pub batch_stats: BatchStats,
}

/// One utterance's encoder and pooling graph, kept alive until the head's
/// gradient arrives.
struct Front {
    tape: Tape,
    encoder: EncoderVars,
    u: Option<Var>,
    pooled: Var,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = init_encoder(&config.encoder, seed)?;
        let attention = config
            .pooling
            .kind
            .has_attention()
            .then(|| AttentionParams::init(config.encoder.output_dim(), seed.wrapping_add(1)));
        let head = init_head(&config.head, config.pooled_dim(), config.n_speakers, seed.wrapping_add(2))?;
        Ok(Model {
            config,
            encoder,
            attention,
            head,
        })
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for l in &self.encoder.layers {
            out.push(&l.kernel);
            out.push(&l.bias);
        }
        out.extend(self.attention.as_ref().map(|a| &a.u));
        out.extend(self.head.trainable());
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.extend(self.attention.as_mut().map(|a| &mut a.u));
        out.extend(self.head.trainable_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Every stored tensor by name, trainable ones first, then the batchnorm
    /// running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, l) in LAYER_NAMES.iter().zip(&self.encoder.layers) {
            out.push((format!("encoder.{name}.kernel"), &l.kernel));
            out.push((format!("encoder.{name}.bias"), &l.bias));
        }
        if let Some(a) = &self.attention {
            out.push(("pooling.u".to_string(), &a.u));
        }
        let h = &self.head;
        for (name, t) in [
            ("head.fc1.weight", &h.fc1_weight),
            ("head.fc1.bias", &h.fc1_bias),
            ("head.bn.gamma", &h.bn_gamma),
            ("head.bn.beta", &h.bn_beta),
            ("head.fc2.weight", &h.fc2_weight),
            ("head.fc2.bias", &h.fc2_bias),
            ("head.out.weight", &h.out_weight),
            ("head.out.bias", &h.out_bias),
            ("head.bn.running_mean", &h.running_mean),
            ("head.bn.running_var", &h.running_var),
        ] {
            out.push((name.to_string(), t));
        }
        out
    }

    /// Rebuilds a model from named tensors; every name expected by `config`
    /// must be present with the right shape, and nothing else.
    pub fn from_named_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this configuration, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, configuration expects {shape:?}",
                    t.shape()
                )));
            }
            ordered.push(t);
        }
        let mut slots = model.trainable_mut();
        let n_trainable = slots.len();
        let mut values = ordered.into_iter();
        for slot in slots.iter_mut() {
            **slot = values.next().expect("counted above");
        }
        drop(slots);
        debug_assert_eq!(n_trainable + 2, expected.len());
        model.head.running_mean = values.next().expect("counted above");
        model.head.running_var = values.next().expect("counted above");
        Ok(model)
    }

    pub fn spectrogram(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        mel_spectrogram(clip, &self.config.features)
    }

    pub fn pool(&self, spec: &MelSpectrogram) -> Result<PooledVector> {
        let h = encode(spec, &self.encoder)?;
        pooling::pool(&h, self.attention.as_ref(), &self.config.pooling)
    }

    /// Eval-mode embedding of a spectrogram.
    pub fn embed(&self, spec: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        let pooled = self.pool(spec)?;
        Ok(self.head.forward(pooled.as_slice())?.0)
    }

    /// Features, encoder, pooling and eval-mode head; returns the embedding.
    pub fn extract_embedding(&self, clip: &AudioClip) -> Result<SpeakerEmbedding> {
        self.embed(&self.spectrogram(clip)?)
    }

    pub fn logits(&self, spec: &MelSpectrogram) -> Result<Vec<f64>> {
        let pooled = self.pool(spec)?;
        Ok(self.head.forward(pooled.as_slice())?.1)
    }

    /// Per-head attention weights for one utterance; only for mha models.
    pub fn inspect_attention(&self, spec: &MelSpectrogram) -> Result<AttentionInspection> {
        let kind = self.config.pooling.kind;
        let u = match (kind, &self.attention) {
            (PoolingKind::Mha, Some(u)) => u,
            _ => {
                return Err(Error::Config(format!(
                    "attention inspection needs an mha model, this one uses {} pooling",
                    kind.name()
                )))
            }
        };
        let h = encode(spec, &self.encoder)?;
        inspect_attention(&h, u, &MultiHeadConfig::new(h.dim(), self.config.pooling.heads)?)
    }

    fn front(&self, spec: &MelSpectrogram) -> Result<Front> {
        let mut tape = Tape::new();
        let encoder = self.encoder.register(&mut tape, true);
        let u = self.attention.as_ref().map(|a| tape.param(a.u.clone()));
        let x = tape.constant(spec.to_tensor());
        let (h, _) = encode_on_tape(&mut tape, &encoder, x)?;
        let pooled = pool_on_tape(&mut tape, h, u, &self.config.pooling)?;
        Ok(Front {
            tape,
            encoder,
            u,
            pooled,
        })
    }

    /// Train-mode loss and gradients for one batch of (spectrogram, label).
    ///
    /// Each utterance is encoded and pooled on its own tape, so no padding is
    /// needed; the pooled vectors meet in one head tape, and the head's
    /// gradient for each row is pushed back through that row's tape.
    /// Gradients are summed in batch order, so the result does not depend on
    /// how many threads ran the utterance graphs.
    pub fn batch_gradients<R: Rng + ?Sized>(
        &self,
        batch: &[(&MelSpectrogram, usize)],
        rng: &mut R,
    ) -> Result<BatchGradients> {
        let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
        let mut fronts = batch
            .par_iter()
            .map(|(spec, _)| self.front(spec))
            .collect::<Result<Vec<_>>>()?;

        let dim = self.config.pooled_dim();
        let mut stacked = Vec::with_capacity(batch.len() * dim);
        for f in &fronts {
            stacked.extend_from_slice(f.tape.value(f.pooled).data());
        }
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(batch.len(), dim, stacked)?);
        let head_vars = self.head.register(&mut tape, true);
        let out = self.head.forward_on_tape(&mut tape, &head_vars, p, Mode::Train, rng)?;
        let loss = tape.cross_entropy(out.logits, &labels)?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).data()[0];
        let correct = count_correct(tape.value(out.logits), &labels);
        let dp = tape.grad(p).expect("pooled input is a parameter").data().to_vec();

        let front_grads: Vec<Vec<Tensor>> = fronts
            .par_iter_mut()
            .enumerate()
            .map(|(i, f)| {
                let seed = Tensor::vector(dp[i * dim..(i + 1) * dim].to_vec());
                f.tape.backward_with(f.pooled, seed)?;
                let mut g = Vec::with_capacity(13);
                for &(k, b) in &f.encoder.layers {
                    g.push(leaf_grad(&f.tape, k));
                    g.push(leaf_grad(&f.tape, b));
                }
                if let Some(u) = f.u {
                    g.push(leaf_grad(&f.tape, u));
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        drop(fronts);

        let mut grads = front_grads
            .into_iter()
            .reduce(|mut acc, g| {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                acc
            })
            .ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
        for v in head_vars.all() {
            grads.push(leaf_grad(&tape, v));
        }
        Ok(BatchGradients {
            loss: loss_value,
            correct,
            grads,
            batch_stats: out.batch_stats.expect("train mode returns batch statistics"),
        })
    }

    /// Eval-mode summed cross-entropy and correct count over labelled inputs.
    pub fn evaluate(&self, batch: &[(&MelSpectrogram, usize)]) -> Result<(f64, usize)> {
        let results = batch
            .par_iter()
            .map(|(spec, label)| {
                let logits = self.logits(spec)?;
                if *label >= logits.len() {
                    return Err(Error::Index {
                        index: *label,
                        classes: logits.len(),
                    });
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                let hit = argmax(&logits) == *label;
                Ok((lse - logits[*label], hit))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(results
            .into_iter()
            .fold((0.0, 0), |(l, c), (x, hit)| (l + x, c + usize::from(hit))))
    }

    /// Applies one batch's statistics to the head's running averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats, batch: usize) {
        self.head.update_running_stats(stats, batch);
    }
}

/// A fresh deterministic generator for dropout masks.
pub fn dropout_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

fn leaf_grad(tape: &Tape, v: Var) -> Tensor {
    tape.grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}
