//! Fully connected block and speaker classifier.
//!
//! `fc1 → batchnorm → relu → fc2 (embedding) → dropout → logits`. The fc2
//! output is the speaker embedding; it has no activation so that cosine
//! scoring sees the whole space, and dropout only touches what the
//! classifier sees, so embeddings never depend on dropout randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub fc1: usize,
    pub embedding: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            fc1: 1024,
            embedding: 500,
            dropout: 0.2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fc1 == 0 || self.embedding == 0 {
            return Err(Error::Config("head layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// The 500-d bottleneck activation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

/// He-uniform for the relu layer, Glorot-uniform for the linear ones, zero
/// biases, identity batchnorm.
pub fn init_head(cfg: &HeadConfig, input_dim: usize, n_speakers: usize, seed: u64) -> Result<HeadParams> {
    cfg.validate()?;
    if n_speakers < 2 {
        return Err(Error::Config(format!("need at least 2 speakers, got {n_speakers}")));
    }
    if input_dim == 0 {
        return Err(Error::Config("head input dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(HeadParams {
        config: cfg.clone(),
        fc1_weight: uniform(&mut rng, input_dim, cfg.fc1, (6.0 / input_dim as f64).sqrt()),
        fc1_bias: Tensor::zeros(vec![cfg.fc1]),
        bn_gamma: Tensor::full(vec![cfg.fc1], 1.0),
        bn_beta: Tensor::zeros(vec![cfg.fc1]),
        running_mean: Tensor::zeros(vec![cfg.fc1]),
        running_var: Tensor::full(vec![cfg.fc1], 1.0),
        fc2_weight: uniform(&mut rng, cfg.fc1, cfg.embedding, glorot(cfg.fc1, cfg.embedding)),
        fc2_bias: Tensor::zeros(vec![cfg.embedding]),
        out_weight: uniform(&mut rng, cfg.embedding, n_speakers, glorot(cfg.embedding, n_speakers)),
        out_bias: Tensor::zeros(vec![n_speakers]),
    })
}

/// Head parameters registered on a tape, in [`HeadParams::trainable`] order.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

impl HeadVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.fc1_weight,
            self.fc1_bias,
            self.bn_gamma,
            self.bn_beta,
            self.fc2_weight,
            self.fc2_bias,
            self.out_weight,
            self.out_bias,
        ]
    }
}

pub struct HeadOutput {
    pub embedding: Var,
    pub logits: Var,
    /// Batch statistics of the fc1 activations (train mode only).
    pub batch_stats: Option<BatchStats>,
}

impl HeadParams {
    pub fn input_dim(&self) -> usize {
        self.fc1_weight.shape()[0]
    }

    pub fn n_speakers(&self) -> usize {
        self.out_bias.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc2_bias.len()
    }

    pub fn trainable(&self) -> [&Tensor; 8] {
        [
            &self.fc1_weight,
            &self.fc1_bias,
            &self.bn_gamma,
            &self.bn_beta,
            &self.fc2_weight,
            &self.fc2_bias,
            &self.out_weight,
            &self.out_bias,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        HeadVars {
            fc1_weight: reg(&self.fc1_weight),
            fc1_bias: reg(&self.fc1_bias),
            bn_gamma: reg(&self.bn_gamma),
            bn_beta: reg(&self.bn_beta),
            fc2_weight: reg(&self.fc2_weight),
            fc2_bias: reg(&self.fc2_bias),
            out_weight: reg(&self.out_weight),
            out_bias: reg(&self.out_bias),
        }
    }

    /// Runs the head on `x: [batch, input_dim]`. Train mode normalizes with
    /// batch statistics (batch ≥ 2) and applies dropout; eval mode uses the
    /// running statistics and is deterministic.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<HeadOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(Error::dim("head input", &s, &[s[0], self.input_dim()]));
        }
        let z = tape.matmul(x, vars.fc1_weight)?;
        let z = tape.add_bias(z, vars.fc1_bias)?;
        let (z, batch_stats) = match mode {
            Mode::Train => {
                if s[0] < 2 {
                    return Err(Error::Config(
                        "batch normalization in training needs a batch of at least 2".into(),
                    ));
                }
                let (z, stats) = tape.batch_norm_train(z, vars.bn_gamma, vars.bn_beta, BN_EPS)?;
                (z, Some(stats))
            }
            Mode::Eval => (
                tape.batch_norm_eval(
                    z,
                    vars.bn_gamma,
                    vars.bn_beta,
                    self.running_mean.data(),
                    self.running_var.data(),
                    BN_EPS,
                )?,
                None,
            ),
        };
        let a = tape.relu(z);
        let e = tape.matmul(a, vars.fc2_weight)?;
        let embedding = tape.add_bias(e, vars.fc2_bias)?;
        let dropped = tape.dropout(embedding, self.config.dropout, mode, rng)?;
        let l = tape.matmul(dropped, vars.out_weight)?;
        let logits = tape.add_bias(l, vars.out_bias)?;
        Ok(HeadOutput {
            embedding,
            logits,
            batch_stats,
        })
    }

    /// Folds one batch's statistics into the running averages; the variance
    /// is stored in its unbiased form.
    pub fn update_running_stats(&mut self, stats: &BatchStats, batch: usize) {
        let correction = if batch > 1 {
            batch as f64 / (batch - 1) as f64
        } else {
            1.0
        };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * correction;
        }
    }

    /// Eval-mode forward of one pooled vector: `(embedding, logits)`.
    pub fn forward(&self, pooled: &[f64]) -> Result<(SpeakerEmbedding, Vec<f64>)> {
        if pooled.len() != self.input_dim() {
            return Err(Error::dim("head input", &[pooled.len()], &[self.input_dim()]));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(Tensor::matrix(1, pooled.len(), pooled.to_vec())?);
        let out = self.forward_on_tape(&mut tape, &vars, x, Mode::Eval, &mut rand::rng())?;
        Ok((
            SpeakerEmbedding(tape.value(out.embedding).data().to_vec()),
            tape.value(out.logits).data().to_vec(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_error;

    fn small() -> HeadConfig {
        HeadConfig {
            fc1: 6,
            embedding: 4,
            dropout: 0.2,
        }
    }

    #[test]
    fn shapes_and_defaults() {
        let p = init_head(&HeadConfig::default(), 64, 3, 0).unwrap();
        assert_eq!(p.embedding_dim(), 500);
        assert_eq!(p.fc1_bias.len(), 1024);
        let (e, logits) = p.forward(&vec![0.5; 64]).unwrap();
        assert_eq!(e.dim(), 500);
        assert_eq!(logits.len(), 3);
        assert!(matches!(p.forward(&[0.0; 3]), Err(Error::Dimension { .. })));
        assert!(matches!(init_head(&small(), 8, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_gives_zero_embedding() {
        let p = init_head(&small(), 5, 3, 1).unwrap();
        let (e, _) = p.forward(&[0.0; 5]).unwrap();
        assert!(e.0.iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![3, 5]));
        let out = p
            .forward_on_tape(&mut tape, &vars, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(tape.value(out.embedding).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_deterministic_and_embedding_ignores_dropout() {
        let p = init_head(&small(), 5, 3, 2).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.7];
        assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());

        let batch = Tensor::matrix(2, 5, [x, [1.0, 0.0, -0.5, 0.2, 0.9]].concat()).unwrap();
        let run = |seed| {
            let mut tape = Tape::new();
            let vars = p.register(&mut tape, false);
            let xv = tape.constant(batch.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = p.forward_on_tape(&mut tape, &vars, xv, Mode::Train, &mut rng).unwrap();
            (tape.value(out.embedding).clone(), tape.value(out.logits).clone())
        };
        let (e1, l1) = run(1);
        let (e2, l2) = run(2);
        assert_eq!(e1, e2);
        assert_ne!(l1, l2);
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let p = init_head(&small(), 5, 3, 2).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![1, 5]));
        let r = p.forward_on_tape(&mut tape, &vars, x, Mode::Train, &mut rand::rng());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn running_stats_update() {
        let mut p = init_head(&small(), 5, 3, 2).unwrap();
        let stats = BatchStats {
            mean: vec![1.0; 6],
            var: vec![2.0; 6],
        };
        p.update_running_stats(&stats, 4);
        assert!((p.running_mean.data()[0] - 0.1).abs() < 1e-15);
        // 0.9·1 + 0.1·(2·4/3)
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * 8.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = HeadConfig {
            dropout: 0.0,
            ..small()
        };
        for seed in 0..20 {
            let p = init_head(&cfg, 5, 3, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = Tensor::matrix(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let labels = [0, 2, 1, 2];
            // fc1's bias is cancelled by batchnorm, so its gradient is checked
            // separately as exactly zero
            let mut inputs = vec![x];
            inputs.extend(p.trainable().into_iter().cloned());
            inputs.remove(2);
            let err = grad_error(seed, &inputs, |tape, v| {
                let fc1_bias = tape.constant(p.fc1_bias.clone());
                let vars = HeadVars {
                    fc1_weight: v[1],
                    fc1_bias,
                    bn_gamma: v[2],
                    bn_beta: v[3],
                    fc2_weight: v[4],
                    fc2_bias: v[5],
                    out_weight: v[6],
                    out_bias: v[7],
                };
                let out = p
                    .forward_on_tape(tape, &vars, v[0], Mode::Train, &mut rand::rng())
                    .unwrap();
                tape.cross_entropy(out.logits, &labels).unwrap()
            });
            assert!(err < 1e-4, "seed {seed}: {err:e}");

            let mut tape = Tape::new();
            let vars = p.register(&mut tape, true);
            let xv = tape.constant(inputs[0].clone());
            let out = p.forward_on_tape(&mut tape, &vars, xv, Mode::Train, &mut rand::rng()).unwrap();
            let loss = tape.cross_entropy(out.logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(vars.fc1_bias).unwrap();
            assert!(g.data().iter().all(|v| v.abs() < 1e-12), "{g:?}");
        }
    }
}
