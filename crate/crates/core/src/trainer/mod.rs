//! Speaker-classification training: Adam, early stopping on validation
//! loss, and checkpoints of the best epoch.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    config_fingerprint, load_checkpoint, save_checkpoint, Checkpoint, Precision, FORMAT_VERSION, MAGIC,
};

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{mel_spectrogram, read_wav, FeatureConfig, Manifest, MelSpectrogram};
use crate::model::{dropout_rng, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Fraction of each speaker's utterances held out for validation.
    pub val_fraction: f64,
    /// Train on random windows of at most this many frames; validation
    /// always sees whole utterances.
    pub crop_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            patience: 5,
            batch_size: 32,
            max_epochs: 100,
            seed: 0,
            val_fraction: 0.1,
            crop_frames: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for batch normalization".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if let Some(c) = self.crop_frames {
            if c < crate::encoder::MIN_FRAMES {
                return Err(Error::Config(format!(
                    "crop_frames must be at least {}",
                    crate::encoder::MIN_FRAMES
                )));
            }
        }
        Ok(())
    }
}

/// A labelled training utterance.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub label: usize,
    pub spec: MelSpectrogram,
}

/// Early stopping on a loss that must strictly improve.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if !(loss < best) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.bad_epochs = 0;
                StopDecision::Improved
            }
        }
    }

    /// `(epoch, loss)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Train-mode accuracy over the epoch's batches.
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl fmt::Display for EpochLog {
    /// `epoch<TAB>train_loss<TAB>val_loss<TAB>val_acc`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.4}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Per speaker, `round(fraction · n)` utterances (at least one when the
/// speaker has two or more) go to validation. Returns `(train, val)`
/// indices, each sorted.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut members in by_class {
        members.shuffle(&mut rng);
        let n = members.len();
        let k = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        val.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Shuffled batches of `batch_size`; a trailing batch of one is merged into
/// its predecessor because batchnorm needs two rows.
pub fn make_batches<R: Rng + ?Sized>(indices: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Trains `model` as a speaker classifier and returns the checkpoint with
/// the lowest validation loss. `on_epoch` sees every epoch's log line.
pub fn train(
    mut model: Model,
    data: &[Utterance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_speakers = model.config.n_speakers;
    let present: std::collections::BTreeSet<usize> = data.iter().map(|u| u.label).collect();
    if present.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 speakers, found {}",
            present.len()
        )));
    }
    if let Some(&bad) = present.iter().find(|&&l| l >= n_speakers) {
        return Err(Error::Index {
            index: bad,
            classes: n_speakers,
        });
    }
    let labels: Vec<usize> = data.iter().map(|u| u.label).collect();
    let (train_idx, val_idx) = stratified_split(&labels, cfg.val_fraction, cfg.seed);
    if train_idx.len() < 2 || val_idx.is_empty() {
        return Err(Error::Config(
            "not enough utterances for a training set and a held-out validation split".into(),
        ));
    }
    let val: Vec<(&MelSpectrogram, usize)> = val_idx.iter().map(|&i| (&data[i].spec, data[i].label)).collect();

    let adam_cfg = cfg.adam();
    let mut adam = AdamState::new(&model.trainable());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = Checkpoint::new(model.clone(), 0, f64::INFINITY);
    let mut history = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5417));
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(&train_idx, cfg.batch_size, &mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let crops: Vec<MelSpectrogram>;
            let items: Vec<(&MelSpectrogram, usize)> = match cfg.crop_frames {
                Some(c) => {
                    crops = batch
                        .iter()
                        .map(|&i| random_crop(&data[i].spec, c, &mut shuffle_rng))
                        .collect::<Result<_>>()?;
                    crops.iter().zip(batch.iter().map(|&i| data[i].label)).collect()
                }
                None => batch.iter().map(|&i| (&data[i].spec, data[i].label)).collect(),
            };
            let mut rng = dropout_rng(cfg.seed, epoch, b);
            let step = model.batch_gradients(&items, &mut rng)?;
            let finite = step.loss.is_finite() && step.grads.iter().all(|g| g.all_finite());
            if !finite {
                return Err(Error::NumericFailure {
                    epoch,
                    batch: b + 1,
                    lr: cfg.lr,
                    detail: format!("batch loss {}", step.loss),
                });
            }
            adam_step(&mut model.trainable_mut(), &step.grads, &mut adam, &adam_cfg)?;
            model.update_running_stats(&step.batch_stats, items.len());
            loss_sum += step.loss * items.len() as f64;
            correct += step.correct;
            seen += items.len();
        }
        let (val_sum, val_correct) = model.evaluate(&val)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val_sum / val.len() as f64,
            val_acc: val_correct as f64 / val.len() as f64,
        };
        if !log.val_loss.is_finite() {
            return Err(Error::NumericFailure {
                epoch,
                batch: batches.len(),
                lr: cfg.lr,
                detail: format!("validation loss {}", log.val_loss),
            });
        }
        on_epoch(&log);
        let decision = stopper.observe(epoch, log.val_loss);
        history.push(log.clone());
        match decision {
            StopDecision::Improved => best = Checkpoint::new(model.clone(), epoch, log.val_loss),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        history,
        stopped_early,
    })
}

fn random_crop<R: Rng + ?Sized>(spec: &MelSpectrogram, frames: usize, rng: &mut R) -> Result<MelSpectrogram> {
    if spec.frames() <= frames {
        return Ok(spec.clone());
    }
    let start = rng.random_range(0..=spec.frames() - frames);
    spec.slice_frames(start, frames)
}

/// Reads and featurizes every manifest entry; labels index
/// [`Manifest::speakers`].
pub fn load_utterances(manifest: &Manifest, features: &FeatureConfig) -> Result<(Vec<Utterance>, Vec<String>)> {
    let speakers = manifest.speakers();
    let utts = manifest
        .entries
        .par_iter()
        .map(|e| {
            let clip = read_wav(&e.path).map_err(|err| match err {
                Error::Io(io) => Error::Io(std::io::Error::new(
                    io.kind(),
                    format!("{}: {io}", e.path.display()),
                )),
                other => other,
            })?;
            Ok(Utterance {
                id: e.utterance_id.clone(),
                label: speakers.binary_search(&e.speaker).expect("speaker listed"),
                spec: mel_spectrogram(&clip, features)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((utts, speakers))
}

/// Loads a manifest, sizes the classifier to its speakers and trains.
pub fn train_from_manifest(
    manifest: &Manifest,
    mut config: ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let speakers = manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 speakers, manifest has {}",
            speakers.len()
        )));
    }
    config.n_speakers = speakers.len();
    config.validate()?;
    cfg.validate()?;
    let (utts, _) = load_utterances(manifest, &config.features)?;
    let model = Model::new(config, cfg.seed)?;
    train(model, &utts, cfg, on_epoch)
}
