use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;

use mhapool::eval::{
    det_curve, load_trials, make_trials, score_trials, trials_to_text, DcfParams, EmbeddingTable, MetricsReport,
};
use mhapool::features::{read_wav, synth_speaker_dataset, write_wav, Manifest, ManifestEntry};
use mhapool::pooling::PoolingKind;
use mhapool::trainer::{load_checkpoint, save_checkpoint, train_from_manifest};
use mhapool::{Error, Result};

use crate::config::RunConfig;
use crate::with_path;

#[derive(Args)]
pub struct SynthArgs {
    /// Number of speakers (at least 2)
    #[arg(long)]
    pub speakers: usize,
    /// Training utterances per speaker, listed in manifest.tsv
    #[arg(long)]
    pub utts: usize,
    /// Extra held-out utterances per speaker, listed in eval_manifest.tsv
    #[arg(long, default_value_t = 0)]
    pub eval_utts: usize,
    /// Verification trials drawn from the held-out utterances
    #[arg(long, default_value_t = 1500)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest (`speaker<TAB>wav_path` lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log; defaults to the checkpoint path with a .log extension
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override pooling.kind
    #[arg(long)]
    pub pooling: Option<PoolingKind>,
    /// Override pooling.heads
    #[arg(long)]
    pub heads: Option<usize>,
    /// Override encoder.channels, e.g. 4,8,16
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub channels: Option<Vec<usize>>,
    /// Override train.lr
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override train.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override train.max_epochs
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Override train.patience
    #[arg(long)]
    pub patience: Option<usize>,
    /// Override train.crop_frames
    #[arg(long)]
    pub crop_frames: Option<usize>,
    /// Override train.seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Embedding table (CSV: utterance id, then one column per dimension)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trial list (`label enroll_id test_id` lines, label 1 or 0)
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// False-alarm cost
    #[arg(long, default_value_t = 1.0)]
    pub dcf_cfa: f64,
    /// Miss cost
    #[arg(long, default_value_t = 1.0)]
    pub dcf_cm: f64,
    /// Target prior
    #[arg(long, default_value_t = 0.01)]
    pub dcf_pt: f64,
    /// Divide minDCF by the cost of the best trivial decision
    #[arg(long)]
    pub normalized: bool,
    /// Write the DET curve as CSV
    #[arg(long)]
    pub det: Option<PathBuf>,
    /// Print the report as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Checkpoint of an mha-pooling model
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    /// CSV with one row per head and a final cumulative row
    #[arg(long)]
    pub out: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| with_path(path, e.into()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| with_path(path, e.into()))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.utts == 0 {
        return Err(Error::Config("--utts must be at least 1".into()));
    }
    let clips = synth_speaker_dataset(a.speakers, a.utts + a.eval_utts, a.seed)?;
    create_dir(&a.out)?;
    clips.par_iter().try_for_each(|c| {
        let path = a.out.join(c.relative_path());
        create_dir(path.parent().expect("clip paths have a speaker directory"))?;
        write_wav(&path, &c.clip).map_err(|e| with_path(&path, e))
    })?;
    let entry = |c: &mhapool::features::LabeledClip| ManifestEntry {
        speaker: c.speaker.clone(),
        utterance_id: c.relative_path(),
        path: a.out.join(c.relative_path()),
    };
    let (train, held): (Vec<_>, Vec<_>) = clips.iter().partition(|c| c.utterance < a.utts);
    let manifest = Manifest {
        entries: train.iter().map(|c| entry(c)).collect(),
    };
    write(&a.out.join("manifest.tsv"), manifest.to_text())?;
    println!("wrote {} wavs for {} speakers to {}", clips.len(), a.speakers, a.out.display());
    if !held.is_empty() {
        let eval = Manifest {
            entries: held.iter().map(|c| entry(c)).collect(),
        };
        write(&a.out.join("eval_manifest.tsv"), eval.to_text())?;
        let ids: Vec<(String, String)> = held.iter().map(|c| (c.speaker.clone(), c.relative_path())).collect();
        let trials = make_trials(&ids, a.trials, a.seed);
        write(&a.out.join("trials.txt"), trials_to_text(&trials))?;
        println!("{} held-out utterances, {} trials", held.len(), trials.len());
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let m = Manifest::load(path).map_err(|e| with_path(path, e))?;
    if m.entries.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no utterances", path.display())));
    }
    Ok(m)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(k) = a.pooling {
        cfg.pooling.kind = k;
    }
    if let Some(h) = a.heads {
        cfg.pooling.heads = h;
    }
    if let Some(c) = &a.channels {
        cfg.encoder.channels = [c[0], c[1], c[2]];
    }
    let t = &mut cfg.train;
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.max_epochs = a.max_epochs.unwrap_or(t.max_epochs);
    t.patience = a.patience.unwrap_or(t.patience);
    t.seed = a.seed.unwrap_or(t.seed);
    if a.crop_frames.is_some() {
        t.crop_frames = a.crop_frames;
    }
    cfg.validate()?;

    let manifest = load_manifest(&a.manifest)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log"));
    let mut log = fs::File::create(&log_path).map_err(|e| with_path(&log_path, e.into()))?;
    writeln!(log, "epoch\ttrain_loss\tval_loss\tval_acc")?;
    let mut log_err = None;
    let outcome = train_from_manifest(&manifest, cfg.model_config(0), &cfg.train, |line| {
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
            line.epoch, line.train_loss, line.train_acc, line.val_loss, line.val_acc
        );
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(with_path(&log_path, e.into()));
    }
    save_checkpoint(&a.out, &outcome.checkpoint).map_err(|e| with_path(&a.out, e))?;
    write(&a.out.with_extension("toml"), cfg.to_toml())?;
    println!(
        "best epoch {} of {} (val loss {:.4}{}); checkpoint {}",
        outcome.checkpoint.epoch,
        outcome.history.len(),
        outcome.checkpoint.best_val_loss,
        if outcome.stopped_early { ", stopped early" } else { "" },
        a.out.display()
    );
    Ok(())
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt).map_err(|e| with_path(&a.ckpt, e))?.model;
    let manifest = load_manifest(&a.manifest)?;
    let rows = manifest
        .entries
        .par_iter()
        .map(|e| {
            let clip = read_wav(&e.path).map_err(|err| with_path(&e.path, err))?;
            Ok((e.utterance_id.clone(), model.extract_embedding(&clip)?.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = EmbeddingTable::new();
    for (id, v) in rows {
        table.insert(id, v)?;
    }
    table.save(&a.out).map_err(|e| with_path(&a.out, e))?;
    println!("wrote {} embeddings of dimension {} to {}", table.len(), model.config.head.embedding, a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let trials = load_trials(&a.trials).map_err(|e| with_path(&a.trials, e))?;
    let table = EmbeddingTable::load(&a.embeddings).map_err(|e| with_path(&a.embeddings, e))?;
    let scores = score_trials(&trials, &table)?;
    let dcf = DcfParams {
        c_fa: a.dcf_cfa,
        c_miss: a.dcf_cm,
        p_target: a.dcf_pt,
    };
    dcf.validate()?;
    let report = MetricsReport::compute(&scores, &dcf, a.normalized)?;
    if let Some(path) = &a.det {
        write(path, det_curve(&scores)?.to_csv())?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

pub fn inspect_attention(a: InspectArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt).map_err(|e| with_path(&a.ckpt, e))?.model;
    let clip = read_wav(&a.wav).map_err(|e| with_path(&a.wav, e))?;
    let inspection = model.inspect_attention(&model.spectrogram(&clip)?)?;
    write(&a.out, inspection.to_csv())?;
    println!(
        "{} heads over {} frames written to {}",
        inspection.weights.heads(),
        inspection.weights.len(),
        a.out.display()
    );
    Ok(())
}
