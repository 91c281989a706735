//! Audio front-end: WAV I/O, log-mel spectrograms, manifests and the
//! synthetic speaker corpus.

mod manifest;
mod mel;
pub mod synth;
mod wav;

pub use manifest::{Manifest, ManifestEntry};
pub use mel::{
    hz_to_mel, mel_spectrogram, mel_to_hz, FeatureConfig, MelExtractor, MelFilterbank,
    MelSpectrogram, N_MELS,
};
pub use synth::{synth_speaker_dataset, LabeledClip};
pub use wav::{decode_wav, read_wav, write_wav, AudioClip};
