use std::io::Read;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM16 or float32 RIFF/WAVE file; multi-channel audio is averaged
/// down to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let file = std::fs::File::open(path.as_ref())?;
    decode_wav(std::io::BufReader::new(file))
}

pub fn decode_wav<R: Read>(reader: R) -> Result<AudioClip> {
    let reader = WavReader::new(reader).map_err(map_decode)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Parse("WAV header declares zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_decode)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(map_decode)?,
        (format, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {format:?} samples; only PCM16 and float32 are supported"
            )))
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Parse("sample count is not a whole number of frames".into()));
    }
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono float32 WAV, which round-trips `f32`-representable samples
/// exactly.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in &clip.samples {
        writer.write_sample(s as f32).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

/// While decoding an already-open stream, a short read means the file is
/// truncated rather than that the device failed.
fn map_decode(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Parse(format!("truncated WAV data: {io}")),
        other => map_hound(other),
    }
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedFormat("WAV codec not supported".into()),
        other => Error::Parse(other.to_string()),
    }
}
