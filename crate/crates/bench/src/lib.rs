//! Deterministic inputs for the kernel benchmarks.

use mhapool::encoder::EncodedSequence;
use mhapool::features::{MelSpectrogram, N_MELS};
use mhapool::Tensor;

/// Low-discrepancy values in `[-1, 1)`; cheap and reproducible without an RNG.
pub fn values(n: usize, offset: usize) -> Vec<f64> {
    const PHI: f64 = 0.618_033_988_749_894_9;
    (0..n).map(|i| 2.0 * (((i + offset) as f64 * PHI).fract()) - 1.0).collect()
}

pub fn tensor(shape: &[usize], offset: usize) -> Tensor {
    Tensor::new(shape.to_vec(), values(shape.iter().product(), offset)).expect("shape matches data")
}

pub fn spectrogram(frames: usize) -> MelSpectrogram {
    MelSpectrogram::new(frames, values(N_MELS * frames, 7)).expect("frames > 0")
}

pub fn sequence(d: usize, t: usize) -> EncodedSequence {
    EncodedSequence::new(d, t, values(d * t, 3)).expect("non-empty")
}
