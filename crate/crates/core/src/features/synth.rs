//! Synthetic multi-speaker corpus for desk-scale experiments.
//!
//! A speaker is a fixed set of 3–5 harmonic base frequencies plus noise
//! shaped by two speaker-specific resonances. Utterances share the speaker's
//! frequencies but differ in length, phase, per-partial gain and the
//! on/off pattern of "syllables".

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AudioClip;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16000;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub base_freqs: Vec<f64>,
    /// (centre Hz, bandwidth Hz) of each noise resonance.
    pub formants: Vec<(f64, f64)>,
    pub noise_level: f64,
}

impl SpeakerProfile {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let count = rng.random_range(3..=5);
        let base_freqs = (0..count).map(|_| rng.random_range(100.0..1800.0)).collect();
        let formants = (0..2)
            .map(|_| (rng.random_range(300.0..3500.0), rng.random_range(80.0..300.0)))
            .collect();
        SpeakerProfile {
            base_freqs,
            formants,
            noise_level: rng.random_range(0.05..0.25),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledClip {
    pub speaker: String,
    pub label: usize,
    pub utterance: usize,
    pub clip: AudioClip,
}

impl LabeledClip {
    /// Relative path used when the corpus is written to disk.
    pub fn relative_path(&self) -> String {
        format!("{}/utt{:03}.wav", self.speaker, self.utterance)
    }
}

/// Utterance duration range in seconds.
#[derive(Clone, Copy, Debug)]
pub struct DurationRange {
    pub min_secs: f64,
    pub max_secs: f64,
}

impl Default for DurationRange {
    fn default() -> Self {
        DurationRange {
            min_secs: 1.0,
            max_secs: 4.0,
        }
    }
}

pub fn speaker_name(index: usize) -> String {
    format!("spk{index:03}")
}

/// Draws the speaker profiles for a seed; speaker `i` is identical across
/// calls with the same seed regardless of `n_speakers`.
pub fn speaker_profiles(n_speakers: usize, seed: u64) -> Vec<SpeakerProfile> {
    (0..n_speakers)
        .map(|s| SpeakerProfile::draw(&mut ChaCha8Rng::seed_from_u64(mix(seed, s as u64, u64::MAX))))
        .collect()
}

/// `n_speakers × utts_per_speaker` clips in speaker-major order.
pub fn synth_speaker_dataset(
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
) -> Result<Vec<LabeledClip>> {
    synth_with_durations(n_speakers, utts_per_speaker, seed, DurationRange::default())
}

pub fn synth_with_durations(
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
    durations: DurationRange,
) -> Result<Vec<LabeledClip>> {
    if n_speakers < 2 {
        return Err(Error::Config(format!(
            "need at least 2 speakers, got {n_speakers}"
        )));
    }
    if !(durations.min_secs > 0.0 && durations.max_secs >= durations.min_secs) {
        return Err(Error::Config("invalid utterance duration range".into()));
    }
    let profiles = speaker_profiles(n_speakers, seed);
    let mut out = Vec::with_capacity(n_speakers * utts_per_speaker);
    for (s, profile) in profiles.iter().enumerate() {
        for u in 0..utts_per_speaker {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, s as u64, u as u64));
            let secs = rng.random_range(durations.min_secs..=durations.max_secs);
            let samples = render(profile, (secs * SAMPLE_RATE as f64) as usize, &mut rng);
            out.push(LabeledClip {
                speaker: speaker_name(s),
                label: s,
                utterance: u,
                clip: AudioClip::new(samples, SAMPLE_RATE)?,
            });
        }
    }
    Ok(out)
}

fn render(profile: &SpeakerProfile, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let nyquist = sr / 2.0;

    // syllable envelope: alternating voiced stretches and short pauses
    let mut envelope = Vec::with_capacity(len);
    while envelope.len() < len {
        let voiced = rng.random_range(0.12..0.35) * sr;
        let level = rng.random_range(0.4..1.0);
        let attack = 0.02 * sr;
        for i in 0..voiced as usize {
            let t = i as f64;
            let ramp = (t / attack).min(1.0).min((voiced - t) / attack).max(0.0);
            envelope.push(level * ramp);
        }
        let pause = rng.random_range(0.02..0.12) * sr;
        envelope.extend(std::iter::repeat_n(0.0, pause as usize));
    }
    envelope.truncate(len);

    let mut out = vec![0.0; len];
    for &f0 in &profile.base_freqs {
        let gain = rng.random_range(0.5..1.0);
        for (h, amp) in [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25)] {
            let f = f0 * h;
            if f >= nyquist {
                continue;
            }
            let phase = rng.random_range(0.0..2.0 * PI);
            let step = 2.0 * PI * f / sr;
            for (i, o) in out.iter_mut().enumerate() {
                *o += gain * amp * (phase + step * i as f64).sin();
            }
        }
    }

    let white: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut noise = vec![0.0; len];
    for &(centre, bandwidth) in &profile.formants {
        for (n, v) in noise.iter_mut().zip(resonator(&white, centre, bandwidth, sr)) {
            *n += v;
        }
    }
    let noise_peak = noise.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let tone_peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for ((o, n), e) in out.iter_mut().zip(&noise).zip(&envelope) {
        *o = e * (*o / tone_peak + profile.noise_level * n / noise_peak);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.9 / peak;
        out.iter_mut().for_each(|v| *v = (*v * g) as f32 as f64);
    }
    out
}

/// Two-pole resonator with unit peak gain near `centre`.
fn resonator(input: &[f64], centre: f64, bandwidth: f64, sr: f64) -> Vec<f64> {
    let r = (-PI * bandwidth / sr).exp();
    let theta = 2.0 * PI * centre / sr;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let gain = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    input
        .iter()
        .map(|&x| {
            let y = gain * x + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

/// SplitMix64-style mixing of (seed, speaker, utterance) into a stream seed.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let a = synth_speaker_dataset(2, 3, 7).unwrap();
        let b = synth_speaker_dataset(2, 3, 7).unwrap();
        assert_eq!(a.len(), 6);
        let labels: std::collections::BTreeSet<_> = a.iter().map(|c| c.label).collect();
        assert_eq!(labels.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.speaker, y.speaker);
        }
        let c = synth_speaker_dataset(2, 3, 8).unwrap();
        assert_ne!(a[0].clip, c[0].clip);
    }

    #[test]
    fn durations_and_range() {
        for c in synth_speaker_dataset(3, 4, 1).unwrap() {
            let d = c.clip.duration_secs();
            assert!((1.0..=4.0).contains(&d), "{d}");
            assert!(c.clip.samples().iter().all(|s| s.abs() <= 0.9 + 1e-6));
        }
    }

    #[test]
    fn profiles_stable_and_distinct() {
        // same speaker keeps its frequencies however many speakers are drawn
        assert_eq!(speaker_profiles(2, 5)[1], speaker_profiles(9, 5)[1]);
        let mut collisions = 0;
        for seed in 0..100 {
            let p = speaker_profiles(2, seed);
            if p[0].base_freqs == p[1].base_freqs {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn needs_two_speakers() {
        assert!(matches!(synth_speaker_dataset(1, 3, 0), Err(Error::Config(_))));
    }
}
