//! VGG-style CNN encoder.
//!
//! Three blocks of `[conv3x3, relu, conv3x3, relu, maxpool2x2]` turn a
//! `128 × N` spectrogram into `C3 × 16 × ⌊⌊⌊N/2⌋/2⌋/2⌋` feature maps, which
//! are flattened channel-major (index `c·16 + f`) into a `d × T` sequence
//! with `d = 16·C3`. With the default channels `(128, 256, 512)`, `d = 8192`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{MelSpectrogram, N_MELS};

/// Shortest spectrogram that survives three 2×2 poolings.
pub const MIN_FRAMES: usize = 8;

/// Frequency bins left after the three poolings.
pub const OUTPUT_BINS: usize = N_MELS / 8;

pub const LAYER_NAMES: [&str; 6] = ["conv11", "conv12", "conv21", "conv22", "conv31", "conv32"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of blocks 1, 2 and 3.
    pub channels: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [128, 256, 512],
        }
    }
}

impl EncoderConfig {
    /// Uniformly shrunk channels for tests and desk-scale runs.
    pub fn scaled_down(factor: usize) -> Self {
        let c = Self::default().channels;
        EncoderConfig {
            channels: [c[0] / factor, c[1] / factor, c[2] / factor],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder channels must be positive, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.channels[2] * OUTPUT_BINS
    }

    /// `(cin, cout)` of each conv layer in order.
    pub fn conv_dims(&self) -> [(usize, usize); 6] {
        let [c1, c2, c3] = self.channels;
        [(1, c1), (c1, c1), (c1, c2), (c2, c2), (c2, c3), (c3, c3)]
    }
}

/// Encoded length `⌊⌊⌊N/2⌋/2⌋/2⌋`.
pub fn output_len(frames: usize) -> usize {
    frames / 2 / 2 / 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[cout, cin, 3, 3]`
    pub kernel: Tensor,
    /// `[cout]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer>,
}

/// He-uniform kernels in `±√(6/fan_in)` with `fan_in = 9·cin`; zero biases.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = cfg
        .conv_dims()
        .iter()
        .map(|&(cin, cout)| {
            let bound = (6.0 / (9 * cin) as f64).sqrt();
            let data = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
            ConvLayer {
                kernel: Tensor::new(vec![cout, cin, 3, 3], data).expect("positive dims"),
                bias: Tensor::zeros(vec![cout]),
            }
        })
        .collect();
    Ok(EncoderParams {
        config: cfg.clone(),
        layers,
    })
}

/// The `d × T` matrix of encoder states; column `t` is `h_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    values: Tensor,
}

impl EncodedSequence {
    /// Row-major `d × T` data.
    pub fn new(dim: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyInput("encoded sequence has no time steps".into()));
        }
        Ok(EncodedSequence {
            values: Tensor::new(vec![dim, len], data)?,
        })
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let len = columns.len();
        let dim = columns.first().map_or(0, Vec::len);
        if len == 0 {
            return Err(Error::EmptyInput("encoded sequence has no time steps".into()));
        }
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::Shape("columns differ in length".into()));
        }
        let data = (0..dim)
            .flat_map(|i| columns.iter().map(move |c| c[i]))
            .collect();
        Self::new(dim, len, data)
    }

    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Shape(format!(
                "encoded sequence must be [d, T], got {:?}",
                values.shape()
            )));
        }
        Ok(EncodedSequence { values })
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn at(&self, i: usize, t: usize) -> f64 {
        self.values.data()[i * self.len() + t]
    }

    /// Time series of feature `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let t = self.len();
        &self.values.data()[i * t..(i + 1) * t]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.at(i, t)).collect()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// Reorders time steps: column `t` of the result is column `order[t]`.
    pub fn permute_time(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::Shape("permutation length differs from T".into()));
        }
        let data = (0..self.dim())
            .flat_map(|i| order.iter().map(move |&t| self.at(i, t)))
            .collect();
        Self::new(self.dim(), self.len(), data)
    }
}

/// Encoder parameters registered on a tape.
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
}

impl EncoderParams {
    /// Registers the parameters as trainable leaves (`trainable`) or constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.kernel.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.kernel.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        EncoderVars { layers }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }
}

/// Shape of one intermediate map: channels × frequency × time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub channels: usize,
    pub freq: usize,
    pub time: usize,
}

/// Runs the encoder on `x: [1, 128, N]`, returning the `[d, T]` output and
/// the shape after every layer.
pub fn encode_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    x: Var,
) -> Result<(Var, Vec<LayerShape>)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != 1 || s[1] != N_MELS {
        return Err(Error::Shape(format!(
            "encoder input must be [1, {N_MELS}, N], got {s:?}"
        )));
    }
    if s[2] < MIN_FRAMES {
        return Err(Error::TooShort(format!(
            "spectrogram has {} frames; the encoder needs at least {MIN_FRAMES}",
            s[2]
        )));
    }
    if vars.layers.len() != 6 {
        return Err(Error::Config("encoder needs exactly six conv layers".into()));
    }
    const POOL_NAMES: [&str; 3] = ["mpool1", "mpool2", "mpool3"];
    let mut trace = Vec::with_capacity(10);
    let mut record = |tape: &Tape, name: &'static str, v: Var| {
        let s = tape.shape(v);
        trace.push(LayerShape {
            name,
            channels: s[0],
            freq: s[1],
            time: s[2],
        });
    };
    let mut h = x;
    for block in 0..3 {
        for layer in [2 * block, 2 * block + 1] {
            let (k, b) = vars.layers[layer];
            let c = tape.conv2d(h, k, b)?;
            h = tape.relu(c);
            record(tape, LAYER_NAMES[layer], h);
        }
        h = tape.maxpool2d(h)?;
        record(tape, POOL_NAMES[block], h);
    }
    let s = tape.shape(h).to_vec();
    let flat = tape.reshape(h, vec![s[0] * s[1], s[2]])?;
    trace.push(LayerShape {
        name: "flatten",
        channels: s[0] * s[1],
        freq: 1,
        time: s[2],
    });
    Ok((flat, trace))
}

/// Inference-only encoding of one spectrogram.
pub fn encode(spec: &MelSpectrogram, params: &EncoderParams) -> Result<EncodedSequence> {
    encode_traced(spec, params).map(|(seq, _)| seq)
}

pub fn encode_traced(
    spec: &MelSpectrogram,
    params: &EncoderParams,
) -> Result<(EncodedSequence, Vec<LayerShape>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(spec.to_tensor());
    let (out, trace) = encode_on_tape(&mut tape, &vars, x)?;
    let seq = EncodedSequence::from_tensor(tape.value(out).clone())?;
    Ok((seq, trace))
}
