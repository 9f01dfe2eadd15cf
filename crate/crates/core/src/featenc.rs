//! Three-layer strided 1-D convolutional feature encoder: 100 Hz log-mel
//! frames in, 25 Hz encoded features out.
//!
//! Convolutions use same-padding (output length `ceil(T / stride)`, kernel
//! centred on `t · stride`) with edge replication at the borders, so a
//! time-constant input stays time-constant.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{swish, swish_grad, uniform};
use crate::params::{join, push, push_mut, Parameterized};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Swish,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Swish => swish(x),
            Activation::Identity => x,
        }
    }

    fn grad<T: Real>(self, x: T) -> T {
        match self {
            Activation::Swish => swish_grad(x),
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatEncConfig {
    pub kernels: [usize; 3],
    pub strides: [usize; 3],
    /// Output channels per layer; the last entry is the encoder model dim.
    pub channels: [usize; 3],
    #[serde(default)]
    pub activation: Activation,
}

impl FeatEncConfig {
    pub fn new(model_dim: usize) -> Self {
        Self {
            kernels: [3, 3, 3],
            strides: [2, 2, 1],
            channels: [model_dim, model_dim, model_dim],
            activation: Activation::Swish,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        let twos = self.strides.iter().filter(|&&s| s == 2).count();
        let ones = self.strides.iter().filter(|&&s| s == 1).count();
        if twos != 2 || ones != 1 {
            return Err(Error::Config(format!(
                "feature encoder strides must be two 2s and one 1, got {:?}",
                self.strides
            )));
        }
        if self.kernels.iter().any(|&k| k == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "feature encoder kernels and channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Encoded length for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        self.strides.iter().fold(frames, |t, &s| t.div_ceil(s))
    }
}

/// Strided 1-D convolution over time.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T: Real> {
    /// `(kernel · in) × out`; row `tap · in + c` holds input channel `c` at `tap`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize, kernel: usize, stride: usize) -> Self {
        let bound = (1.0 / (input * kernel) as f64).sqrt();
        Self {
            weight: uniform(rng, (kernel * input, output), bound),
            bias: Array1::zeros(output),
            kernel,
            stride,
        }
    }

    pub fn zeros(input: usize, output: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: Array2::zeros((kernel * input, output)),
            bias: Array1::zeros(output),
            kernel,
            stride,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows() / self.kernel
    }

    fn source_index(&self, t_out: usize, tap: usize, len: usize) -> usize {
        let left = (self.kernel - 1) / 2;
        let pos = (t_out * self.stride + tap) as isize - left as isize;
        pos.clamp(0, len as isize - 1) as usize
    }

    fn im2col(&self, x: ArrayView2<T>) -> Array2<T> {
        let (len, cin) = x.dim();
        let out_len = len.div_ceil(self.stride);
        let mut cols = Array2::zeros((out_len, self.kernel * cin));
        for t in 0..out_len {
            for tap in 0..self.kernel {
                let src = self.source_index(t, tap, len);
                cols.slice_mut(ndarray::s![t, tap * cin..(tap + 1) * cin])
                    .assign(&x.row(src));
            }
        }
        cols
    }

    fn forward_cols(&self, cols: &Array2<T>) -> Array2<T> {
        let mut y = cols.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward_cols(&self, cols: &Array2<T>, dy: ArrayView2<T>, len: usize, grad: &mut Self) -> Array2<T> {
        general_mat_mul(T::one(), &cols.t(), &dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.weight.t());
        let cin = self.input_dim();
        let mut dx = Array2::zeros((len, cin));
        for t in 0..dcols.nrows() {
            for tap in 0..self.kernel {
                let src = self.source_index(t, tap, len);
                let g = dcols.slice(ndarray::s![t, tap * cin..(tap + 1) * cin]);
                let mut row = dx.row_mut(src);
                row += &g;
            }
        }
        dx
    }

    pub fn cast<U: Real>(&self) -> Conv1d<U> {
        Conv1d {
            weight: crate::nn::cast2(&self.weight),
            bias: crate::nn::cast1(&self.bias),
            kernel: self.kernel,
            stride: self.stride,
        }
    }
}

impl<T: Real> Parameterized<T> for Conv1d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        push(out, prefix, "weight", &self.weight);
        push(out, prefix, "bias", &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        push_mut(out, prefix, "weight", &mut self.weight);
        push_mut(out, prefix, "bias", &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder<T: Real> {
    pub layers: Vec<Conv1d<T>>,
    pub activation: Activation,
}

/// Per-layer activations kept for the backward pass. An empty cache (from
/// an inference-only forward) cannot be used for backward.
#[derive(Debug, Clone, Default)]
pub struct FeatEncCache<T: Real> {
    input_len: Vec<usize>,
    cols: Vec<Array2<T>>,
    pre_activation: Vec<Array2<T>>,
}

impl<T: Real> FeatEncCache<T> {
    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }
}

/// 25 Hz encoder output, `T′ × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures<T: Real> {
    pub frames: Array2<T>,
    pub frame_period: f64,
}

pub const ENCODED_FRAME_PERIOD: f64 = 0.040;

impl<T: Real> FeatureEncoder<T> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &FeatEncConfig, mel_bins: usize) -> Result<Self> {
        cfg.validate()?;
        let mut input = mel_bins;
        let layers = (0..3)
            .map(|i| {
                let layer = Conv1d::new(rng, input, cfg.channels[i], cfg.kernels[i], cfg.strides[i]);
                input = cfg.channels[i];
                layer
            })
            .collect();
        Ok(Self {
            layers,
            activation: cfg.activation,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Conv1d::zeros(l.input_dim(), l.bias.len(), l.kernel, l.stride))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.nrows() < 4 {
            return Err(Error::TooFewFrames(x.nrows()));
        }
        if x.ncols() != self.layers[0].input_dim() {
            return Err(Error::Shape(format!(
                "feature encoder expects {} mel bins, got {}",
                self.layers[0].input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Inference-only forward.
    pub fn encode(&self, x: ArrayView2<T>) -> Result<EncodedFeatures<T>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            let cols = layer.im2col(h.view());
            h = layer.forward_cols(&cols).mapv(|v| self.activation.apply(v));
        }
        Ok(EncodedFeatures {
            frames: h,
            frame_period: ENCODED_FRAME_PERIOD,
        })
    }

    /// Forward pass that keeps what `backward` needs.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<(Array2<T>, FeatEncCache<T>)> {
        self.check_input(&x)?;
        let mut cache = FeatEncCache::default();
        let mut h = x.to_owned();
        for layer in &self.layers {
            cache.input_len.push(h.nrows());
            let cols = layer.im2col(h.view());
            let z = layer.forward_cols(&cols);
            h = z.mapv(|v| self.activation.apply(v));
            cache.cols.push(cols);
            cache.pre_activation.push(z);
        }
        Ok((h, cache))
    }

    /// Accumulates parameter gradients into `grad`, returns d(input).
    pub fn backward(&self, cache: &FeatEncCache<T>, dy: ArrayView2<T>, grad: &mut Self) -> Result<Array2<T>> {
        if cache.cols.len() != self.layers.len() {
            return Err(Error::MissingActivations);
        }
        let last = cache.pre_activation.last().unwrap();
        if last.dim() != dy.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                dy.dim(),
                last.dim()
            )));
        }
        let mut g = dy.to_owned();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation;
            ndarray::Zip::from(&mut g)
                .and(&cache.pre_activation[i])
                .for_each(|gv, &z| *gv *= act.grad(z));
            g = self.layers[i].backward_cols(&cache.cols[i], g.view(), cache.input_len[i], &mut grad.layers[i]);
        }
        Ok(g)
    }

    pub fn cast<U: Real>(&self) -> FeatureEncoder<U> {
        FeatureEncoder {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            activation: self.activation,
        }
    }
}

impl<T: Real> Parameterized<T> for FeatureEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{i}")), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(mel: usize, dim: usize, act: Activation) -> FeatureEncoder<f64> {
        let mut cfg = FeatEncConfig::new(dim);
        cfg.activation = act;
        FeatureEncoder::new(&mut ChaCha8Rng::seed_from_u64(3), &cfg, mel).unwrap()
    }

    #[test]
    fn output_lengths() {
        let cfg = FeatEncConfig::new(8);
        assert_eq!(cfg.output_len(400), 100);
        assert_eq!(cfg.output_len(398), 100);
        assert_eq!(cfg.output_len(7), 2);
        let enc = encoder(8, 8, Activation::Swish);
        for t in 4..40 {
            let x = Array2::from_elem((t, 8), 0.3);
            assert_eq!(enc.encode(x.view()).unwrap().frames.nrows(), t.div_ceil(2).div_ceil(2));
        }
    }

    #[test]
    fn rejects_short_input_and_bad_strides() {
        let enc = encoder(8, 8, Activation::Swish);
        let err = enc.encode(Array2::zeros((3, 8)).view()).unwrap_err();
        assert!(err.to_string().contains("too few frames for subsampling"));
        let mut cfg = FeatEncConfig::new(8);
        cfg.strides = [2, 2, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_cache_is_an_error() {
        let enc = encoder(8, 8, Activation::Swish);
        let mut grad = enc.zeros_like();
        let err = enc
            .backward(&FeatEncCache::default(), Array2::zeros((3, 8)).view(), &mut grad)
            .unwrap_err();
        assert!(matches!(err, Error::MissingActivations));
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let enc = encoder(8, 8, Activation::Swish);
        let y = enc.encode(Array2::from_elem((37, 8), -1.25).view()).unwrap().frames;
        for row in y.rows() {
            for (a, b) in row.iter().zip(y.row(0).iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let enc = encoder(8, 8, Activation::Swish);
        let x = uniform::<f64, _>(&mut ChaCha8Rng::seed_from_u64(9), (12, 8), 1.0);
        let (y, cache) = enc.forward(x.view()).unwrap();
        let mut grad = enc.zeros_like();
        enc.backward(&cache, Array2::zeros(y.dim()).view(), &mut grad).unwrap();
        assert_eq!(grad.squared_norm(), 0.0);
    }
}
