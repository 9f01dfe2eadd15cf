//! Conformer encoder stack.
//!
//! Layer indexing: layer 0 is the feature-encoder output fed into the stack
//! (after masking, during pretraining), layers `1..=L` are the Conformer
//! block outputs.

mod attention;
mod block;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{relative_bias, SelfAttention};
pub use block::{BranchScales, ConformerBlock, ConvModule, FeedForward};

use crate::error::{Error, Result};
use crate::params::{join, Parameterized};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub relative_attention: bool,
    #[serde(default = "default_max_offset")]
    pub max_relative_offset: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

fn default_max_offset() -> usize {
    64
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    /// Desk-scale miniature: 8 layers, 4 heads, 64-d.
    fn default() -> Self {
        Self {
            num_layers: 8,
            num_heads: 4,
            model_dim: 64,
            ffn_expansion: 4,
            conv_kernel: 8,
            relative_attention: true,
            max_relative_offset: 64,
            dropout: 0.0,
            final_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be ≥ 1".into()));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ffn_expansion == 0 || self.conv_kernel == 0 {
            return Err(Error::Config("ffn_expansion and conv_kernel must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-layer outputs for one clip. `layers[0]` is the stack input,
/// `layers[l]` the output of block `l`; `attention[l - 1]` is block `l`'s
/// `H × T′ × T′` attention (empty unless captured).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack<T: Real> {
    pub layers: Vec<Array2<T>>,
    pub attention: Vec<Array3<T>>,
}

impl<T: Real> ActivationStack<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn last(&self) -> &Array2<T> {
        self.layers.last().unwrap()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConformerCache<T: Real> {
    blocks: Vec<block::BlockCache<T>>,
}

impl<T: Real> ConformerCache<T> {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conformer<T: Real> {
    pub blocks: Vec<ConformerBlock<T>>,
    pub dropout: f64,
}

impl<T: Real> Conformer<T> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            blocks: (0..cfg.num_layers).map(|_| ConformerBlock::new(rng, cfg)).collect(),
            dropout: cfg.dropout,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            dropout: self.dropout,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.blocks[0].scales.ffn_in.len()
    }

    /// Inference forward (no dropout, no cache).
    pub fn forward(&self, x: ArrayView2<T>, capture_attention: bool) -> Result<ActivationStack<T>> {
        self.run(x, capture_attention, None::<&mut rand_chacha::ChaCha8Rng>, false)
            .map(|(stack, _)| stack)
    }

    /// Forward that keeps the activations needed by [`Conformer::backward`].
    /// Dropout is applied when `rng` is given and the configured rate is > 0.
    pub fn forward_train<R: Rng>(
        &self,
        x: ArrayView2<T>,
        rng: Option<&mut R>,
    ) -> Result<(ActivationStack<T>, ConformerCache<T>)> {
        self.run(x, false, rng, true)
    }

    fn run<R: Rng>(
        &self,
        x: ArrayView2<T>,
        capture_attention: bool,
        mut rng: Option<&mut R>,
        keep: bool,
    ) -> Result<(ActivationStack<T>, ConformerCache<T>)> {
        if x.ncols() != self.model_dim() {
            return Err(Error::Shape(format!(
                "conformer expects {} channels, got {}",
                self.model_dim(),
                x.ncols()
            )));
        }
        let mut layers = Vec::with_capacity(self.blocks.len() + 1);
        let mut attention = Vec::new();
        let mut cache = ConformerCache::default();
        layers.push(x.to_owned());
        for (i, block) in self.blocks.iter().enumerate() {
            let dropout = rng.as_deref_mut().map(|r| (self.dropout, r));
            let (y, c) = block.forward(layers[i].view(), dropout);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: i + 1 });
            }
            if capture_attention {
                attention.push(c.attention_probs().clone());
            }
            if keep {
                cache.blocks.push(c);
            }
            layers.push(y);
        }
        Ok((ActivationStack { layers, attention }, cache))
    }

    /// Back-propagates a gradient on the last layer's output. Returns the
    /// gradient with respect to the stack input.
    pub fn backward(&self, cache: &ConformerCache<T>, dy: ArrayView2<T>, grad: &mut Self) -> Result<Array2<T>> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::MissingActivations);
        }
        let mut g = dy.to_owned();
        for i in (0..self.blocks.len()).rev() {
            g = self.blocks[i].backward(&cache.blocks[i], g.view(), &mut grad.blocks[i]);
        }
        Ok(g)
    }

    pub fn cast<U: Real>(&self) -> Conformer<U> {
        Conformer {
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            dropout: self.dropout,
        }
    }
}

impl<T: Real> Parameterized<T> for Conformer<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i + 1)), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", i + 1)), out);
        }
    }
}
