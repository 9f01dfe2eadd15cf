//! The full speech encoder: feature encoder, Conformer stack and the
//! pretraining heads (mask embedding, target projection, context head).

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformer::{ActivationStack, Conformer, EncoderConfig};
use crate::error::{Error, Result};
use crate::featenc::{FeatEncConfig, FeatureEncoder};
use crate::frontend::{MelSpectrogram, DEFAULT_MEL_BINS};
use crate::nn::Linear;
use crate::params::{join, push, push_mut, Parameterized};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(default = "default_mel_bins")]
    pub mel_bins: usize,
    pub featenc: FeatEncConfig,
    pub encoder: EncoderConfig,
}

fn default_mel_bins() -> usize {
    DEFAULT_MEL_BINS
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            mel_bins: DEFAULT_MEL_BINS,
            featenc: FeatEncConfig::new(encoder.model_dim),
            encoder,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.featenc.validate()?;
        self.encoder.validate()?;
        if self.featenc.output_dim() != self.encoder.model_dim {
            return Err(Error::Config(format!(
                "feature encoder output {} != model dim {}",
                self.featenc.output_dim(),
                self.encoder.model_dim
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T: Real> {
    pub config: ModelConfig,
    pub featenc: FeatureEncoder<T>,
    pub conformer: Conformer<T>,
    pub mask_embedding: Array1<T>,
    pub target_proj: Linear<T>,
    pub context_head: Linear<T>,
}

impl<T: Real> EncoderModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.encoder.model_dim;
        let featenc = FeatureEncoder::new(&mut rng, &config.featenc, config.mel_bins)?;
        let conformer = Conformer::new(&mut rng, &config.encoder)?;
        let mask_embedding = Array1::from_shape_simple_fn(d, || T::lit(rng.gen_range(-0.5..0.5)));
        Ok(Self {
            config: config.clone(),
            featenc,
            conformer,
            mask_embedding,
            target_proj: Linear::new(&mut rng, d, d),
            context_head: Linear::new(&mut rng, d, d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.mask_embedding.len();
        Self {
            config: self.config.clone(),
            featenc: self.featenc.zeros_like(),
            conformer: self.conformer.zeros_like(),
            mask_embedding: Array1::zeros(d),
            target_proj: Linear::zeros(d, d),
            context_head: Linear::zeros(d, d),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.mask_embedding.len()
    }

    pub fn num_layers(&self) -> usize {
        self.conformer.blocks.len()
    }

    /// Mel frames → per-layer activations (layer 0 = encoded features).
    pub fn encode_frames(&self, mel: ArrayView2<T>, capture_attention: bool) -> Result<ActivationStack<T>> {
        let feats = self.featenc.encode(mel)?;
        if feats.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: 0 });
        }
        self.conformer.forward(feats.frames.view(), capture_attention)
    }

    pub fn encode(&self, mel: &MelSpectrogram, capture_attention: bool) -> Result<ActivationStack<T>> {
        let frames: Array2<T> = mel.frames.mapv(|v| T::lit(v as f64));
        self.encode_frames(frames.view(), capture_attention)
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            featenc: self.featenc.cast(),
            conformer: self.conformer.cast(),
            mask_embedding: crate::nn::cast1(&self.mask_embedding),
            target_proj: self.target_proj.cast(),
            context_head: self.context_head.cast(),
        }
    }
}

impl<T: Real> Parameterized<T> for EncoderModel<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.featenc.visit(&join(prefix, "featenc"), out);
        self.conformer.visit(&join(prefix, "conformer"), out);
        push(out, prefix, "mask_embedding", &self.mask_embedding);
        self.target_proj.visit(&join(prefix, "target_proj"), out);
        self.context_head.visit(&join(prefix, "context_head"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.featenc.visit_mut(&join(prefix, "featenc"), out);
        self.conformer.visit_mut(&join(prefix, "conformer"), out);
        push_mut(out, prefix, "mask_embedding", &mut self.mask_embedding);
        self.target_proj.visit_mut(&join(prefix, "target_proj"), out);
        self.context_head.visit_mut(&join(prefix, "context_head"), out);
    }
}
