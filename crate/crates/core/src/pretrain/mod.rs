//! Masked contrastive pretraining.
//!
//! Encoded features are masked with a learned embedding before the
//! Conformer; the context head's outputs at masked frames must pick out the
//! linear projection of the unmasked encoded feature at the same frame from
//! distractors taken at other masked frames of the same clip.

mod checkpoint;
mod gradcheck;
mod loss;
mod mask;
mod optim;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use gradcheck::{check_gradients, GroupCheck};
pub use loss::{contrastive_loss, contrastive_loss_with_grad, cosine, sample_distractors, ContrastiveBatchLoss};
pub use mask::{sample_mask, MaskConfig, MaskPlan};
pub use optim::{Adam, OptimizerConfig};

use crate::error::{Error, Result};
use crate::model::{hex_digest, EncoderModel, ModelConfig};
use crate::params::Parameterized;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub num_distractors: usize,
    pub temperature: f64,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            num_distractors: 10,
            temperature: 0.1,
            mask: MaskConfig::default(),
            optimizer: OptimizerConfig::default(),
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if self.batch_size == 0 || self.num_distractors == 0 {
            return Err(Error::Config("batch_size and num_distractors must be ≥ 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.optimizer.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Fingerprint of everything that determines a training run.
    pub fn fingerprint(&self, model: &ModelConfig) -> String {
        let json = serde_json::to_string(&(model, self)).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

/// Everything random about one clip's contribution to a step.
#[derive(Debug, Clone)]
pub struct ClipPlan {
    pub mask: MaskPlan,
    pub distractors: Vec<Vec<usize>>,
    pub reduced: usize,
    pub dropout_seed: u64,
}

impl ClipPlan {
    pub fn sample<R: Rng>(encoded_len: usize, cfg: &PretrainConfig, rng: &mut R) -> Result<Self> {
        let mask = sample_mask(encoded_len, &cfg.mask, rng)?;
        let (distractors, reduced) = sample_distractors(mask.masked.len(), cfg.num_distractors, rng);
        Ok(Self {
            mask,
            distractors,
            reduced,
            dropout_seed: rng.gen(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClipStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub positions: usize,
}

fn gather<T: Real>(x: &Array2<T>, rows: &[usize]) -> Array2<T> {
    x.select(Axis(0), rows)
}

/// Contrastive loss of one clip (mean over its masked positions), forward
/// only and without dropout. Used for finite-difference checks.
pub fn clip_objective<T: Real>(
    model: &EncoderModel<T>,
    mel: ArrayView2<T>,
    plan: &ClipPlan,
    temperature: f64,
) -> Result<ContrastiveBatchLoss> {
    let feats = model.featenc.encode(mel)?.frames;
    let targets = model.target_proj.forward(feats.view());
    let mut input = feats;
    for &i in &plan.mask.masked {
        input.row_mut(i).assign(&model.mask_embedding);
    }
    let stack = model.conformer.forward(input.view(), false)?;
    let out_m = gather(stack.last(), &plan.mask.masked);
    let ctx = model.context_head.forward(out_m.view());
    let tgt = gather(&targets, &plan.mask.masked);
    contrastive_loss(ctx.view(), tgt.view(), &plan.distractors, temperature)
}

/// Accumulates into `grad` the gradient of `scale · Σ_positions loss` for
/// one clip.
pub fn clip_gradient<T: Real>(
    model: &EncoderModel<T>,
    mel: ArrayView2<T>,
    plan: &ClipPlan,
    temperature: f64,
    scale: T,
    grad: &mut EncoderModel<T>,
) -> Result<ClipStats> {
    let (feats, fcache) = model.featenc.forward(mel)?;
    let targets = model.target_proj.forward(feats.view());
    let mut input = feats.clone();
    for &i in &plan.mask.masked {
        input.row_mut(i).assign(&model.mask_embedding);
    }
    let mut drng = ChaCha8Rng::seed_from_u64(plan.dropout_seed);
    let (stack, ccache) = model.conformer.forward_train(input.view(), Some(&mut drng))?;
    let masked = &plan.mask.masked;
    let out_m = gather(stack.last(), masked);
    let ctx = model.context_head.forward(out_m.view());
    let tgt = gather(&targets, masked);
    let (loss, dctx, dtgt) = contrastive_loss_with_grad(ctx.view(), tgt.view(), &plan.distractors, temperature, scale)?;

    let dout_m = model
        .context_head
        .backward(out_m.view(), dctx.view(), &mut grad.context_head);
    let mut dout = Array2::zeros(stack.last().dim());
    let mut dtargets = Array2::zeros(targets.dim());
    for (k, &i) in masked.iter().enumerate() {
        dout.row_mut(i).assign(&dout_m.row(k));
        dtargets.row_mut(i).assign(&dtgt.row(k));
    }
    let mut dinput = model.conformer.backward(&ccache, dout.view(), &mut grad.conformer)?;
    for &i in masked {
        grad.mask_embedding += &dinput.row(i);
        dinput.row_mut(i).fill(T::zero());
    }
    dinput += &model
        .target_proj
        .backward(feats.view(), dtargets.view(), &mut grad.target_proj);
    model.featenc.backward(&fcache, dinput.view(), &mut grad.featenc)?;

    Ok(ClipStats {
        loss_sum: loss.loss * loss.positions as f64,
        correct: (loss.accuracy * loss.positions as f64).round() as usize,
        positions: loss.positions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub contrastive_accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub positions: usize,
    pub reduced_positions: usize,
}

/// Stateful trainer. Each step draws its batch, masks and distractors from
/// an RNG seeded by `(seed, step)`, computes per-clip gradients (in
/// parallel), sums them in clip order and applies one Adam update, so the
/// result does not depend on the thread count.
pub struct Trainer<'a> {
    pub cfg: PretrainConfig,
    pub model: EncoderModel<f32>,
    pub optimizer: Adam<f32>,
    pub step: usize,
    fingerprint: String,
    corpus: &'a [Array2<f32>],
    encoded_lens: Vec<usize>,
}

impl<'a> Trainer<'a> {
    /// `corpus` holds log-mel matrices (`T × mel_bins`).
    pub fn new(model_cfg: &ModelConfig, cfg: &PretrainConfig, corpus: &'a [Array2<f32>]) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Config("pretraining corpus is empty".into()));
        }
        let model = EncoderModel::new(model_cfg, cfg.seed)?;
        let encoded_lens: Vec<usize> = corpus.iter().map(|m| model_cfg.featenc.output_len(m.nrows())).collect();
        if let Some(i) = encoded_lens.iter().position(|&l| l <= cfg.mask.span) {
            return Err(Error::Config(format!(
                "clip {i} has {} encoded frames, not more than mask span {}",
                encoded_lens[i], cfg.mask.span
            )));
        }
        Ok(Self {
            fingerprint: cfg.fingerprint(model_cfg),
            optimizer: Adam::new(&model),
            model,
            step: 0,
            cfg: cfg.clone(),
            corpus,
            encoded_lens,
        })
    }

    pub fn resume(checkpoint: Checkpoint, cfg: &PretrainConfig, corpus: &'a [Array2<f32>]) -> Result<Self> {
        let mut t = Self::new(&checkpoint.model.config, cfg, corpus)?;
        if checkpoint.fingerprint != t.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: t.fingerprint,
                found: checkpoint.fingerprint,
            });
        }
        t.model = checkpoint.model;
        t.optimizer = checkpoint.optimizer;
        t.step = checkpoint.step as usize;
        Ok(t)
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step as u64,
            fingerprint: self.fingerprint.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            seed: self.cfg.seed,
        }
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    /// One optimizer update. A non-finite loss or gradient leaves the model
    /// untouched and returns [`Error::Diverged`].
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let mut rng = self.step_rng();
        let batch = self.cfg.batch_size.min(self.corpus.len());
        let clips: Vec<usize> = index::sample(&mut rng, self.corpus.len(), batch).into_vec();
        let plans = clips
            .iter()
            .map(|&c| ClipPlan::sample(self.encoded_lens[c], &self.cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let positions: usize = plans.iter().map(|p| p.mask.masked.len()).sum();
        let reduced: usize = plans.iter().map(|p| p.reduced).sum();
        let scale = 1.0 / positions as f32;

        let model = &self.model;
        let temperature = self.cfg.temperature;
        let corpus = self.corpus;
        let per_clip = clips
            .par_iter()
            .zip(plans.par_iter())
            .map(|(&c, plan)| {
                let mut g = model.zeros_like();
                let stats = clip_gradient(model, corpus[c].view(), plan, temperature, scale, &mut g)?;
                Ok((g, stats))
            })
            .collect::<Result<Vec<_>>>();
        let per_clip = match per_clip {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step: self.step }),
            Err(e) => return Err(e),
        };
        let mut grad = self.model.zeros_like();
        let mut totals = ClipStats::default();
        for (g, s) in &per_clip {
            grad.add_assign_from(g);
            totals.loss_sum += s.loss_sum;
            totals.correct += s.correct;
            totals.positions += s.positions;
        }
        let loss = totals.loss_sum / totals.positions as f64;
        if !loss.is_finite() || !grad.squared_norm().is_finite() {
            return Err(Error::Diverged { step: self.step });
        }
        let lr = self.cfg.optimizer.lr_at(self.step);
        let grad_norm = self.optimizer.step(&self.cfg.optimizer, lr, &mut self.model, &mut grad);
        let metrics = StepMetrics {
            step: self.step,
            loss,
            contrastive_accuracy: totals.correct as f64 / totals.positions as f64,
            lr,
            grad_norm,
            positions,
            reduced_positions: reduced,
        };
        self.step += 1;
        Ok(metrics)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepMetrics>,
}

impl TrainOutcome {
    /// Mean contrastive accuracy over the last `window` steps.
    pub fn final_accuracy(&self, window: usize) -> f64 {
        let tail = &self.log[self.log.len().saturating_sub(window)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|m| m.contrastive_accuracy).sum::<f64>() / tail.len() as f64
    }
}

/// Runs `cfg.steps` updates from a fresh initialization. With `out_dir`,
/// writes `checkpoint.bin` every `checkpoint_every` steps and at the end,
/// plus `metrics.csv`; on divergence the last good checkpoint stays on disk.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    corpus: &[Array2<f32>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_cfg, cfg, corpus)?;
    let mut log = Vec::with_capacity(cfg.steps);
    let ckpt_path = out_dir.map(|d| d.join("checkpoint.bin"));
    if let Some(p) = &ckpt_path {
        trainer.checkpoint().save(p)?;
    }
    while trainer.step < cfg.steps {
        let m = match trainer.train_step() {
            Ok(m) => m,
            Err(e) => {
                if let Some(d) = out_dir {
                    write_metrics_csv(&d.join("metrics.csv"), trainer.fingerprint(), &log)?;
                }
                return Err(e);
            }
        };
        if m.step % 100 == 0 || m.step + 1 == cfg.steps {
            log::info!(
                "step {:>5} loss {:.4} acc {:.3} lr {:.2e}",
                m.step,
                m.loss,
                m.contrastive_accuracy,
                m.lr
            );
        }
        log.push(m);
        if let Some(p) = &ckpt_path {
            if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
                trainer.checkpoint().save(p)?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let (Some(p), Some(d)) = (&ckpt_path, out_dir) {
        checkpoint.save(p)?;
        write_metrics_csv(&d.join("metrics.csv"), &checkpoint.fingerprint, &log)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

pub fn write_metrics_csv(path: &Path, fingerprint: &str, log: &[StepMetrics]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# fingerprint: {fingerprint}")?;
    writeln!(out, "step,loss,contrastive_accuracy,lr")?;
    for m in log {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6e}",
            m.step, m.loss, m.contrastive_accuracy, m.lr
        )?;
    }
    crate::io::write_atomic(path, &out)
}
