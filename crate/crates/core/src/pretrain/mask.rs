//! Span masking over encoded frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Probability that any frame starts a masked span.
    pub start_prob: f64,
    /// Span length in encoded frames.
    pub span: usize,
    /// Upper bound on the masked fraction of a clip.
    pub max_fraction: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            start_prob: 0.065,
            span: 10,
            max_fraction: 0.75,
        }
    }
}

impl MaskConfig {
    /// Expected masked fraction away from the clip edges: a frame is covered
    /// unless none of the `span` preceding start positions fired.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.start_prob).powi(self.span as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start_prob) || self.span == 0 {
            return Err(Error::Config(format!(
                "mask start_prob {} must be in [0, 1] and span ≥ 1",
                self.start_prob
            )));
        }
        if !(self.max_fraction > 0.0 && self.max_fraction <= 0.75) {
            return Err(Error::Config(format!(
                "mask max_fraction {} must be in (0, 0.75]",
                self.max_fraction
            )));
        }
        let expected = self.expected_fraction();
        if expected > self.max_fraction {
            return Err(Error::MaskPlanExceedsCap {
                expected,
                cap: self.max_fraction,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub len: usize,
    /// Sorted, unique masked frame indices.
    pub masked: Vec<usize>,
    pub span_starts: Vec<usize>,
    pub span: usize,
}

impl MaskPlan {
    pub fn fraction(&self) -> f64 {
        self.masked.len() as f64 / self.len as f64
    }

    fn from_starts(len: usize, span: usize, starts: Vec<usize>) -> Self {
        let mut covered = vec![false; len];
        for &s in &starts {
            for c in covered.iter_mut().skip(s).take(span) {
                *c = true;
            }
        }
        let masked = covered
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect();
        Self {
            len,
            masked,
            span_starts: starts,
            span,
        }
    }
}

/// Samples span starts with probability `start_prob` at every frame, unions
/// the spans, and enforces the cap. An empty draw is retried once, then a
/// single span is forced at a uniform position.
pub fn sample_mask<R: Rng>(len: usize, cfg: &MaskConfig, rng: &mut R) -> Result<MaskPlan> {
    cfg.validate()?;
    if len <= cfg.span {
        return Err(Error::Config(format!(
            "clip of {len} encoded frames is not longer than mask span {}",
            cfg.span
        )));
    }
    let draw = |rng: &mut R| -> Vec<usize> { (0..len).filter(|_| rng.gen::<f64>() < cfg.start_prob).collect() };
    let mut starts = draw(rng);
    if starts.is_empty() {
        starts = draw(rng);
    }
    if starts.is_empty() {
        starts.push(rng.gen_range(0..=len - cfg.span));
    }
    let mut plan = MaskPlan::from_starts(len, cfg.span, starts);
    // forced reduction: drop random spans while over the cap
    while plan.fraction() > cfg.max_fraction && plan.span_starts.len() > 1 {
        let mut starts = plan.span_starts.clone();
        starts.remove(rng.gen_range(0..starts.len()));
        plan = MaskPlan::from_starts(len, cfg.span, starts);
    }
    if plan.fraction() > cfg.max_fraction {
        let keep = ((cfg.max_fraction * len as f64).floor() as usize).max(1);
        plan.masked.truncate(keep);
    }
    Ok(plan)
}
