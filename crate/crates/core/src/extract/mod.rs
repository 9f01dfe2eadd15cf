//! Per-layer clip embeddings under full-context or chunked windows.

mod store;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use store::{read_store, write_store, EMB_MAGIC};

use crate::error::{Error, Result};
use crate::frontend::{AudioClip, MelConfig, MelFrontend, Split};
use crate::model::EncoderModel;

/// How a clip is windowed before encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowPolicy {
    Full,
    /// Non-overlapping chunks of this many seconds, each encoded alone.
    Chunked(f64),
}

impl WindowPolicy {
    pub fn chunked(seconds: f64) -> Result<Self> {
        if !(seconds > 0.0 && seconds.is_finite()) {
            return Err(Error::Config(format!("chunk length {seconds} must be > 0")));
        }
        Ok(Self::Chunked(seconds))
    }

    /// Sample ranges for a clip of `n` samples. Chunks start at multiples of
    /// the chunk length; a trailing remainder shorter than `min_len` is
    /// dropped, unless it is the only chunk.
    pub fn chunks(&self, n: usize, sample_rate: u32, min_len: usize) -> Vec<(usize, usize)> {
        match *self {
            WindowPolicy::Full => vec![(0, n)],
            WindowPolicy::Chunked(s) => {
                let len = ((s * sample_rate as f64).round() as usize).max(1);
                if len >= n {
                    return vec![(0, n)];
                }
                let mut out: Vec<_> = (0..n).step_by(len).map(|a| (a, (a + len).min(n))).collect();
                if out.len() > 1 && out.last().is_some_and(|&(a, b)| b - a < min_len) {
                    out.pop();
                }
                out
            }
        }
    }
}

impl fmt::Display for WindowPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowPolicy::Full => f.write_str("full"),
            WindowPolicy::Chunked(s) => write!(f, "chunk{s}s"),
        }
    }
}

impl FromStr for WindowPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::Full);
        }
        let secs = s
            .strip_prefix("chunk")
            .and_then(|r| r.strip_suffix('s'))
            .and_then(|r| r.parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("bad window policy {s:?} (want \"full\" or \"chunk<secs>s\")")))?;
        Self::chunked(secs)
    }
}

impl Serialize for WindowPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WindowPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Frozen-encoder embedding extractor.
#[derive(Debug)]
pub struct Extractor<'m> {
    pub model: &'m EncoderModel<f32>,
    frontend: MelFrontend,
}

/// Fewest mel frames the feature encoder accepts.
const MIN_ENCODER_FRAMES: usize = 4;

impl<'m> Extractor<'m> {
    pub fn new(model: &'m EncoderModel<f32>) -> Self {
        Self {
            model,
            frontend: MelFrontend::new(MelConfig::with_bins(model.config.mel_bins)),
        }
    }

    /// Time-mean of every layer (0 = encoded features) for one window.
    pub fn local_embeddings(&self, samples: &[f32]) -> Result<Vec<Array1<f32>>> {
        let mel = self.frontend.compute(samples)?;
        let stack = self.model.encode(&mel, false)?;
        Ok(stack.layers.iter().map(time_mean).collect())
    }

    /// Per-chunk local embeddings, `chunks × (L+1)`.
    pub fn chunk_embeddings(&self, clip: &AudioClip, policy: WindowPolicy) -> Result<Vec<Vec<Array1<f32>>>> {
        let cfg = self.frontend.config();
        policy
            .chunks(
                clip.samples.len(),
                clip.sample_rate,
                cfg.window + (MIN_ENCODER_FRAMES - 1) * cfg.hop,
            )
            .into_iter()
            .map(|(a, b)| self.local_embeddings(&clip.samples[a..b]))
            .collect()
    }

    /// Clip embedding for every layer: time-mean within each chunk, then
    /// unweighted mean over chunks.
    pub fn embed_clip(&self, clip: &AudioClip, policy: WindowPolicy) -> Result<Vec<Array1<f32>>> {
        let per_chunk = self.chunk_embeddings(clip, policy)?;
        let layers = self.model.num_layers() + 1;
        Ok((0..layers)
            .map(|l| {
                let locals: Vec<&Array1<f32>> = per_chunk.iter().map(|c| &c[l]).collect();
                average_chunks(&locals)
            })
            .collect())
    }

    pub fn embed_layer(&self, clip: &AudioClip, layer: usize, policy: WindowPolicy) -> Result<Array1<f32>> {
        if layer > self.model.num_layers() {
            return Err(Error::Config(format!(
                "layer {layer} out of range 0..={}",
                self.model.num_layers()
            )));
        }
        Ok(self.embed_clip(clip, policy)?.swap_remove(layer))
    }
}

fn time_mean(x: &Array2<f32>) -> Array1<f32> {
    let sum = x.mapv(|v| v as f64).sum_axis(Axis(0));
    sum.mapv(|v| (v / x.nrows() as f64) as f32)
}

/// Unweighted mean of chunk vectors, summed in a canonical (lexicographic)
/// order so the result does not depend on chunk order.
pub fn average_chunks(locals: &[&Array1<f32>]) -> Array1<f32> {
    let mut sorted = locals.to_vec();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let dim = sorted.first().map_or(0, |v| v.len());
    let mut sum = Array1::<f64>::zeros(dim);
    for v in sorted {
        sum.zip_mut_with(v, |s, &x| *s += x as f64);
    }
    let n = locals.len().max(1) as f64;
    sum.mapv(|v| (v / n) as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub clip_id: String,
    pub task_id: String,
    pub label: String,
    pub split: Split,
    pub layer: usize,
    pub policy: WindowPolicy,
    #[serde(skip)]
    pub vector: Vec<f32>,
}

impl EmbeddingRow {
    pub fn key(&self) -> (String, usize, String) {
        (self.clip_id.clone(), self.layer, self.policy.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorts rows by (task, clip, policy, layer).
    pub fn canonicalize(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.task_id, &a.clip_id, a.policy.to_string(), a.layer).cmp(&(
                &b.task_id,
                &b.clip_id,
                b.policy.to_string(),
                b.layer,
            ))
        });
    }

    pub fn layers(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| r.layer)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn policies(&self) -> Vec<WindowPolicy> {
        let mut seen: Vec<WindowPolicy> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.policy) {
                seen.push(r.policy);
            }
        }
        seen
    }

    pub fn tasks(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.task_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Rows for one (task, layer, policy, split), in table order.
    pub fn select<'a>(
        &'a self,
        task: &'a str,
        layer: usize,
        policy: WindowPolicy,
        split: Split,
    ) -> impl Iterator<Item = &'a EmbeddingRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.task_id == task && r.layer == layer && r.policy == policy && r.split == split)
    }
}

/// Embeds every clip for every requested (layer, policy) not already in
/// `existing`. Returns the completed table in canonical order and the
/// number of rows that had to be computed.
pub fn extract_all(
    clips: &[AudioClip],
    model: &EncoderModel<f32>,
    layers: &[usize],
    policies: &[WindowPolicy],
    existing: Option<EmbeddingTable>,
) -> Result<(EmbeddingTable, usize)> {
    let dim = model.model_dim();
    let mut table = existing.unwrap_or(EmbeddingTable { dim, rows: Vec::new() });
    if !table.rows.is_empty() && table.dim != dim {
        return Err(Error::Store(format!(
            "existing store has dimension {}, model produces {dim}",
            table.dim
        )));
    }
    table.dim = dim;
    if let Some(&l) = layers.iter().find(|&&l| l > model.num_layers()) {
        return Err(Error::Config(format!(
            "layer {l} out of range 0..={}",
            model.num_layers()
        )));
    }
    let have: BTreeSet<_> = table.rows.iter().map(|r| r.key()).collect();
    let jobs: Vec<(&AudioClip, WindowPolicy, Vec<usize>)> = clips
        .iter()
        .flat_map(|c| policies.iter().map(move |&p| (c, p)))
        .filter_map(|(c, p)| {
            let missing: Vec<usize> = layers
                .iter()
                .copied()
                .filter(|&l| !have.contains(&(c.clip_id.clone(), l, p.to_string())))
                .collect();
            (!missing.is_empty()).then_some((c, p, missing))
        })
        .collect();
    let extractor = Extractor::new(model);
    let computed = jobs
        .par_iter()
        .map(|(clip, policy, missing)| {
            let all = extractor.embed_clip(clip, *policy).map_err(|e| Error::Stage {
                stage: format!("extract {}", clip.clip_id),
                source: Box::new(e),
            })?;
            missing
                .iter()
                .map(|&l| {
                    let vector = all[l].to_vec();
                    if vector.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { layer: l });
                    }
                    Ok(EmbeddingRow {
                        clip_id: clip.clip_id.clone(),
                        task_id: clip.task_id.clone(),
                        label: clip.label.clone(),
                        split: clip.split,
                        layer: l,
                        policy: *policy,
                        vector,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut count = 0;
    for rows in computed {
        count += rows.len();
        table.rows.extend(rows);
    }
    table.canonicalize();
    Ok((table, count))
}
