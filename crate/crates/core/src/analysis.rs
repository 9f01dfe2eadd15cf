//! Layer-wise representation analyses: linear CKA, mean attention
//! distance, and normalized-depth score curves.

use std::fmt::Write as _;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featenc::ENCODED_FRAME_PERIOD;
use crate::frontend::MelSpectrogram;
use crate::model::EncoderModel;
use crate::real::Real;

fn centered(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    &x - &mean
}

/// Linear CKA between two representations of the same `N` examples.
pub fn linear_cka(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "CKA over {} vs {} examples",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Shape("CKA needs at least 2 examples".into()));
    }
    let (xc, yc) = (centered(x), centered(y));
    let frob2 = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let cross = frob2(&yc.t().dot(&xc));
    let denom = frob2(&xc.t().dot(&xc)).sqrt() * frob2(&yc.t().dot(&yc)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((cross / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub model_a: String,
    pub model_b: String,
    pub examples: usize,
    /// `grid[i][j]` = CKA(layer i of A, layer j of B).
    pub grid: Vec<Vec<f64>>,
}

/// CKA for every pair of layers. `acts_b = None` compares `acts_a` with
/// itself, filling the symmetric half once.
pub fn cka_grid(names: (&str, &str), acts_a: &[Array2<f64>], acts_b: Option<&[Array2<f64>]>) -> Result<CkaMatrix> {
    let b = acts_b.unwrap_or(acts_a);
    if acts_a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("CKA grid needs at least one layer per model".into()));
    }
    let mut grid = vec![vec![0.0; b.len()]; acts_a.len()];
    for i in 0..acts_a.len() {
        for j in 0..b.len() {
            grid[i][j] = if acts_b.is_none() && j < i {
                grid[j][i]
            } else {
                linear_cka(acts_a[i].view(), b[j].view())?
            };
        }
    }
    Ok(CkaMatrix {
        model_a: names.0.to_string(),
        model_b: names.1.to_string(),
        examples: acts_a[0].nrows(),
        grid,
    })
}

/// Per-head mean attention distance in seconds:
/// `(1/T) Σ_i Σ_j A[h,i,j]·|i−j| · frame_period`.
pub fn mean_attention_distance<T: Real>(attn: ArrayView3<T>, frame_period: f64) -> Result<Vec<f64>> {
    let (heads, t, t2) = attn.dim();
    if t != t2 || t == 0 {
        return Err(Error::Shape(format!("attention map {heads}×{t}×{t2}")));
    }
    let mut worst = 0.0f64;
    for row in attn.lanes(Axis(2)) {
        let s: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
        worst = worst.max((s - 1.0).abs());
    }
    if worst > 1e-4 {
        return Err(Error::UnnormalizedAttention(worst));
    }
    Ok((0..heads)
        .map(|h| {
            let mut acc = 0.0;
            for i in 0..t {
                for j in 0..t {
                    acc += attn[[h, i, j]].to_f64_lossy() * i.abs_diff(j) as f64;
                }
            }
            acc / t as f64 * frame_period
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnDistanceProfile {
    pub model: String,
    /// `per_head[layer][head]`, seconds, averaged over clips.
    pub per_head: Vec<Vec<f64>>,
    pub clips: usize,
}

impl AttnDistanceProfile {
    /// The shortest head of every layer.
    pub fn min_per_layer(&self) -> Vec<f64> {
        self.per_head
            .iter()
            .map(|h| h.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect()
    }
}

/// Averages per-head distances over a sample of clips.
pub fn attention_profile(
    name: &str,
    model: &EncoderModel<f32>,
    mels: &[MelSpectrogram],
) -> Result<AttnDistanceProfile> {
    if mels.is_empty() {
        return Err(Error::Invalid("attention profile needs at least one clip".into()));
    }
    let layers = model.num_layers();
    let heads = model.config.encoder.num_heads;
    let mut acc = vec![vec![0.0; heads]; layers];
    for mel in mels {
        let stack = model.encode(mel, true)?;
        for (l, a) in stack.attention.iter().enumerate() {
            let d = mean_attention_distance(a.view(), ENCODED_FRAME_PERIOD)?;
            for (h, v) in d.into_iter().enumerate() {
                acc[l][h] += v;
            }
        }
    }
    for layer in &mut acc {
        for v in layer.iter_mut() {
            *v /= mels.len() as f64;
        }
    }
    Ok(AttnDistanceProfile {
        model: name.to_string(),
        per_head: acc,
        clips: mels.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub model: String,
    /// `(layer / L, score)` for layers `0..=L`.
    pub points: Vec<(f64, f64)>,
    /// Inclusive layer range around the peak whose scores are within the
    /// tolerance of the peak.
    pub plateau: (usize, usize),
}

pub const PLATEAU_TOLERANCE: f64 = 0.02;

pub fn layer_curve(model: &str, scores: &[f64]) -> Result<LayerCurve> {
    if scores.is_empty() {
        return Err(Error::Invalid(format!("model {model} has no layer scores")));
    }
    let num = (scores.len() - 1).max(1) as f64;
    let points = scores.iter().enumerate().map(|(l, &s)| (l as f64 / num, s)).collect();
    let peak = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    let floor = scores[peak] - PLATEAU_TOLERANCE * scores[peak].abs();
    let (mut lo, mut hi) = (peak, peak);
    while lo > 0 && scores[lo - 1] >= floor {
        lo -= 1;
    }
    while hi + 1 < scores.len() && scores[hi + 1] >= floor {
        hi += 1;
    }
    Ok(LayerCurve {
        model: model.to_string(),
        points,
        plateau: (lo, hi),
    })
}

pub fn cka_csv(m: &CkaMatrix, fingerprint: &str) -> String {
    let mut out = format!(
        "# fingerprint: {fingerprint}\n# model_a: {}\n# model_b: {}\n# examples: {}\nlayer_a",
        m.model_a, m.model_b, m.examples
    );
    for j in 0..m.grid.first().map_or(0, |r| r.len()) {
        write!(out, ",b{j}").unwrap();
    }
    out.push('\n');
    for (i, row) in m.grid.iter().enumerate() {
        write!(out, "a{i}").unwrap();
        for v in row {
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn attention_csv(p: &AttnDistanceProfile, fingerprint: &str) -> String {
    let heads = p.per_head.first().map_or(0, |h| h.len());
    let mut out = format!(
        "# fingerprint: {fingerprint}\n# model: {}\n# clips: {}\n# unit: seconds\nlayer",
        p.model, p.clips
    );
    for h in 0..heads {
        write!(out, ",head{h}").unwrap();
    }
    out.push_str(",shortest\n");
    for (l, (row, min)) in p.per_head.iter().zip(p.min_per_layer()).enumerate() {
        write!(out, "{}", l + 1).unwrap();
        for v in row {
            write!(out, ",{v:.6}").unwrap();
        }
        writeln!(out, ",{min:.6}").unwrap();
    }
    out
}

pub fn curves_csv(curves: &[LayerCurve], fingerprint: &str) -> String {
    let mut out = format!("# fingerprint: {fingerprint}\n# plateau tolerance: {PLATEAU_TOLERANCE}\nmodel,layer,position,score,in_plateau\n");
    for c in curves {
        for (l, (pos, s)) in c.points.iter().enumerate() {
            writeln!(
                out,
                "{},{l},{pos:.6},{s:.6},{}",
                c.model,
                l >= c.plateau.0 && l <= c.plateau.1
            )
            .unwrap();
        }
    }
    out
}

/// Stacks per-clip layer vectors into one `N × D` matrix per layer.
pub fn stack_layers(per_clip: &[Vec<Vec<f32>>]) -> Result<Vec<Array2<f64>>> {
    let first = per_clip.first().ok_or_else(|| Error::Invalid("no clips".into()))?;
    let (n, layers) = (per_clip.len(), first.len());
    (0..layers)
        .map(|l| {
            let d = first[l].len();
            let mut m = Array2::zeros((n, d));
            for (i, clip) in per_clip.iter().enumerate() {
                if clip.len() != layers || clip[l].len() != d {
                    return Err(Error::Shape(format!("clip {i} layer {l} has a different shape")));
                }
                m.row_mut(i).iter_mut().zip(&clip[l]).for_each(|(a, &b)| *a = b as f64);
            }
            Ok(m)
        })
        .collect()
}

/// Uniform attention over `t` keys for every query, `heads` times.
pub fn uniform_attention(heads: usize, t: usize) -> Array3<f64> {
    Array3::from_elem((heads, t, t), 1.0 / t as f64)
}
