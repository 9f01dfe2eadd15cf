//! InfoNCE over temperature-scaled cosine similarities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatchLoss {
    /// Mean of `−log softmax(true)` over masked positions.
    pub loss: f64,
    /// Fraction of positions where the true target strictly outscores every
    /// distractor.
    pub accuracy: f64,
    /// Per position: `[true, distractors in ascending index order]`, already
    /// divided by the temperature.
    pub logits: Vec<Vec<f64>>,
    /// `−log softmax(true)` per position.
    pub per_position: Vec<f64>,
    pub positions: usize,
    /// Positions whose distractor count had to be reduced below the request.
    pub reduced: usize,
}

/// Draws `k` distinct distractors for each of `num_masked` positions from the
/// other masked positions of the same clip. Returns the lists and how many
/// positions received fewer than `k`.
pub fn sample_distractors<R: Rng>(num_masked: usize, k: usize, rng: &mut R) -> (Vec<Vec<usize>>, usize) {
    let available = num_masked.saturating_sub(1);
    let take = k.min(available);
    let reduced = if take < k { num_masked } else { 0 };
    let lists = (0..num_masked)
        .map(|m| {
            index::sample(rng, available, take)
                .into_iter()
                .map(|i| if i >= m { i + 1 } else { i })
                .collect()
        })
        .collect();
    (lists, reduced)
}

fn norm<T: Real>(v: ArrayView1<T>) -> T {
    v.dot(&v).sqrt().max(T::lit(NORM_FLOOR))
}

pub fn cosine<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.dot(&b) / (norm(a) * norm(b))
}

/// Loss only.
pub fn contrastive_loss<T: Real>(
    context: ArrayView2<T>,
    targets: ArrayView2<T>,
    distractors: &[Vec<usize>],
    temperature: f64,
) -> Result<ContrastiveBatchLoss> {
    evaluate(context, targets, distractors, temperature, None).map(|(l, _)| l)
}

/// Loss plus gradients of `scale · Σ_positions loss` with respect to the
/// context rows and target rows.
pub fn contrastive_loss_with_grad<T: Real>(
    context: ArrayView2<T>,
    targets: ArrayView2<T>,
    distractors: &[Vec<usize>],
    temperature: f64,
    scale: T,
) -> Result<(ContrastiveBatchLoss, Array2<T>, Array2<T>)> {
    let (loss, grads) = evaluate(context, targets, distractors, temperature, Some(scale))?;
    let (dc, dt) = grads.unwrap();
    Ok((loss, dc, dt))
}

type Grads<T> = Option<(Array2<T>, Array2<T>)>;

fn evaluate<T: Real>(
    context: ArrayView2<T>,
    targets: ArrayView2<T>,
    distractors: &[Vec<usize>],
    temperature: f64,
    scale: Option<T>,
) -> Result<(ContrastiveBatchLoss, Grads<T>)> {
    let m = context.nrows();
    if targets.dim() != context.dim() || distractors.len() != m {
        return Err(Error::Shape(format!(
            "context {:?}, targets {:?}, {} distractor lists",
            context.dim(),
            targets.dim(),
            distractors.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be > 0")));
    }
    let inv_t = T::lit(1.0 / temperature);
    let mut grads = scale.map(|_| (Array2::<T>::zeros(context.dim()), Array2::<T>::zeros(targets.dim())));
    let mut total = T::zero();
    let mut correct = 0usize;
    let mut all_logits = Vec::with_capacity(m);
    let mut per_position = Vec::with_capacity(m);
    let tnorms: Array1<T> = targets.rows().into_iter().map(norm).collect();
    for (pos, list) in distractors.iter().enumerate() {
        if list.iter().any(|&d| d >= m || d == pos) {
            return Err(Error::Invalid(format!("bad distractor list for position {pos}")));
        }
        // canonical order: true target, then distractors ascending
        let mut cands = Vec::with_capacity(list.len() + 1);
        cands.push(pos);
        let mut sorted = list.clone();
        sorted.sort_unstable();
        cands.extend(sorted);

        let c = context.row(pos);
        let cn = norm(c);
        let cos: Vec<T> = cands
            .iter()
            .map(|&j| c.dot(&targets.row(j)) / (cn * tnorms[j]))
            .collect();
        let logits: Vec<T> = cos.iter().map(|&s| s * inv_t).collect();
        let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
        let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[0];
        per_position.push((lse - logits[0]).to_f64_lossy());
        if logits[1..].iter().all(|&l| logits[0] > l) {
            correct += 1;
        }
        all_logits.push(logits.iter().map(|l| l.to_f64_lossy()).collect());

        if let (Some(scale), Some((dc, dt))) = (scale, grads.as_mut()) {
            for (ci, &j) in cands.iter().enumerate() {
                let p = (logits[ci] - lse).exp();
                let dl = (p - if ci == 0 { T::one() } else { T::zero() }) * inv_t * scale;
                let t = targets.row(j);
                let tn = tnorms[j];
                let s = cos[ci];
                // ∂cos/∂c = t/(|c||t|) − s·c/|c|², and symmetrically for t
                let inv = T::one() / (cn * tn);
                let mut dcr = dc.row_mut(pos);
                dcr.zip_mut_with(&t, |g, &tv| *g += dl * tv * inv);
                dcr.zip_mut_with(&c, |g, &cv| *g -= dl * s * cv / (cn * cn));
                let mut dtr = dt.row_mut(j);
                dtr.zip_mut_with(&c, |g, &cv| *g += dl * cv * inv);
                dtr.zip_mut_with(&t, |g, &tv| *g -= dl * s * tv / (tn * tn));
            }
        }
    }
    let loss = ContrastiveBatchLoss {
        loss: if m == 0 { 0.0 } else { total.to_f64_lossy() / m as f64 },
        accuracy: if m == 0 { 0.0 } else { correct as f64 / m as f64 },
        logits: all_logits,
        per_position,
        positions: m,
        reduced: 0,
    };
    Ok((loss, grads))
}
