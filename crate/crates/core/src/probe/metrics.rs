//! Accuracy, unweighted average recall and equal error rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Uar,
    Eer,
}

impl MetricKind {
    /// Maps a metric value to a higher-is-better score.
    pub fn as_score(self, value: f64) -> f64 {
        match self {
            MetricKind::Eer => 1.0 - value,
            _ => value,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Uar => "uar",
            MetricKind::Eer => "eer",
        }
    }
}

pub fn accuracy<L: PartialEq>(pred: &[L], labels: &[L]) -> Result<f64> {
    if pred.len() != labels.len() || labels.is_empty() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn uar<L: Ord + Clone>(pred: &[L], labels: &[L]) -> Result<f64> {
    if pred.len() != labels.len() || labels.is_empty() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut per_class: BTreeMap<L, (usize, usize)> = BTreeMap::new();
    for (p, l) in pred.iter().zip(labels) {
        let e = per_class.entry(l.clone()).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    // one exact ratio over the lcm of class sizes, so balanced classes give
    // the same rounding as accuracy
    let k = per_class.len() as u128;
    let lcm = per_class
        .values()
        .try_fold(1u128, |acc, &(_, n)| acc.checked_mul(n as u128 / gcd(acc, n as u128)));
    let exact = lcm.and_then(|l| {
        let num = per_class
            .values()
            .map(|&(hit, n)| hit as u128 * (l / n as u128))
            .sum::<u128>();
        let den = k.checked_mul(l)?;
        (den < 1 << 53).then(|| num as f64 / den as f64)
    });
    Ok(exact.unwrap_or_else(|| per_class.values().map(|&(hit, n)| hit as f64 / n as f64).sum::<f64>() / k as f64))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Equal error rate for detection scores (higher = more positive).
///
/// A threshold θ accepts scores ≥ θ. FAR and FRR are tabulated at every
/// distinct score (plus +∞) and the crossing is linearly interpolated
/// between the two adjacent operating points.
pub fn eer(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::Metric("EER needs both positive and negative examples".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // operating points from the lowest threshold upwards
    let mut points = Vec::with_capacity(scores.len() + 1);
    let (mut rejected_pos, mut rejected_neg) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        points.push(((nn - rejected_neg) as f64 / nn as f64, rejected_pos as f64 / np as f64));
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
    }
    points.push((0.0, 1.0));
    Ok(crossing(&points))
}

/// `points` = (FAR, FRR) with FAR non-increasing and FRR non-decreasing.
pub(crate) fn crossing(points: &[(f64, f64)]) -> f64 {
    for w in points.windows(2) {
        let (far1, frr1) = w[0];
        let (far2, frr2) = w[1];
        let d1 = far1 - frr1;
        let d2 = far2 - frr2;
        if d1 == 0.0 {
            return far1;
        }
        if d1 > 0.0 && d2 <= 0.0 {
            let t = d1 / (d1 - d2);
            return far1 + t * (far2 - far1);
        }
    }
    let (far, frr) = points[points.len() - 1];
    0.5 * (far + frr)
}
