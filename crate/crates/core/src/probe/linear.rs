//! Linear classifiers: multinomial logistic regression and shrinkage LDA.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Per-feature standardization with statistics from one (training) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let var = x.var_axis(Axis(0), 0.0);
        let scale = var.mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

/// `scores = x · weights + bias`, one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearModel {
    pub fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    pub fn probabilities(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut s = self.scores(x);
        for mut row in s.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row /= z;
        }
        s
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.scores(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                    )
                    .0
            })
            .collect()
    }
}

fn check_labels(x: ArrayView2<f64>, y: &[usize], classes: usize) -> Result<Vec<usize>> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows, {} labels", x.nrows(), y.len())));
    }
    if classes < 2 {
        return Err(Error::Config("a probe needs at least 2 classes".into()));
    }
    let mut counts = vec![0usize; classes];
    for &c in y {
        if c >= classes {
            return Err(Error::Shape(format!("label {c} ≥ {classes} classes")));
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(format!("#{c}")));
    }
    Ok(counts)
}

/// `N / (C · N_c)` per class.
pub fn balanced_weights(y: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &c in y {
        counts[c] += 1;
    }
    let n = y.len() as f64;
    counts
        .iter()
        .map(|&nc| if nc == 0 { 0.0 } else { n / (classes as f64 * nc as f64) })
        .collect()
}

/// Weighted multinomial cross-entropy with an L2 penalty on the weights
/// (not the bias):
/// `Σ_i w_i CE_i / Σ_i w_i + l2/2 · ‖W‖²`.
#[derive(Debug, Clone)]
pub struct LogRegObjective<'x, 'y> {
    pub x: ArrayView2<'x, f64>,
    pub y: &'y [usize],
    pub sample_weights: Vec<f64>,
    pub classes: usize,
    pub l2: f64,
}

impl LogRegObjective<'_, '_> {
    pub fn dim(&self) -> usize {
        (self.x.ncols() + 1) * self.classes
    }

    pub fn unpack(&self, theta: &[f64]) -> LinearModel {
        let (d, c) = (self.x.ncols(), self.classes);
        LinearModel {
            weights: Array2::from_shape_vec((d, c), theta[..d * c].to_vec()).unwrap(),
            bias: Array1::from(theta[d * c..].to_vec()),
        }
    }

    pub fn value_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (d, c) = (self.x.ncols(), self.classes);
        let model = self.unpack(theta);
        let scores = model.scores(self.x);
        let total_w: f64 = self.sample_weights.iter().sum();
        let mut loss = 0.0;
        let mut dscores = Array2::<f64>::zeros(scores.dim());
        for (i, row) in scores.rows().into_iter().enumerate() {
            let w = self.sample_weights[i] / total_w;
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += w * (lse - row[self.y[i]]);
            for k in 0..c {
                dscores[[i, k]] = w * ((row[k] - lse).exp() - if k == self.y[i] { 1.0 } else { 0.0 });
            }
        }
        let reg: f64 = theta[..d * c].iter().map(|v| v * v).sum();
        loss += 0.5 * self.l2 * reg;
        let gw = self.x.t().dot(&dscores) + &model.weights * self.l2;
        let gb = dscores.sum_axis(Axis(0));
        let mut grad = gw.into_raw_vec_and_offset().0;
        grad.extend(gb.iter());
        (loss, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_norm_inf: f64,
    pub converged: bool,
}

/// Limited-memory BFGS with backtracking (Armijo) line search.
pub fn minimize_lbfgs<F>(f: F, x0: Vec<f64>, max_iter: usize, tol: f64) -> (Vec<f64>, FitSummary)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const MEMORY: usize = 10;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let inf = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut it = 0;
    while it < max_iter && inf(&g) > tol {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist
            .back()
            .map_or(1.0 / inf(&g).max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let (x_new, f_new, g_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fc, gc) = f(&cand);
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                break (cand, fc, gc);
            }
            step *= 0.5;
            if step < 1e-20 {
                break (x.clone(), fx, g.clone());
            }
        };
        it += 1;
        if f_new >= fx && x_new == x {
            break;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > MEMORY {
                hist.pop_front();
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    let gn = inf(&g);
    (
        x,
        FitSummary {
            iterations: it,
            final_loss: fx,
            grad_norm_inf: gn,
            converged: gn <= tol,
        },
    )
}

/// Multinomial logistic regression. `sample_weights` of `None` weights all
/// examples equally.
pub fn fit_logreg(
    x: ArrayView2<f64>,
    y: &[usize],
    classes: usize,
    l2: f64,
    sample_weights: Option<Vec<f64>>,
    max_iter: usize,
    tol: f64,
) -> Result<(LinearModel, FitSummary)> {
    check_labels(x, y, classes)?;
    if !(l2 >= 0.0) {
        return Err(Error::Config(format!("l2 strength {l2} must be ≥ 0")));
    }
    let obj = LogRegObjective {
        x,
        y,
        sample_weights: sample_weights.unwrap_or_else(|| vec![1.0; y.len()]),
        classes,
        l2,
    };
    let (theta, summary) = minimize_lbfgs(|t| obj.value_grad(t), vec![0.0; obj.dim()], max_iter, tol);
    Ok((obj.unpack(&theta), summary))
}

/// Class-weighted variant with weights `N / (C · N_c)`.
pub fn fit_balanced_logreg(
    x: ArrayView2<f64>,
    y: &[usize],
    classes: usize,
    l2: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(LinearModel, FitSummary)> {
    check_labels(x, y, classes)?;
    let cw = balanced_weights(y, classes);
    let w = y.iter().map(|&c| cw[c]).collect();
    fit_logreg(x, y, classes, l2, Some(w), max_iter, tol)
}

/// Linear discriminant analysis with pooled covariance `Σ + λI` and
/// empirical class priors. The scores are log posteriors up to a shared
/// per-example constant.
pub fn fit_lda(x: ArrayView2<f64>, y: &[usize], classes: usize, shrinkage: f64) -> Result<LinearModel> {
    let counts = check_labels(x, y, classes)?;
    if !(shrinkage >= 0.0) {
        return Err(Error::Config(format!("shrinkage {shrinkage} must be ≥ 0")));
    }
    let (n, d) = x.dim();
    let mut means = Array2::<f64>::zeros((classes, d));
    for (row, &c) in x.rows().into_iter().zip(y) {
        let mut m = means.row_mut(c);
        m += &row;
    }
    for (mut m, &nc) in means.rows_mut().into_iter().zip(&counts) {
        m /= nc as f64;
    }
    let dof = n.saturating_sub(classes).max(1) as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (row, &c) in x.rows().into_iter().zip(y) {
        let r = DVector::from_iterator(d, row.iter().zip(means.row(c)).map(|(a, b)| a - b));
        cov.ger(1.0 / dof, &r, &r, 1.0);
    }
    for i in 0..d {
        cov[(i, i)] += shrinkage;
    }
    let singular = || Error::SingularCovariance;
    let chol = cov.clone().cholesky().ok_or_else(singular)?;
    let diag = chol.l().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo <= hi * 1e-7 {
        return Err(singular());
    }
    let mut weights = Array2::<f64>::zeros((d, classes));
    let mut bias = Array1::<f64>::zeros(classes);
    for c in 0..classes {
        let mu = DVector::from_iterator(d, means.row(c).iter().copied());
        let w = chol.solve(&mu);
        for j in 0..d {
            weights[[j, c]] = w[j];
        }
        bias[c] = -0.5 * mu.dot(&w) + (counts[c] as f64 / n as f64).ln();
    }
    Ok(LinearModel { weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, d: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, d), |(i, j)| {
            normal.sample(&mut rng) + if j == 0 { sep * (2.0 * y[i] as f64 - 1.0) } else { 0.0 }
        });
        (x, y)
    }

    #[test]
    fn separable_blobs_are_fit_exactly() {
        let (x, y) = blobs(200, 4, 8.0, 1);
        let (m, _) = fit_logreg(x.view(), &y, 2, 1e-3, None, 500, 1e-8).unwrap();
        assert_eq!(m.predict(x.view()), y);
        let lda = fit_lda(x.view(), &y, 2, 1e-3).unwrap();
        assert_eq!(lda.predict(x.view()), y);
    }

    #[test]
    fn logreg_gradient_matches_differences() {
        let (x, y) = blobs(30, 3, 1.0, 2);
        let obj = LogRegObjective {
            x: x.view(),
            y: &y,
            sample_weights: (0..30).map(|i| 1.0 + (i % 3) as f64).collect(),
            classes: 2,
            l2: 0.3,
        };
        let theta: Vec<f64> = (0..obj.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (_, g) = obj.value_grad(&theta);
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += 1e-6;
            let mut m = theta.clone();
            m[i] -= 1e-6;
            let fd = (obj.value_grad(&p).0 - obj.value_grad(&m).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn missing_class_and_singular_covariance() {
        let (x, _) = blobs(10, 2, 1.0, 3);
        assert!(matches!(
            fit_logreg(x.view(), &[0; 10], 2, 0.0, None, 10, 1e-6),
            Err(Error::MissingClass(_))
        ));
        // duplicated column → rank-deficient covariance
        let dup = Array2::from_shape_fn((10, 2), |(i, _)| x[[i, 0]]);
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let err = fit_lda(dup.view(), &y, 2, 0.0).unwrap_err();
        assert!(err.to_string().contains("shrinkage > 0"));
        assert!(fit_lda(dup.view(), &y, 2, 0.1).is_ok());
    }

    #[test]
    fn balanced_weights_sum_to_n() {
        let y = [0, 0, 0, 1];
        let w = balanced_weights(&y, 2);
        assert_eq!(w, vec![4.0 / 6.0, 2.0]);
        let total: f64 = y.iter().map(|&c| w[c]).sum();
        assert_eq!(total, 4.0);
    }
}
