//! Dense building blocks with explicit forward/backward passes.
//!
//! All sequence tensors are `T×D` with time along rows. Backward functions
//! accumulate parameter gradients into a same-shaped gradient module and
//! return the gradient with respect to the input.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::params::{push, push_mut, Parameterized};
use crate::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn swish<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d/dx of `x·σ(x)`.
pub fn swish_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub(crate) fn uniform<T: Real, R: Rng>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || T::lit(rng.gen_range(-bound..=bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real> {
    /// `in × out`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        Self {
            weight: uniform(rng, (input, output), bound),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Self) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.mapv(|v| U::lit(v.to_f64_lossy())),
            bias: self.bias.mapv(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
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
pub struct LayerNorm<T: Real> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache<T: Real> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize(x.ncols()).unwrap();
        let eps = T::lit(LN_EPS);
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *s = T::one() / (var + eps).sqrt();
            let is = *s;
            row.mapv_inplace(|v| v * is);
        }
        let mut y = &normalized * &self.gain;
        y += &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, grad: &mut Self) -> Array2<T> {
        let d = T::from_usize(dy.ncols()).unwrap();
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let mut dx = &dy * &self.gain;
        Zip::from(dx.rows_mut())
            .and(cache.normalized.rows())
            .and(&cache.inv_std)
            .for_each(|mut g, xh, &is| {
                let mean_g = g.iter().copied().sum::<T>() / d;
                let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
                Zip::from(&mut g).and(&xh).for_each(|gv, &xv| {
                    *gv = is * (*gv - mean_g - xv * mean_gx);
                });
            });
        dx
    }

    pub fn cast<U: Real>(&self) -> LayerNorm<U> {
        LayerNorm {
            gain: self.gain.mapv(|v| U::lit(v.to_f64_lossy())),
            bias: self.bias.mapv(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

impl<T: Real> Parameterized<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        push(out, prefix, "gain", &self.gain);
        push(out, prefix, "bias", &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        push_mut(out, prefix, "gain", &mut self.gain);
        push_mut(out, prefix, "bias", &mut self.bias);
    }
}

pub(crate) fn cast1<T: Real, U: Real>(a: &Array1<T>) -> Array1<U> {
    a.mapv(|v| U::lit(v.to_f64_lossy()))
}

pub(crate) fn cast2<T: Real, U: Real>(a: &Array2<T>) -> Array2<U> {
    a.mapv(|v| U::lit(v.to_f64_lossy()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((num - a).abs() < 1e-6 * (1.0 + a.abs()), "idx {idx}: {num} vs {a}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::<f64>::new(3);
        let (y, _) = ln.forward(array![[1.0, 2.0, 3.0], [-4.0, 0.0, 10.0]].view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).sum() / 3.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::<f64>::new(4);
        ln.gain = Array1::from_shape_simple_fn(4, || rng.gen_range(0.5..1.5));
        let x: Array2<f64> = uniform(&mut rng, (3, 4), 1.0);
        let w: Array2<f64> = uniform(&mut rng, (3, 4), 1.0);
        let (_, cache) = ln.forward(x.view());
        let mut grad = LayerNorm::zeros(4);
        let dx = ln.backward(&cache, w.view(), &mut grad);
        fd_check(|x| (&ln.forward(x.view()).0 * &w).sum(), &x, &dx);
    }

    #[test]
    fn linear_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::<f64>::new(&mut rng, 3, 5);
        let x: Array2<f64> = uniform(&mut rng, (4, 3), 1.0);
        let w: Array2<f64> = uniform(&mut rng, (4, 5), 1.0);
        let mut grad = Linear::zeros(3, 5);
        let dx = lin.backward(x.view(), w.view(), &mut grad);
        fd_check(|x| (&lin.forward(x.view()) * &w).sum(), &x, &dx);
        assert_eq!(grad.bias, w.sum_axis(Axis(0)));
    }

    #[test]
    fn swish_derivative() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let num = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((num - swish_grad(x)).abs() < 1e-8);
        }
    }
}
