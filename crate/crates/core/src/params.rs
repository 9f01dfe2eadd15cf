//! Named, flat views over learnable parameters.
//!
//! Every learnable module exposes its tensors in a fixed order. The same
//! structure doubles as the gradient accumulator, so optimizer updates,
//! checkpoints and gradient checks all zip the two views by position.

use ndarray::{Array, Dimension};

use crate::real::Real;

pub trait Parameterized<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>);

    fn params(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, p) in self.params_mut() {
            p.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += other`, element-wise over matching parameters.
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, a), (_, b)) in self.params_mut().into_iter().zip(other.params()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    fn scale(&mut self, factor: T) {
        for (_, p) in self.params_mut() {
            p.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn squared_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|(_, p)| p.iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push<'a, T: Real, D: Dimension>(
    out: &mut Vec<(String, &'a [T])>,
    prefix: &str,
    name: &str,
    arr: &'a Array<T, D>,
) {
    out.push((join(prefix, name), arr.as_slice().expect("standard layout")));
}

pub(crate) fn push_mut<'a, T: Real, D: Dimension>(
    out: &mut Vec<(String, &'a mut [T])>,
    prefix: &str,
    name: &str,
    arr: &'a mut Array<T, D>,
) {
    out.push((join(prefix, name), arr.as_slice_mut().expect("standard layout")));
}
