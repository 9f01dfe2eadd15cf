//! Full-context multi-head self-attention with a learned, clipped
//! relative-position bias.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::nn::{LayerNorm, LayerNormCache, Linear};
use crate::params::{join, push, push_mut, Parameterized};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T: Real> {
    pub norm: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    /// `H × (2·max_offset + 1)`; column `o + max_offset` holds the bias for
    /// key offset `j − i = o`. Empty when relative attention is disabled.
    pub relative_bias: Array2<T>,
    pub num_heads: usize,
    pub max_offset: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct AttentionCache<T: Real> {
    norm: LayerNormCache<T>,
    normed: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// `H × T × T`
    pub(crate) probs: Array3<T>,
    context: Array2<T>,
}

/// Bias tensor `H × T × T` with entry `[h, i, j] = table[h, clip(j − i)]`.
pub fn relative_bias<T: Real>(table: &Array2<T>, len: usize, max_offset: usize) -> Array3<T> {
    let heads = table.nrows();
    let mut out = Array3::zeros((heads, len, len));
    if table.ncols() == 0 {
        return out;
    }
    for h in 0..heads {
        for i in 0..len {
            for j in 0..len {
                out[[h, i, j]] = table[[h, offset_index(i, j, max_offset)]];
            }
        }
    }
    out
}

#[inline]
pub(crate) fn offset_index(i: usize, j: usize, max_offset: usize) -> usize {
    let m = max_offset as isize;
    ((j as isize - i as isize).clamp(-m, m) + m) as usize
}

impl<T: Real> SelfAttention<T> {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize, relative: bool, max_offset: usize) -> Self {
        let table_width = if relative { 2 * max_offset + 1 } else { 0 };
        Self {
            norm: LayerNorm::new(dim),
            query: Linear::new(rng, dim, dim),
            key: Linear::new(rng, dim, dim),
            value: Linear::new(rng, dim, dim),
            output: Linear::new(rng, dim, dim),
            relative_bias: Array2::zeros((heads, table_width)),
            num_heads: heads,
            max_offset,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.query.input_dim();
        Self {
            norm: LayerNorm::zeros(d),
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            relative_bias: Array2::zeros(self.relative_bias.dim()),
            num_heads: self.num_heads,
            max_offset: self.max_offset,
        }
    }

    fn head_dim(&self) -> usize {
        self.query.output_dim() / self.num_heads
    }

    pub(crate) fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, AttentionCache<T>) {
        let len = x.nrows();
        let (normed, norm) = self.norm.forward(x);
        let q = self.query.forward(normed.view());
        let k = self.key.forward(normed.view());
        let v = self.value.forward(normed.view());
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let bias = relative_bias(&self.relative_bias, len, self.max_offset);
        let mut probs = Array3::zeros((self.num_heads, len, len));
        let mut context = Array2::zeros((len, self.num_heads * dh));
        for h in 0..self.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut logits = q.slice(cols).dot(&k.slice(cols).t());
            logits.mapv_inplace(|v| v * scale);
            logits += &bias.index_axis(Axis(0), h);
            softmax_rows(&mut logits);
            context.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
            probs.index_axis_mut(Axis(0), h).assign(&logits);
        }
        let out = self.output.forward(context.view());
        (
            out,
            AttentionCache {
                norm,
                normed,
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &AttentionCache<T>, dy: ArrayView2<T>, grad: &mut Self) -> Array2<T> {
        let len = dy.nrows();
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let dcontext = self.output.backward(cache.context.view(), dy, &mut grad.output);
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        let relative = self.relative_bias.ncols() > 0;
        for h in 0..self.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = cache.probs.index_axis(Axis(0), h);
            let dctx_h = dcontext.slice(cols);
            let dp = dctx_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            // softmax backward: ds = p ⊙ (dp − Σ_j dp·p)
            let mut ds = &p * &dp;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.sum();
                row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
            }
            if relative {
                for i in 0..len {
                    for j in 0..len {
                        grad.relative_bias[[h, offset_index(i, j, self.max_offset)]] += ds[[i, j]];
                    }
                }
            }
            ds.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dnormed = self.query.backward(cache.normed.view(), dq.view(), &mut grad.query);
        dnormed += &self.key.backward(cache.normed.view(), dk.view(), &mut grad.key);
        dnormed += &self.value.backward(cache.normed.view(), dv.view(), &mut grad.value);
        self.norm.backward(&cache.norm, dnormed.view(), &mut grad.norm)
    }

    pub fn cast<U: Real>(&self) -> SelfAttention<U> {
        SelfAttention {
            norm: self.norm.cast(),
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
            relative_bias: crate::nn::cast2(&self.relative_bias),
            num_heads: self.num_heads,
            max_offset: self.max_offset,
        }
    }
}

pub(crate) fn softmax_rows<T: Real>(logits: &mut Array2<T>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Real> Parameterized<T> for SelfAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.norm.visit(&join(prefix, "norm"), out);
        self.query.visit(&join(prefix, "query"), out);
        self.key.visit(&join(prefix, "key"), out);
        self.value.visit(&join(prefix, "value"), out);
        self.output.visit(&join(prefix, "output"), out);
        if self.relative_bias.ncols() > 0 {
            push(out, prefix, "relative_bias", &self.relative_bias);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.norm.visit_mut(&join(prefix, "norm"), out);
        self.query.visit_mut(&join(prefix, "query"), out);
        self.key.visit_mut(&join(prefix, "key"), out);
        self.value.visit_mut(&join(prefix, "value"), out);
        self.output.visit_mut(&join(prefix, "output"), out);
        if self.relative_bias.ncols() > 0 {
            push_mut(out, prefix, "relative_bias", &mut self.relative_bias);
        }
    }
}
