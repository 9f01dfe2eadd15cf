//! One Conformer block:
//! half-FFN → self-attention → convolution module → half-FFN → layer norm,
//! each sub-module on a pre-norm residual branch with a learned per-channel
//! output scale.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::attention::{AttentionCache, SelfAttention};
use super::EncoderConfig;
use crate::nn::{sigmoid, swish, swish_grad, uniform, LayerNorm, LayerNormCache, Linear};
use crate::params::{join, push, push_mut, Parameterized};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T: Real> {
    pub norm: LayerNorm<T>,
    pub expand: Linear<T>,
    pub project: Linear<T>,
}

#[derive(Debug, Clone, Default)]
struct FeedForwardCache<T: Real> {
    norm: LayerNormCache<T>,
    normed: Array2<T>,
    hidden: Array2<T>,
    activated: Array2<T>,
}

impl<T: Real> FeedForward<T> {
    fn new<R: Rng>(rng: &mut R, dim: usize, expansion: usize) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            expand: Linear::new(rng, dim, dim * expansion),
            project: Linear::new(rng, dim * expansion, dim),
        }
    }

    fn zeros_like(&self) -> Self {
        let (d, h) = (self.expand.input_dim(), self.expand.output_dim());
        Self {
            norm: LayerNorm::zeros(d),
            expand: Linear::zeros(d, h),
            project: Linear::zeros(h, d),
        }
    }

    fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, FeedForwardCache<T>) {
        let (normed, norm) = self.norm.forward(x);
        let hidden = self.expand.forward(normed.view());
        let activated = hidden.mapv(swish);
        let out = self.project.forward(activated.view());
        (
            out,
            FeedForwardCache {
                norm,
                normed,
                hidden,
                activated,
            },
        )
    }

    fn backward(&self, c: &FeedForwardCache<T>, dy: ArrayView2<T>, g: &mut Self) -> Array2<T> {
        let mut da = self.project.backward(c.activated.view(), dy, &mut g.project);
        Zip::from(&mut da).and(&c.hidden).for_each(|d, &h| *d *= swish_grad(h));
        let dn = self.expand.backward(c.normed.view(), da.view(), &mut g.expand);
        self.norm.backward(&c.norm, dn.view(), &mut g.norm)
    }

    fn cast<U: Real>(&self) -> FeedForward<U> {
        FeedForward {
            norm: self.norm.cast(),
            expand: self.expand.cast(),
            project: self.project.cast(),
        }
    }
}

impl<T: Real> Parameterized<T> for FeedForward<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.norm.visit(&join(prefix, "norm"), out);
        self.expand.visit(&join(prefix, "expand"), out);
        self.project.visit(&join(prefix, "project"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.norm.visit_mut(&join(prefix, "norm"), out);
        self.expand.visit_mut(&join(prefix, "expand"), out);
        self.project.visit_mut(&join(prefix, "project"), out);
    }
}

/// Pointwise conv + GLU → depthwise conv → layer norm → swish → pointwise conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvModule<T: Real> {
    pub norm: LayerNorm<T>,
    pub pointwise_in: Linear<T>,
    /// `kernel × D`
    pub depthwise: Array2<T>,
    pub depthwise_bias: Array1<T>,
    pub inner_norm: LayerNorm<T>,
    pub pointwise_out: Linear<T>,
}

#[derive(Debug, Clone, Default)]
struct ConvCache<T: Real> {
    norm: LayerNormCache<T>,
    normed: Array2<T>,
    gates: Array2<T>,
    glu: Array2<T>,
    inner: LayerNormCache<T>,
    inner_out: Array2<T>,
    activated: Array2<T>,
}

impl<T: Real> ConvModule<T> {
    fn new<R: Rng>(rng: &mut R, dim: usize, kernel: usize) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            pointwise_in: Linear::new(rng, dim, 2 * dim),
            depthwise: uniform(rng, (kernel, dim), (1.0 / kernel as f64).sqrt()),
            depthwise_bias: Array1::zeros(dim),
            inner_norm: LayerNorm::new(dim),
            pointwise_out: Linear::new(rng, dim, dim),
        }
    }

    fn zeros_like(&self) -> Self {
        let d = self.depthwise.ncols();
        Self {
            norm: LayerNorm::zeros(d),
            pointwise_in: Linear::zeros(d, 2 * d),
            depthwise: Array2::zeros(self.depthwise.dim()),
            depthwise_bias: Array1::zeros(d),
            inner_norm: LayerNorm::zeros(d),
            pointwise_out: Linear::zeros(d, d),
        }
    }

    #[inline]
    fn source(&self, t: usize, tap: usize, len: usize) -> usize {
        let left = (self.depthwise.nrows() - 1) / 2;
        ((t + tap) as isize - left as isize).clamp(0, len as isize - 1) as usize
    }

    fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, ConvCache<T>) {
        let (len, d) = x.dim();
        let (normed, norm) = self.norm.forward(x);
        let gates = self.pointwise_in.forward(normed.view());
        let mut glu = Array2::zeros((len, d));
        Zip::from(&mut glu)
            .and(&gates.slice(s![.., ..d]))
            .and(&gates.slice(s![.., d..]))
            .for_each(|o, &a, &b| *o = a * sigmoid(b));
        let mut conv = Array2::zeros((len, d));
        for t in 0..len {
            let mut row = conv.row_mut(t);
            row.assign(&self.depthwise_bias);
            for tap in 0..self.depthwise.nrows() {
                let src = glu.row(self.source(t, tap, len));
                Zip::from(&mut row)
                    .and(&src)
                    .and(&self.depthwise.row(tap))
                    .for_each(|o, &v, &w| *o += v * w);
            }
        }
        let (inner_out, inner) = self.inner_norm.forward(conv.view());
        let activated = inner_out.mapv(swish);
        let out = self.pointwise_out.forward(activated.view());
        (
            out,
            ConvCache {
                norm,
                normed,
                gates,
                glu,
                inner,
                inner_out,
                activated,
            },
        )
    }

    fn backward(&self, c: &ConvCache<T>, dy: ArrayView2<T>, g: &mut Self) -> Array2<T> {
        let (len, d) = dy.dim();
        let mut dact = self
            .pointwise_out
            .backward(c.activated.view(), dy, &mut g.pointwise_out);
        Zip::from(&mut dact)
            .and(&c.inner_out)
            .for_each(|v, &x| *v *= swish_grad(x));
        let dconv = self.inner_norm.backward(&c.inner, dact.view(), &mut g.inner_norm);
        g.depthwise_bias += &dconv.sum_axis(Axis(0));
        let mut dglu = Array2::<T>::zeros((len, d));
        for t in 0..len {
            let dr = dconv.row(t);
            for tap in 0..self.depthwise.nrows() {
                let src = self.source(t, tap, len);
                Zip::from(&mut g.depthwise.row_mut(tap))
                    .and(&dr)
                    .and(&c.glu.row(src))
                    .for_each(|gw, &dv, &v| *gw += dv * v);
                Zip::from(&mut dglu.row_mut(src))
                    .and(&dr)
                    .and(&self.depthwise.row(tap))
                    .for_each(|gv, &dv, &w| *gv += dv * w);
            }
        }
        let mut dgates = Array2::zeros((len, 2 * d));
        for t in 0..len {
            for ch in 0..d {
                let a = c.gates[[t, ch]];
                let sb = sigmoid(c.gates[[t, ch + d]]);
                let gv = dglu[[t, ch]];
                dgates[[t, ch]] = gv * sb;
                dgates[[t, ch + d]] = gv * a * sb * (T::one() - sb);
            }
        }
        let dn = self
            .pointwise_in
            .backward(c.normed.view(), dgates.view(), &mut g.pointwise_in);
        self.norm.backward(&c.norm, dn.view(), &mut g.norm)
    }

    fn cast<U: Real>(&self) -> ConvModule<U> {
        ConvModule {
            norm: self.norm.cast(),
            pointwise_in: self.pointwise_in.cast(),
            depthwise: crate::nn::cast2(&self.depthwise),
            depthwise_bias: crate::nn::cast1(&self.depthwise_bias),
            inner_norm: self.inner_norm.cast(),
            pointwise_out: self.pointwise_out.cast(),
        }
    }
}

impl<T: Real> Parameterized<T> for ConvModule<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.norm.visit(&join(prefix, "norm"), out);
        self.pointwise_in.visit(&join(prefix, "pointwise_in"), out);
        push(out, prefix, "depthwise", &self.depthwise);
        push(out, prefix, "depthwise_bias", &self.depthwise_bias);
        self.inner_norm.visit(&join(prefix, "inner_norm"), out);
        self.pointwise_out.visit(&join(prefix, "pointwise_out"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.norm.visit_mut(&join(prefix, "norm"), out);
        self.pointwise_in.visit_mut(&join(prefix, "pointwise_in"), out);
        push_mut(out, prefix, "depthwise", &mut self.depthwise);
        push_mut(out, prefix, "depthwise_bias", &mut self.depthwise_bias);
        self.inner_norm.visit_mut(&join(prefix, "inner_norm"), out);
        self.pointwise_out.visit_mut(&join(prefix, "pointwise_out"), out);
    }
}

/// Learned per-channel scales on the four residual branches.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchScales<T: Real> {
    pub ffn_in: Array1<T>,
    pub attention: Array1<T>,
    pub conv: Array1<T>,
    pub ffn_out: Array1<T>,
}

impl<T: Real> BranchScales<T> {
    fn filled(dim: usize, v: T) -> Self {
        Self {
            ffn_in: Array1::from_elem(dim, v),
            attention: Array1::from_elem(dim, v),
            conv: Array1::from_elem(dim, v),
            ffn_out: Array1::from_elem(dim, v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformerBlock<T: Real> {
    pub ffn_in: FeedForward<T>,
    pub attention: SelfAttention<T>,
    pub conv: ConvModule<T>,
    pub ffn_out: FeedForward<T>,
    pub scales: BranchScales<T>,
    /// `None` disables the closing layer norm.
    pub final_norm: Option<LayerNorm<T>>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache<T: Real> {
    ffn_in: FeedForwardCache<T>,
    ffn_in_out: Array2<T>,
    attention: AttentionCache<T>,
    attention_out: Array2<T>,
    conv: ConvCache<T>,
    conv_out: Array2<T>,
    ffn_out: FeedForwardCache<T>,
    ffn_out_out: Array2<T>,
    final_norm: Option<LayerNormCache<T>>,
    /// Inverted-dropout masks per branch (already scaled by 1/(1−p)).
    dropout: Option<[Array2<T>; 4]>,
}

impl<T: Real> BlockCache<T> {
    pub(crate) fn attention_probs(&self) -> &ndarray::Array3<T> {
        &self.attention.probs
    }
}

impl<T: Real> ConformerBlock<T> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &EncoderConfig) -> Self {
        let d = cfg.model_dim;
        Self {
            ffn_in: FeedForward::new(rng, d, cfg.ffn_expansion),
            attention: SelfAttention::new(rng, d, cfg.num_heads, cfg.relative_attention, cfg.max_relative_offset),
            conv: ConvModule::new(rng, d, cfg.conv_kernel),
            ffn_out: FeedForward::new(rng, d, cfg.ffn_expansion),
            scales: BranchScales::filled(d, T::one()),
            final_norm: cfg.final_norm.then(|| LayerNorm::new(d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.scales.ffn_in.len();
        Self {
            ffn_in: self.ffn_in.zeros_like(),
            attention: self.attention.zeros_like(),
            conv: self.conv.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
            scales: BranchScales::filled(d, T::zero()),
            final_norm: self.final_norm.as_ref().map(|_| LayerNorm::zeros(d)),
        }
    }

    pub(crate) fn forward<R: Rng>(
        &self,
        x: ArrayView2<T>,
        dropout: Option<(f64, &mut R)>,
    ) -> (Array2<T>, BlockCache<T>) {
        let half = T::lit(0.5);
        let masks = dropout.filter(|(p, _)| *p > 0.0).map(|(p, rng)| {
            let keep = T::lit(1.0 / (1.0 - p));
            let mut draw =
                || Array2::from_shape_simple_fn(x.dim(), || if rng.gen::<f64>() < p { T::zero() } else { keep });
            [draw(), draw(), draw(), draw()]
        });
        let branch = |out: &Array2<T>, scale: &Array1<T>, factor: T, i: usize| {
            let mut b = out * scale;
            b.mapv_inplace(|v| v * factor);
            if let Some(m) = &masks {
                b *= &m[i];
            }
            b
        };

        let (ffn_in_out, ffn_in) = self.ffn_in.forward(x);
        let h1 = &x + &branch(&ffn_in_out, &self.scales.ffn_in, half, 0);
        let (attention_out, attention) = self.attention.forward(h1.view());
        let h2 = &h1 + &branch(&attention_out, &self.scales.attention, T::one(), 1);
        let (conv_out, conv) = self.conv.forward(h2.view());
        let h3 = &h2 + &branch(&conv_out, &self.scales.conv, T::one(), 2);
        let (ffn_out_out, ffn_out) = self.ffn_out.forward(h3.view());
        let h4 = &h3 + &branch(&ffn_out_out, &self.scales.ffn_out, half, 3);
        let (y, final_norm) = match &self.final_norm {
            Some(ln) => {
                let (y, c) = ln.forward(h4.view());
                (y, Some(c))
            }
            None => (h4, None),
        };
        (
            y,
            BlockCache {
                ffn_in,
                ffn_in_out,
                attention,
                attention_out,
                conv,
                conv_out,
                ffn_out,
                ffn_out_out,
                final_norm,
                dropout: masks,
            },
        )
    }

    pub(crate) fn backward(&self, c: &BlockCache<T>, dy: ArrayView2<T>, g: &mut Self) -> Array2<T> {
        let half = T::lit(0.5);
        let mut dh = match (&self.final_norm, &c.final_norm, &mut g.final_norm) {
            (Some(ln), Some(cache), Some(gln)) => ln.backward(cache, dy, gln),
            _ => dy.to_owned(),
        };
        // Each residual step: h_next = h + factor·mask⊙scale⊙f(h).
        let step = |dh: &Array2<T>,
                    out: &Array2<T>,
                    scale: &Array1<T>,
                    gscale: &mut Array1<T>,
                    factor: T,
                    i: usize|
         -> Array2<T> {
            let mut dbranch = dh.mapv(|v| v * factor);
            if let Some(m) = &c.dropout {
                dbranch *= &m[i];
            }
            *gscale += &(&dbranch * out).sum_axis(Axis(0));
            dbranch * scale
        };

        let dout = step(
            &dh,
            &c.ffn_out_out,
            &self.scales.ffn_out,
            &mut g.scales.ffn_out,
            half,
            3,
        );
        dh += &self.ffn_out.backward(&c.ffn_out, dout.view(), &mut g.ffn_out);
        let dout = step(&dh, &c.conv_out, &self.scales.conv, &mut g.scales.conv, T::one(), 2);
        dh += &self.conv.backward(&c.conv, dout.view(), &mut g.conv);
        let dout = step(
            &dh,
            &c.attention_out,
            &self.scales.attention,
            &mut g.scales.attention,
            T::one(),
            1,
        );
        dh += &self.attention.backward(&c.attention, dout.view(), &mut g.attention);
        let dout = step(&dh, &c.ffn_in_out, &self.scales.ffn_in, &mut g.scales.ffn_in, half, 0);
        dh += &self.ffn_in.backward(&c.ffn_in, dout.view(), &mut g.ffn_in);
        dh
    }

    pub fn cast<U: Real>(&self) -> ConformerBlock<U> {
        ConformerBlock {
            ffn_in: self.ffn_in.cast(),
            attention: self.attention.cast(),
            conv: self.conv.cast(),
            ffn_out: self.ffn_out.cast(),
            scales: BranchScales {
                ffn_in: crate::nn::cast1(&self.scales.ffn_in),
                attention: crate::nn::cast1(&self.scales.attention),
                conv: crate::nn::cast1(&self.scales.conv),
                ffn_out: crate::nn::cast1(&self.scales.ffn_out),
            },
            final_norm: self.final_norm.as_ref().map(|n| n.cast()),
        }
    }
}

impl<T: Real> Parameterized<T> for ConformerBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.ffn_in.visit(&join(prefix, "ffn_in"), out);
        self.attention.visit(&join(prefix, "attention"), out);
        self.conv.visit(&join(prefix, "conv"), out);
        self.ffn_out.visit(&join(prefix, "ffn_out"), out);
        push(out, prefix, "scale.ffn_in", &self.scales.ffn_in);
        push(out, prefix, "scale.attention", &self.scales.attention);
        push(out, prefix, "scale.conv", &self.scales.conv);
        push(out, prefix, "scale.ffn_out", &self.scales.ffn_out);
        if let Some(n) = &self.final_norm {
            n.visit(&join(prefix, "final_norm"), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), out);
        self.attention.visit_mut(&join(prefix, "attention"), out);
        self.conv.visit_mut(&join(prefix, "conv"), out);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), out);
        push_mut(out, prefix, "scale.ffn_in", &mut self.scales.ffn_in);
        push_mut(out, prefix, "scale.attention", &mut self.scales.attention);
        push_mut(out, prefix, "scale.conv", &mut self.scales.conv);
        push_mut(out, prefix, "scale.ffn_out", &mut self.scales.ffn_out);
        if let Some(n) = &mut self.final_norm {
            n.visit_mut(&join(prefix, "final_norm"), out);
        }
    }
}
