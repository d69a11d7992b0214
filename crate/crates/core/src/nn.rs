//! Minimal dense layer library with hand-written backward passes.
//!
//! Every layer works on one sequence at a time (`L × d` matrices). Forward
//! passes return a cache that the matching backward pass consumes; parameter
//! gradients accumulate into [`Param::grad`]. Row reductions (softmax, layer
//! norm) are sequential loops so that a row's result never depends on how
//! many other rows or masked columns share the matrix.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Name recorded in checkpoint headers.
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}
impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[inline]
pub fn sc<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Scalar> {
    pub value: Array2<F>,
    pub grad: Array2<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Array2<F>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Array2::zeros((rows, cols)))
    }

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        Param::new(Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = rng.sample(StandardNormal);
            sc::<F>(z * std)
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn cast<G: Scalar>(&self) -> Param<G> {
        Param::new(self.value.mapv(|v| sc::<G>(v.to_f64().unwrap())))
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named-parameter traversal in a fixed order.
pub trait Module<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F: Scalar> {
    /// `in × out`
    pub w: Param<F>,
    /// `1 × out`
    pub b: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::normal(input, output, std, rng),
            b: Param::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Param::zeros(input, output),
            b: Param::zeros(1, output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            w: Param::new(Array2::eye(dim)),
            b: Param::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w.value);
        y += &self.b.value.row(0);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &ArrayView2<F>, dy: &ArrayView2<F>) -> Array2<F> {
        self.accumulate(x, dy);
        dy.dot(&self.w.value.t())
    }

    pub fn accumulate(&mut self, x: &ArrayView2<F>, dy: &ArrayView2<F>) {
        general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut self.w.grad);
        let mut gb = self.b.grad.row_mut(0);
        for row in dy.rows() {
            for (g, &v) in gb.iter_mut().zip(row.iter()) {
                *g += v;
            }
        }
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F: Scalar> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Array2::ones((1, dim))),
            beta: Param::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let (rows, d) = x.dim();
        let inv_d = F::one() / sc::<F>(d as f64);
        let eps = sc::<F>(LN_EPS);
        let x = x.as_standard_layout();
        let mut xhat = Array2::zeros((rows, d));
        let mut rstd = Array1::zeros(rows);
        let mut y = Array2::zeros((rows, d));
        let g = self.gamma.value.as_slice().expect("standard layout");
        let b = self.beta.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let hs = xhat.as_slice_mut().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for r in 0..rows {
            let xr = &xs[r * d..(r + 1) * d];
            let mean = xr.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
            let var = xr.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let hr = &mut hs[r * d..(r + 1) * d];
            let yr = &mut ys[r * d..(r + 1) * d];
            for c in 0..d {
                let h = (xr[c] - mean) * rs;
                hr[c] = h;
                yr[c] = h * g[c] + b[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: &ArrayView2<F>) -> Array2<F> {
        let (rows, d) = dy.dim();
        let inv_d = F::one() / sc::<F>(d as f64);
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let hs = cache.xhat.as_slice().expect("standard layout");
        let gamma = self.gamma.value.as_slice().expect("standard layout");
        let gg = self.gamma.grad.as_slice_mut().expect("standard layout");
        let bg = self.beta.grad.as_slice_mut().expect("standard layout");
        let mut dx = Array2::zeros((rows, d));
        let dxs = dx.as_slice_mut().expect("standard layout");
        for r in 0..rows {
            let (hr, gr) = (&hs[r * d..(r + 1) * d], &dys[r * d..(r + 1) * d]);
            let mut sum_dh = F::zero();
            let mut sum_dh_h = F::zero();
            for c in 0..d {
                let (h, g) = (hr[c], gr[c]);
                gg[c] += g * h;
                bg[c] += g;
                let dh = g * gamma[c];
                sum_dh += dh;
                sum_dh_h += dh * h;
            }
            let m1 = sum_dh * inv_d;
            let m2 = sum_dh_h * inv_d;
            let rs = cache.rstd[r];
            let out = &mut dxs[r * d..(r + 1) * d];
            for c in 0..d {
                out[c] = rs * (gr[c] * gamma[c] - m1 - hr[c] * m2);
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for LayerNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// `tanh` through one `exp`; saturates cleanly at both ends.
fn tanh_exp<F: Scalar>(u: F) -> F {
    F::one() - sc::<F>(2.0) / ((u + u).exp() + F::one())
}

fn gelu_inner<F: Scalar>(x: F) -> F {
    sc::<F>(GELU_C) * (x + sc::<F>(GELU_K) * x * x * x)
}

pub fn gelu<F: Scalar>(x: F) -> F {
    sc::<F>(0.5) * x * (F::one() + tanh_exp(gelu_inner(x)))
}

/// GELU derivative given `t = tanh(inner(x))`.
fn gelu_grad_t<F: Scalar>(x: F, t: F) -> F {
    let c = sc::<F>(GELU_C);
    let k = sc::<F>(GELU_K);
    let half = sc::<F>(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + sc::<F>(3.0) * k * x * x)
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    gelu_grad_t(x, tanh_exp(gelu_inner(x)))
}

/// Row-wise softmax over the first `valid[r]` columns; remaining columns are exactly 0.
fn softmax_prefix<F: Scalar>(scores: &mut Array2<F>, valid: impl Fn(usize) -> usize) {
    let cols = scores.ncols();
    for (r, mut row) in scores.rows_mut().into_iter().enumerate() {
        let n = valid(r).min(cols);
        let mut m = F::neg_infinity();
        for &v in row.iter().take(n) {
            if v > m {
                m = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut().take(n) {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for (c, v) in row.iter_mut().enumerate() {
            if c < n {
                *v *= inv;
            } else {
                *v = F::zero();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F: Scalar> {
    /// Fused query/key/value projection, `d × 3d`.
    pub qkv: Linear<F>,
    pub out: Linear<F>,
    pub n_heads: usize,
    pub causal: bool,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F: Scalar> {
    x: Array2<F>,
    qkv: Array2<F>,
    /// Per-head `L × L` attention weights.
    pub probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

/// Keys and values of the prefix processed so far, for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<F: Scalar> {
    k: Array2<F>,
    v: Array2<F>,
    len: usize,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(capacity: usize, d: usize) -> Self {
        KvCache {
            k: Array2::zeros((capacity, d)),
            v: Array2::zeros((capacity, d)),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<F: Scalar> Attention<F> {
    pub fn new(d: usize, n_heads: usize, causal: bool, std: f64, rng: &mut impl Rng) -> Self {
        assert_eq!(d % n_heads, 0, "d_model must be divisible by n_heads");
        Attention {
            qkv: Linear::new(d, 3 * d, std, rng),
            out: Linear::new(d, d, std, rng),
            n_heads,
            causal,
        }
    }

    fn dims(&self) -> (usize, usize) {
        let d = self.out.w.value.nrows();
        (d, d / self.n_heads)
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, AttentionCache<F>) {
        let l = x.nrows();
        let (d, dh) = self.dims();
        let scale = F::one() / sc::<F>(dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut ctx = Array2::zeros((l, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            p *= scale;
            if self.causal {
                softmax_prefix(&mut p, |r| r + 1);
            } else {
                softmax_prefix(&mut p, |_| l);
            }
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let y = self.out.forward(&ctx.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<F>, dy: &ArrayView2<F>) -> Array2<F> {
        let l = dy.nrows();
        let (d, dh) = self.dims();
        let scale = F::one() / sc::<F>(dh as f64).sqrt();
        let dctx = self.out.backward(&cache.ctx.view(), dy);
        let mut dqkv = Array2::zeros((l, 3 * d));
        for h in 0..self.n_heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &cache.probs[h];
            let dc = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dc.dot(&v.t());
            let dv = p.t().dot(&dc);
            let mut ds = dp;
            for (mut dr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                let (dr, pr) = (dr.as_slice_mut().expect("standard layout"), pr.as_slice().expect("standard layout"));
                let dot = dr.iter().zip(pr).fold(F::zero(), |a, (&g, &q)| a + g * q);
                for (g, &q) in dr.iter_mut().zip(pr) {
                    *g = q * (*g - dot) * scale;
                }
            }
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                .assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
        self.qkv.backward(&cache.x.view(), &dqkv.view())
    }

    /// Causal attention for `x` (new rows appended after the cached prefix).
    pub fn forward_cached(&self, x: &ArrayView2<F>, kv: &mut KvCache<F>) -> Array2<F> {
        let n = x.nrows();
        let (d, dh) = self.dims();
        let scale = F::one() / sc::<F>(dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let start = kv.len;
        kv.k.slice_mut(s![start..start + n, ..]).assign(&qkv.slice(s![.., d..2 * d]));
        kv.v.slice_mut(s![start..start + n, ..]).assign(&qkv.slice(s![.., 2 * d..]));
        kv.len += n;
        let total = kv.len;
        let mut ctx = Array2::zeros((n, d));
        for h in 0..self.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = kv.k.slice(s![..total, h * dh..(h + 1) * dh]);
            let v = kv.v.slice(s![..total, h * dh..(h + 1) * dh]);
            let mut p = q.dot(&k.t());
            p *= scale;
            softmax_prefix(&mut p, |r| start + r + 1);
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
        }
        self.out.forward(&ctx.view())
    }
}

impl<F: Scalar> Module<F> for Attention<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Pre-norm transformer block: `h = x + attn(ln1(x))`, `y = h + ffn(ln2(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F: Scalar> {
    pub ln1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F: Scalar> {
    ln1: LayerNormCache<F>,
    pub attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    f_in: Array2<F>,
    pre: Array2<F>,
    /// `tanh` of the GELU inner term, reused by the backward pass.
    th: Array2<F>,
    act: Array2<F>,
}

impl<F: Scalar> Block<F> {
    pub fn new(d: usize, n_heads: usize, ffn_mult: usize, causal: bool, n_layers: usize, rng: &mut impl Rng) -> Self {
        let std = 0.02;
        let resid_std = std / (2.0 * n_layers as f64).sqrt();
        let mut attn = Attention::new(d, n_heads, causal, std, rng);
        attn.out = Linear::new(d, d, resid_std, rng);
        Block {
            ln1: LayerNorm::new(d),
            attn,
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, ffn_mult * d, std, rng),
            fc2: Linear::new(ffn_mult * d, d, resid_std, rng),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, BlockCache<F>) {
        let (a_in, ln1) = self.ln1.forward(x);
        let (a_out, attn) = self.attn.forward(&a_in.view());
        let h = &a_out + x;
        let (f_in, ln2) = self.ln2.forward(&h.view());
        let pre = self.fc1.forward(&f_in.view());
        let th = pre.mapv(|v| tanh_exp(gelu_inner(v)));
        let mut act = pre.clone();
        ndarray::Zip::from(&mut act)
            .and(&th)
            .for_each(|a, &t| *a = sc::<F>(0.5) * *a * (F::one() + t));
        let y = self.fc2.forward(&act.view()) + &h;
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                f_in,
                pre,
                th,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, dy: &ArrayView2<F>) -> Array2<F> {
        let dact = self.fc2.backward(&cache.act.view(), dy);
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre)
            .and(&cache.th)
            .for_each(|g, &x, &t| *g *= gelu_grad_t(x, t));
        let df_in = self.fc1.backward(&cache.f_in.view(), &dpre.view());
        let mut dh = self.ln2.backward(&cache.ln2, &df_in.view());
        dh += dy;
        let da_in = self.attn.backward(&cache.attn, &dh.view());
        let mut dx = self.ln1.backward(&cache.ln1, &da_in.view());
        dx += &dh;
        dx
    }

    pub fn forward_cached(&self, x: &ArrayView2<F>, kv: &mut KvCache<F>) -> Array2<F> {
        let (a_in, _) = self.ln1.forward(x);
        let a_out = self.attn.forward_cached(&a_in.view(), kv);
        let h = &a_out + x;
        let (f_in, _) = self.ln2.forward(&h.view());
        let act = self.fc1.forward(&f_in.view()).mapv(gelu);
        self.fc2.forward(&act.view()) + &h
    }
}

impl<F: Scalar> Module<F> for Block<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Mean token cross-entropy over `logits` rows; returns the loss and `dL/dlogits`.
pub fn cross_entropy<F: Scalar>(logits: &ArrayView2<F>, targets: &[usize]) -> (F, Array2<F>) {
    assert_eq!(logits.nrows(), targets.len());
    let n = sc::<F>(targets.len() as f64);
    let mut grad = logits.to_owned();
    softmax_prefix(&mut grad, |_| logits.ncols());
    let mut loss = F::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mut m = F::neg_infinity();
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut s = F::zero();
        for &v in row.iter() {
            s += (v - m).exp();
        }
        loss += m + s.ln() - row[t];
        grad[[r, t]] -= F::one();
    }
    grad /= n;
    (loss / n, grad)
}

/// Sum of rows, sequential.
pub fn sum_rows<F: Scalar>(x: &ArrayView2<F>) -> Array1<F> {
    x.sum_axis(Axis(0))
}
