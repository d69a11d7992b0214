//! DDPM noise schedule and the transformer-encoder noise predictor
//! conditioned on the backbone's reconstructive tokens.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, sc, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Module, Param, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t: usize,
    /// Index `i` holds step `t = i + 1`.
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={t}, [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { t, betas, alphas, alpha_bars })
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(100, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let prev = if t == 1 { 1.0 } else { self.alpha_bar(t - 1) };
        self.betas[t - 1] * (1.0 - prev) / (1.0 - self.alpha_bar(t))
    }

    pub fn q_sample<F: Scalar>(&self, z0: &ArrayView2<F>, t: usize, eps: &ArrayView2<F>) -> Result<Array2<F>> {
        if z0.dim() != eps.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", z0.dim()),
                got: format!("{:?}", eps.dim()),
            });
        }
        if t == 0 || t > self.t {
            return Err(Error::InvalidRange(format!("t = {t} outside 1..={}", self.t)));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (sc::<F>(ab.sqrt()), sc::<F>((1.0 - ab).sqrt()));
        Ok(z0.mapv(|v| v * a) + &eps.mapv(|v| v * b))
    }

    pub fn sample_t(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(1..=self.t)
    }
}

pub fn standard_normal<F: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || sc::<F>(rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Token width; equals the scene latent dim `k`.
    pub d_tok: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Rows of `h_R`.
    pub n_cond: usize,
    /// Largest number of noisy target tokens.
    pub max_targets: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_tok: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 4,
            n_cond: 128,
            max_targets: 64,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl DenoiserConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Sinusoidal embedding of `t` with `d` channels.
pub fn timestep_embedding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let x = t as f64 * freq;
            if i % 2 == 0 {
                x.sin()
            } else {
                x.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F: Scalar> {
    pub config: DenoiserConfig,
    pub schedule: DiffusionSchedule,
    pub time_proj: Linear<F>,
    pub cond_proj: Linear<F>,
    pub cond_pos: Param<F>,
    pub z_pos: Param<F>,
    /// Rows: timestep, condition, noisy target.
    pub type_emb: Param<F>,
    pub blocks: Vec<Block<F>>,
    pub ln_f: LayerNorm<F>,
    pub out: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct DenoiserCache<F: Scalar> {
    temb: Array2<F>,
    h_r: Array2<F>,
    n_targets: usize,
    blocks: Vec<BlockCache<F>>,
    ln_f: LayerNormCache<F>,
    hidden: Array2<F>,
}

impl<F: Scalar> Denoiser<F> {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = config.d_tok;
        if d == 0 || config.n_heads == 0 || d % config.n_heads != 0 || config.n_layers == 0 {
            return Err(Error::Config(format!(
                "denoiser d_tok {d} must be a positive multiple of n_heads {}",
                config.n_heads
            )));
        }
        let schedule = config.schedule()?;
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(d, config.n_heads, config.ffn_mult, false, config.n_layers, rng))
            .collect();
        Ok(Denoiser {
            time_proj: Linear::new(d, d, (1.0 / d as f64).sqrt(), rng),
            cond_proj: Linear::identity(d),
            cond_pos: Param::normal(config.n_cond, d, 0.02, rng),
            z_pos: Param::normal(config.max_targets, d, 0.02, rng),
            type_emb: Param::normal(3, d, 0.02, rng),
            blocks,
            ln_f: LayerNorm::new(d),
            out: Linear::new(d, d, 0.02, rng),
            schedule,
            config,
        })
    }

    fn check_shapes(&self, z_t: &ArrayView2<F>, h_r: &ArrayView2<F>) -> Result<()> {
        let c = &self.config;
        if h_r.dim() != (c.n_cond, c.d_tok) || z_t.ncols() != c.d_tok || z_t.nrows() == 0 || z_t.nrows() > c.max_targets {
            return Err(Error::ShapeMismatch {
                expected: format!("h_R {} x {}, z_t at most {} x {}", c.n_cond, c.d_tok, c.max_targets, c.d_tok),
                got: format!("h_R {:?}, z_t {:?}", h_r.dim(), z_t.dim()),
            });
        }
        Ok(())
    }

    /// `ε̂ = 𝒟(z_t; h_R, t)` over `[t] ++ cond(h_R) ++ z_t` with full attention.
    pub fn forward(&self, z_t: &ArrayView2<F>, h_r: &ArrayView2<F>, t: usize) -> Result<(Array2<F>, DenoiserCache<F>)> {
        self.check_shapes(z_t, h_r)?;
        let d = self.config.d_tok;
        let nc = self.config.n_cond;
        let n = z_t.nrows();
        let temb = Array2::from_shape_vec((1, d), timestep_embedding(t, d).into_iter().map(sc::<F>).collect())
            .expect("shape");
        let mut x = Array2::zeros((1 + nc + n, d));
        let mut row0 = self.time_proj.forward(&temb.view());
        row0 += &self.type_emb.value.row(0);
        x.slice_mut(s![0..1, ..]).assign(&row0);
        let mut c = self.cond_proj.forward(h_r);
        c += &self.cond_pos.value;
        c += &self.type_emb.value.row(1);
        x.slice_mut(s![1..1 + nc, ..]).assign(&c);
        let mut z = z_t.to_owned();
        z += &self.z_pos.value.slice(s![..n, ..]);
        z += &self.type_emb.value.row(2);
        x.slice_mut(s![1 + nc.., ..]).assign(&z);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward(&x.view());
            x = y;
            caches.push(cache);
        }
        let (hidden, ln_f) = self.ln_f.forward(&x.view());
        let eps = self.out.forward(&hidden.slice(s![1 + nc.., ..]));
        if !eps.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation("denoiser output".into()));
        }
        Ok((
            eps,
            DenoiserCache {
                temb,
                h_r: h_r.to_owned(),
                n_targets: n,
                blocks: caches,
                ln_f,
                hidden,
            },
        ))
    }

    pub fn denoise_predict(&self, z_t: &ArrayView2<F>, h_r: &ArrayView2<F>, t: usize) -> Result<Array2<F>> {
        Ok(self.forward(z_t, h_r, t)?.0)
    }

    /// Accumulates parameter gradients and returns `dL/dh_R`.
    pub fn backward(&mut self, cache: &DenoiserCache<F>, d_eps: &ArrayView2<F>) -> Array2<F> {
        let nc = self.config.n_cond;
        let n = cache.n_targets;
        let mut dh = Array2::zeros(cache.hidden.raw_dim());
        let de = self.out.backward(&cache.hidden.slice(s![1 + nc.., ..]), d_eps);
        dh.slice_mut(s![1 + nc.., ..]).assign(&de);
        let mut dx = self.ln_f.backward(&cache.ln_f, &dh.view());
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = b.backward(c, &dx.view());
        }
        let d0 = dx.slice(s![0..1, ..]);
        self.time_proj.accumulate(&cache.temb.view(), &d0);
        let dc = dx.slice(s![1..1 + nc, ..]);
        self.cond_pos.grad += &dc;
        let dz = dx.slice(s![1 + nc.., ..]);
        let mut zg = self.z_pos.grad.slice_mut(s![..n, ..]);
        zg += &dz;
        for (row, part) in [(0, d0), (1, dc), (2, dz)] {
            let mut g = self.type_emb.grad.row_mut(row);
            for r in part.rows() {
                g += &r;
            }
        }
        self.cond_proj.backward(&cache.h_r.view(), &dc)
    }

    /// Mean squared error between `ε̂` and `ε` for a given `(t, ε)`.
    pub fn loss_at(&self, h_r: &ArrayView2<F>, z0: &ArrayView2<F>, t: usize, eps: &ArrayView2<F>) -> Result<(F, Array2<F>, DenoiserCache<F>)> {
        let z_t = self.schedule.q_sample(z0, t, eps)?;
        let (pred, cache) = self.forward(&z_t.view(), h_r, t)?;
        let diff = &pred - eps;
        let n = sc::<F>(diff.len() as f64);
        let loss = diff.iter().fold(F::zero(), |a, &v| a + v * v) / n;
        let grad = diff.mapv(|v| v * sc::<F>(2.0) / n);
        Ok((loss, grad, cache))
    }

    /// Draws `t` uniformly and `ε ~ N(0, I)`, returns the loss value.
    pub fn recon_loss(&self, h_r: &ArrayView2<F>, z0: &ArrayView2<F>, rng: &mut impl Rng) -> Result<F> {
        let t = self.schedule.sample_t(rng);
        let eps = standard_normal(z0.nrows(), z0.ncols(), rng);
        Ok(self.loss_at(h_r, z0, t, &eps.view())?.0)
    }

    /// Ancestral sampling of `n` target tokens.
    pub fn sample(&self, h_r: &ArrayView2<F>, n: usize, rng: &mut impl Rng) -> Result<Array2<F>> {
        let d = self.config.d_tok;
        let mut z = standard_normal::<F>(n, d, rng);
        for t in (1..=self.schedule.t).rev() {
            let eps = self.denoise_predict(&z.view(), h_r, t)?;
            z = self.reverse_step(&z.view(), &eps.view(), t);
            if t > 1 {
                let sigma = sc::<F>(self.schedule.posterior_variance(t).sqrt());
                let noise = standard_normal::<F>(n, d, rng);
                z += &noise.mapv(|v| v * sigma);
            }
        }
        Ok(z)
    }

    /// Posterior mean `(z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
    pub fn reverse_step(&self, z_t: &ArrayView2<F>, eps: &ArrayView2<F>, t: usize) -> Array2<F> {
        let s = &self.schedule;
        let coef = sc::<F>(s.betas[t - 1] / (1.0 - s.alpha_bar(t)).sqrt());
        let inv = sc::<F>(1.0 / s.alphas[t - 1].sqrt());
        (z_t - &eps.mapv(|v| v * coef)).mapv(|v| v * inv)
    }
}

impl<F: Scalar> Module<F> for Denoiser<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.time_proj.visit(&join(prefix, "time_proj"), f);
        self.cond_proj.visit(&join(prefix, "cond_proj"), f);
        f(join(prefix, "cond_pos"), &self.cond_pos);
        f(join(prefix, "z_pos"), &self.z_pos);
        f(join(prefix, "type_emb"), &self.type_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.time_proj.visit_mut(&join(prefix, "time_proj"), f);
        self.cond_proj.visit_mut(&join(prefix, "cond_proj"), f);
        f(join(prefix, "cond_pos"), &mut self.cond_pos);
        f(join(prefix, "z_pos"), &mut self.z_pos);
        f(join(prefix, "type_emb"), &mut self.type_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
