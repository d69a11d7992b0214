//! Joint optimisation of the action cross-entropy and the diffusion
//! reconstruction loss, checkpoints, and finite-difference verification.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{Backbone, ModelConfig, PolicyInput};
use crate::container;
use crate::datapipe::{crop_gaze, AnnotatedEpisode, Corpus};
use crate::denoiser::{standard_normal, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, join, sc, Module, Param, Scalar};
use crate::raster::{BBox, Image};
use crate::simworld::{splitmix, ContinuousAction, EnvId};
use crate::tokenizers::{ActionCodec, SceneTokenizer, TextVocab, VocabLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Baseline,
    /// Explicit grounding: oracle crop appended as a third image.
    Eg,
    /// Chain-of-thought grounding: bbox tokens before the action.
    Cg,
    /// Implicit grounding: reconstruction of the gaze region.
    Ig,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::Baseline, Paradigm::Eg, Paradigm::Cg, Paradigm::Ig];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Baseline => "baseline",
            Paradigm::Eg => "eg",
            Paradigm::Cg => "cg",
            Paradigm::Ig => "ig",
        }
    }

    pub fn uses_crop_input(self) -> bool {
        self == Paradigm::Eg
    }

    /// Discarded tokens decoded before the action.
    pub fn lead_tokens(self) -> usize {
        if self == Paradigm::Cg {
            4
        } else {
            0
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown paradigm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// 16 scene tokens of the base-view gaze crop.
    Gaze,
    /// 64 scene tokens of the whole base frame.
    WholeImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub paradigm: Paradigm,
    pub recon_target: ReconTarget,
    /// Adds the wrist-view gaze crop to the reconstruction targets.
    pub recon_wrist: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_visual: f64,
    pub seed: u64,
    pub corpus: PathBuf,
    pub tokenizer: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    pub checkpoint: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub grad_clip_norm: f64,
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Restricts training episodes to these environments.
    pub envs: Option<Vec<EnvId>>,
    pub deterministic: bool,
    pub resume: bool,
    pub model: ModelConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            paradigm: Paradigm::Ig,
            recon_target: ReconTarget::Gaze,
            recon_wrist: false,
            batch_size: 32,
            steps: 20_000,
            learning_rate: 3e-4,
            lambda_visual: 1.0,
            seed: 0,
            corpus: PathBuf::from("corpus"),
            tokenizer: PathBuf::from("tokenizer.bin"),
            checkpoint: PathBuf::from("runs/train"),
            init_checkpoint: None,
            grad_clip_norm: 1.0,
            checkpoint_every: 500,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            envs: None,
            deterministic: true,
            resume: true,
            model: ModelConfig {
                n_layers: 2,
                ..Default::default()
            },
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    /// λ actually applied: zero outside implicit grounding.
    pub fn effective_lambda(&self) -> f64 {
        if self.paradigm == Paradigm::Ig {
            self.lambda_visual
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_visual >= 0.0) {
            return Err(Error::Config("lambda_visual must be >= 0".into()));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be positive".into()));
        }
        if self.model.recon_head_dim != self.denoiser.d_tok {
            return Err(Error::Config(format!(
                "recon_head_dim {} differs from denoiser d_tok {}",
                self.model.recon_head_dim, self.denoiser.d_tok
            )));
        }
        if self.denoiser.n_cond != self.model.image_tokens() {
            return Err(Error::Config(format!(
                "denoiser n_cond {} differs from image token count {}",
                self.denoiser.n_cond,
                self.model.image_tokens()
            )));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub loss_action: f64,
    pub loss_visual: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Backbone and denoiser optimised together.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair<F: Scalar> {
    pub backbone: Backbone<F>,
    pub denoiser: Denoiser<F>,
}

impl<F: Scalar> Module<F> for Pair<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.denoiser.visit(&join(prefix, "denoiser"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.denoiser.visit_mut(&join(prefix, "denoiser"), f);
    }
}

impl<F: Scalar> Pair<F> {
    pub fn new(model: ModelConfig, denoiser: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 3));
        Ok(Pair {
            backbone: Backbone::new(model, &mut rng)?,
            denoiser: Denoiser::new(denoiser, &mut rng)?,
        })
    }

    /// SHA-256 of the checkpoint payload.
    pub fn digest(&self) -> String {
        container::sha256_hex(&param_payload(self))
    }
}

/// One supervised example, ready for the model.
#[derive(Debug, Clone)]
pub struct PreparedSample<F: Scalar> {
    pub input: PolicyInput<F>,
    /// Teacher-forced targets: optional bbox tokens then action tokens.
    pub targets: Vec<usize>,
    /// Scene tokens to reconstruct.
    pub z0: Option<Array2<F>>,
}

/// CG target prefix `[x1 x2 y1 y2]`, coordinates normalised by the raster size.
pub fn bbox_tokens(codec: &ActionCodec, b: &BBox, width: usize, height: usize) -> Result<[usize; 4]> {
    let (w, h) = (width as f64, height as f64);
    Ok([
        codec.tokenize_unit(b.x_min as f64 / w)?,
        codec.tokenize_unit(b.x_max as f64 / w)?,
        codec.tokenize_unit(b.y_min as f64 / h)?,
        codec.tokenize_unit(b.y_max as f64 / h)?,
    ])
}

/// Index of training frames (every frame that has an action).
pub struct TrainData {
    pub episodes: Vec<AnnotatedEpisode>,
    pub index: Vec<(usize, usize)>,
    vocab: TextVocab,
    codec: ActionCodec,
}

impl TrainData {
    pub fn new(episodes: Vec<AnnotatedEpisode>) -> Result<Self> {
        let vocab = TextVocab::from_templates();
        let codec = ActionCodec::new(&VocabLayout::new(&vocab));
        let index: Vec<(usize, usize)> = episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.episode.actions.len()).map(move |f| (e, f)))
            .collect();
        if index.is_empty() {
            return Err(Error::Precondition("training data has no frames with actions".into()));
        }
        Ok(TrainData { episodes, index, vocab, codec })
    }

    pub fn load(corpus: &Path, envs: Option<&[EnvId]>) -> Result<Self> {
        let c = Corpus::open(corpus)?;
        let mut eps = Vec::new();
        for e in c.episodes() {
            let e = e?;
            if envs.is_none_or(|v| v.contains(&e.episode.env_id)) {
                eps.push(e);
            }
        }
        Self::new(eps)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn prepare<F: Scalar>(
        &self,
        i: usize,
        model: &Backbone<F>,
        config: &TrainConfig,
        tokenizer: Option<&SceneTokenizer>,
    ) -> Result<PreparedSample<F>> {
        let (e, f) = self.index[i];
        let ep = &self.episodes[e];
        let frame = &ep.episode.frames[f];
        let instruction = self.vocab.tokenize(ep.episode.frame_instruction(f))?;
        let crop = config.paradigm.uses_crop_input().then_some(&ep.crops[f]);
        let input = PolicyInput::from_images(model, instruction, &frame.base, &frame.wrist, crop)?;
        let mut targets = Vec::with_capacity(8);
        if config.paradigm == Paradigm::Cg {
            let b = ep.episode.gaze_boxes[f].base;
            targets.extend(bbox_tokens(&self.codec, &b, frame.base.width, frame.base.height)?);
        }
        targets.extend(self.codec.tokenize(&ep.episode.actions[f])?);
        let z0 = if config.effective_lambda() > 0.0 {
            let tok = tokenizer.ok_or(Error::NotFitted)?;
            let mut z = match config.recon_target {
                ReconTarget::Gaze => tok.encode(&ep.crops[f])?,
                ReconTarget::WholeImage => tok.encode(&frame.base)?,
            };
            if config.recon_wrist {
                if let Some(wb) = ep.episode.gaze_boxes[f].wrist {
                    let wz = tok.encode(&crop_gaze(&frame.wrist, &wb)?)?;
                    z = concatenate(Axis(0), &[z.view(), wz.view()]).expect("equal widths");
                }
            }
            Some(z.mapv(sc::<F>))
        } else {
            None
        };
        Ok(PreparedSample { input, targets, z0 })
    }
}

/// Diffusion draw for one sample.
#[derive(Debug, Clone)]
pub struct Noise<F: Scalar> {
    pub t: usize,
    pub eps: Array2<F>,
}

pub fn draw_noise<F: Scalar>(batch: &[PreparedSample<F>], denoiser: &Denoiser<F>, rng: &mut impl Rng) -> Vec<Option<Noise<F>>> {
    batch
        .iter()
        .map(|s| {
            s.z0.as_ref().map(|z| Noise {
                t: denoiser.schedule.sample_t(rng),
                eps: standard_normal(z.nrows(), z.ncols(), rng),
            })
        })
        .collect()
}

/// Batch-mean losses; accumulates `d(w_a·L_action + λ·L_visual)/dθ` into the grads.
pub fn loss_and_grad<F: Scalar>(
    pair: &mut Pair<F>,
    batch: &[PreparedSample<F>],
    noise: &[Option<Noise<F>>],
    w_action: f64,
    lambda: f64,
) -> Result<(f64, f64)> {
    let b = batch.len() as f64;
    let (mut la, mut lv) = (0.0, 0.0);
    for (s, nz) in batch.iter().zip(noise) {
        let prefix = &s.targets[..s.targets.len() - 1];
        let seq = pair.backbone.assemble_sequence(&s.input, prefix)?;
        let (out, cache) = pair.backbone.forward(&seq, false)?;
        let (l, mut dl) = cross_entropy(&out.action_logits.view(), &s.targets);
        la += l.to_f64().unwrap();
        dl *= sc::<F>(w_action / b);
        let d_hr = match (lambda > 0.0, &s.z0, nz) {
            (true, Some(z0), Some(n)) => {
                let (l, mut g, dc) = pair.denoiser.loss_at(&out.h_r.view(), &z0.view(), n.t, &n.eps.view())?;
                lv += l.to_f64().unwrap();
                g *= sc::<F>(lambda / b);
                Some(pair.denoiser.backward(&dc, &g.view()))
            }
            _ => None,
        };
        pair.backbone
            .backward(&seq, &cache, &dl.view(), d_hr.as_ref().map(|g| g.view()).as_ref());
    }
    Ok((la / b, lv / b))
}

/// Adaptive moment estimation with global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(module: &impl Module<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = Vec::new();
        module.visit("", &mut |_, p| m.push(Array2::zeros(p.value.raw_dim())));
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update with `grad · scale`; parameters with `skip(name)` are left alone.
    pub fn update(&mut self, module: &mut impl Module<F>, scale: f64, skip: &dyn Fn(&str) -> bool) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |name, p| {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            i += 1;
            if skip(&name) {
                return;
            }
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g.to_f64().unwrap() * scale;
                    let mn = b1 * m.to_f64().unwrap() + (1.0 - b1) * g;
                    let vn = b2 * v.to_f64().unwrap() + (1.0 - b2) * g * g;
                    *m = sc(mn);
                    *v = sc(vn);
                    let upd = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                    *w = sc(w.to_f64().unwrap() - upd);
                });
        });
    }
}

pub fn grad_norm<F: Scalar>(module: &impl Module<F>) -> f64 {
    let mut s = 0.0;
    module.visit("", &mut |_, p| {
        for g in p.grad.iter() {
            let g = g.to_f64().unwrap();
            s += g * g;
        }
    });
    s.sqrt()
}

/// One optimiser update on a prepared batch.
pub fn train_step<F: Scalar>(
    pair: &mut Pair<F>,
    opt: &mut Adam<F>,
    batch: &[PreparedSample<F>],
    config: &TrainConfig,
    rng: &mut impl Rng,
    step: usize,
) -> Result<TrainMetrics> {
    let start = Instant::now();
    pair.zero_grad();
    let lambda = config.effective_lambda();
    let noise = if lambda > 0.0 {
        draw_noise(batch, &pair.denoiser, rng)
    } else {
        vec![None; batch.len()]
    };
    let (la, lv) = match loss_and_grad(pair, batch, &noise, 1.0, lambda) {
        Err(Error::NonFiniteActivation(_)) => return Err(Error::NonFiniteLoss { batch: step as u64 }),
        r => r?,
    };
    let total = la + lambda * lv;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { batch: step as u64 });
    }
    let norm = grad_norm(pair);
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss { batch: step as u64 });
    }
    let scale = if norm > config.grad_clip_norm {
        config.grad_clip_norm / norm
    } else {
        1.0
    };
    let frozen_denoiser = lambda == 0.0;
    opt.update(pair, scale, &|n: &str| frozen_denoiser && n.starts_with("denoiser."));
    Ok(TrainMetrics {
        step,
        loss_action: la,
        loss_visual: lv,
        loss_total: total,
        grad_norm: norm,
        wall_ms: if config.deterministic { 0 } else { start.elapsed().as_millis() as u64 },
    })
}

fn param_payload<F: Scalar>(m: &impl Module<F>) -> Vec<u8> {
    let mut out = Vec::new();
    m.visit("", &mut |_, p| {
        out.extend(container::f32_bytes(p.value.iter().map(|v| v.to_f32().unwrap())));
    });
    out
}

fn param_table<F: Scalar>(m: &impl Module<F>) -> Vec<serde_json::Value> {
    let mut off = 0;
    let mut t = Vec::new();
    m.visit("", &mut |name, p| {
        t.push(json!({"name": name, "offset": off, "shape": [p.value.nrows(), p.value.ncols()]}));
        off += p.value.len();
    });
    t
}

fn write_atomic(path: &Path, header: serde_json::Value, payload: &[u8]) -> Result<String> {
    let tmp = path.with_extension("tmp");
    let d = container::write(&tmp, header, payload)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(d)
}

/// Writes backbone and denoiser parameters; returns the payload digest.
pub fn save_checkpoint<F: Scalar>(pair: &Pair<F>, path: &Path) -> Result<String> {
    let header = json!({
        "kind": "checkpoint",
        "dtype": "f32",
        "model": pair.backbone.config,
        "denoiser": pair.denoiser.config,
        "params": param_table(pair),
    });
    write_atomic(path, header, &param_payload(pair))
}

fn fill_params<F: Scalar>(m: &mut impl Module<F>, header: &serde_json::Value, payload: &[u8], path: &Path) -> Result<()> {
    let vals = container::read_f32s(payload);
    let table = header["params"].as_array().cloned().unwrap_or_default();
    let lookup: std::collections::HashMap<String, (usize, [usize; 2])> = table
        .iter()
        .filter_map(|e| {
            let shape = e["shape"].as_array()?;
            Some((
                e["name"].as_str()?.to_string(),
                (
                    e["offset"].as_u64()? as usize,
                    [shape.first()?.as_u64()? as usize, shape.get(1)?.as_u64()? as usize],
                ),
            ))
        })
        .collect();
    let mut err = None;
    m.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match lookup.get(&name) {
            Some(&(off, [r, c])) if [r, c] == [p.value.nrows(), p.value.ncols()] && off + r * c <= vals.len() => {
                for (w, &v) in p.value.iter_mut().zip(&vals[off..off + r * c]) {
                    *w = sc(v as f64);
                }
            }
            Some(&(off, [r, c])) if off + r * c > vals.len() => {
                err = Some(Error::DigestMismatch {
                    path: path.to_path_buf(),
                    detail: format!("parameter {name} runs past the payload"),
                })
            }
            _ => err = Some(Error::MissingParameter(name)),
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Pair<F>> {
    let (header, payload) = container::read(path)?;
    let model: ModelConfig = serde_json::from_value(header["model"].clone())?;
    let den: DenoiserConfig = serde_json::from_value(header["denoiser"].clone())?;
    let mut pair = Pair::new(model, den, 0)?;
    fill_params(&mut pair, &header, &payload, path)?;
    Ok(pair)
}

/// Loads parameters into a pair built from the given configs.
pub fn load_checkpoint_into<F: Scalar>(path: &Path, model: ModelConfig, den: DenoiserConfig) -> Result<Pair<F>> {
    let (header, payload) = container::read(path)?;
    let mut pair = Pair::new(model, den, 0)?;
    fill_params(&mut pair, &header, &payload, path)?;
    Ok(pair)
}

fn save_optimizer<F: Scalar>(opt: &Adam<F>, path: &Path) -> Result<String> {
    let payload = container::f32_bytes(
        opt.m
            .iter()
            .chain(&opt.v)
            .flat_map(|a| a.iter().map(|v| v.to_f32().unwrap()).collect::<Vec<_>>()),
    );
    let header = json!({"kind": "optimizer", "step": opt.step, "tensors": opt.m.len()});
    write_atomic(path, header, &payload)
}

fn load_optimizer<F: Scalar>(opt: &mut Adam<F>, path: &Path) -> Result<()> {
    let (header, payload) = container::read(path)?;
    let vals = container::read_f32s(&payload);
    let total: usize = opt.m.iter().map(|a| a.len()).sum::<usize>() * 2;
    if vals.len() != total {
        return Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            detail: "optimizer state size differs from model".into(),
        });
    }
    let mut it = vals.into_iter();
    for a in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        a.iter_mut().for_each(|x| *x = sc(it.next().unwrap() as f64));
    }
    opt.step = header["step"].as_u64().unwrap_or(0);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub digest: String,
    pub steps: usize,
    pub tokenizer_digest: Option<String>,
    pub final_metrics: Option<TrainMetrics>,
}

/// Per-step batch rng, independent of how many steps ran before a resume.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7261_696e, step as u64 + 1))
}

pub fn sample_batch(data_len: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..data_len)).collect()
}

/// Trains one stage; writes `checkpoint.bin` (periodic), `optimizer.bin`,
/// `final.bin` and `metrics.ndjson` under `config.checkpoint`.
pub fn run_stage(config: &TrainConfig) -> Result<CheckpointRef> {
    let data = TrainData::load(&config.corpus, config.envs.as_deref())?;
    run_stage_on(config, &data)
}

pub fn run_stage_on(config: &TrainConfig, data: &TrainData) -> Result<CheckpointRef> {
    config.validate()?;
    let out = &config.checkpoint;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let tokenizer = if config.tokenizer.exists() {
        Some(SceneTokenizer::load(&config.tokenizer)?)
    } else if config.effective_lambda() > 0.0 {
        return Err(Error::NotFitted);
    } else {
        None
    };
    let tok_digest = tokenizer.as_ref().map(|t| t.digest());
    if let Some(t) = &tokenizer {
        if t.k != config.model.recon_head_dim {
            return Err(Error::Config(format!(
                "tokenizer k {} differs from recon_head_dim {}",
                t.k, config.model.recon_head_dim
            )));
        }
    }
    let mut pair: Pair<f32> = match &config.init_checkpoint {
        Some(p) => load_checkpoint_into(p, config.model.clone(), config.denoiser.clone())?,
        None => Pair::new(config.model.clone(), config.denoiser.clone(), config.seed)?,
    };
    let mut opt = Adam::new(&pair, config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let ckpt = out.join("checkpoint.bin");
    let opt_path = out.join("optimizer.bin");
    let log_path = out.join("metrics.ndjson");
    let mut start = 0;
    let mut kept = String::new();
    if config.resume && ckpt.exists() && opt_path.exists() {
        pair = load_checkpoint_into(&ckpt, config.model.clone(), config.denoiser.clone())?;
        load_optimizer(&mut opt, &opt_path)?;
        start = opt.step as usize;
        if let Ok(text) = fs::read_to_string(&log_path) {
            for line in text.lines() {
                let m: TrainMetrics = serde_json::from_str(line)?;
                if m.step < start {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    log.write_all(kept.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
    let mut last = None;
    for step in start..config.steps {
        let mut rng = step_rng(config.seed, step);
        let idx = sample_batch(data.len(), config.batch_size, &mut rng);
        let batch = idx
            .iter()
            .map(|&i| data.prepare(i, &pair.backbone, config, tokenizer.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let m = train_step(&mut pair, &mut opt, &batch, config, &mut rng, step)?;
        writeln!(log, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&log_path, e))?;
        last = Some(m);
        if (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
            save_checkpoint(&pair, &ckpt)?;
            save_optimizer(&opt, &opt_path)?;
        }
    }
    if let (Some(t), Some(d)) = (&tokenizer, &tok_digest) {
        if &t.digest() != d {
            return Err(Error::Precondition("scene tokenizer changed during training".into()));
        }
    }
    let final_path = out.join("final.bin");
    let digest = save_checkpoint(&pair, &final_path)?;
    for p in [&ckpt, &opt_path] {
        if p.exists() {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(CheckpointRef {
        path: final_path,
        digest,
        steps: config.steps,
        tokenizer_digest: tok_digest,
        final_metrics: last,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_params: usize,
    /// Largest `|dL_visual/dθ|` over backbone parameters (analytic).
    pub visual_backbone_grad: f64,
    /// Finite-difference value at that same entry.
    pub visual_backbone_grad_fd: f64,
    pub linear_toy_rel_err: f64,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-7)
}

/// Tiny-scale (64-bit) model, tokenizer and batch for gradient checking.
pub fn tiny_setup(seed: u64) -> Result<(Pair<f64>, Vec<PreparedSample<f64>>, Vec<Option<Noise<f64>>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mcfg = ModelConfig::tiny();
    let patches: Vec<Vec<f64>> = (0..64).map(|_| (0..192).map(|_| rng.gen::<f64>()).collect()).collect();
    let tok = SceneTokenizer::fit(&patches, mcfg.patch_size, mcfg.recon_head_dim)?;
    let dcfg = DenoiserConfig {
        d_tok: mcfg.recon_head_dim,
        n_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        n_cond: mcfg.image_tokens(),
        max_targets: mcfg.crop_patches(),
        timesteps: 10,
        ..Default::default()
    };
    let mut pair = Pair::<f64>::new(mcfg.clone(), dcfg, seed)?;
    // larger output heads than the 0.02 default so every path carries signal
    let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ 1);
    pair.denoiser.out = crate::nn::Linear::new(mcfg.recon_head_dim, mcfg.recon_head_dim, 0.5, &mut r2);
    pair.backbone.recon_head = crate::nn::Linear::new(mcfg.d_model, mcfg.recon_head_dim, 0.5, &mut r2);
    let vocab = TextVocab::from_templates();
    let codec = ActionCodec::new(&VocabLayout::new(&vocab));
    let img = |rng: &mut ChaCha8Rng, s: usize| {
        let mut im = Image::new(s, s, [0, 0, 0]);
        for b in im.data.iter_mut() {
            *b = rng.gen();
        }
        im
    };
    let mut batch = Vec::new();
    for text in ["flip the red cup", "stack the blue block on the green block"] {
        let instruction = vocab.tokenize(text)?;
        let (base, wrist, crop) = (img(&mut rng, 16), img(&mut rng, 16), img(&mut rng, 16));
        let a = ContinuousAction::from_array([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0, -1.0]);
        let input = PolicyInput::from_images(&pair.backbone, instruction, &base, &wrist, None)?;
        batch.push(PreparedSample {
            input,
            targets: codec.tokenize(&a)?.to_vec(),
            z0: Some(tok.encode(&crop)?),
        });
    }
    let noise = draw_noise(&batch, &pair.denoiser, &mut rng);
    Ok((pair, batch, noise))
}

fn total_loss(pair: &Pair<f64>, batch: &[PreparedSample<f64>], noise: &[Option<Noise<f64>>], wa: f64, lambda: f64) -> f64 {
    let mut p = pair.clone();
    let (la, lv) = loss_and_grad(&mut p, batch, noise, wa, lambda).expect("finite tiny loss");
    wa * la + lambda * lv
}

fn perturbed(pair: &Pair<f64>, name: &str, idx: usize, delta: f64) -> Pair<f64> {
    let mut p = pair.clone();
    p.visit_mut("", &mut |n, q| {
        if n == name {
            let c = q.value.ncols();
            q.value[(idx / c, idx % c)] += delta;
        }
    });
    p
}

/// Central differences on randomly sampled parameters of the tiny model.
pub fn grad_check(seed: u64, n_samples: usize, epsilon: f64) -> Result<GradCheckReport> {
    let (mut pair, batch, noise) = tiny_setup(seed)?;
    let seq_len = pair
        .backbone
        .assemble_sequence(&batch[1].input, &batch[1].targets[..3])?
        .len();
    debug_assert!(seq_len <= 24);
    pair.zero_grad();
    loss_and_grad(&mut pair, &batch, &noise, 1.0, 1.0)?;
    let mut entries = Vec::new();
    pair.visit("", &mut |n, p| {
        for (i, g) in p.grad.iter().enumerate() {
            entries.push((n.clone(), i, *g));
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 4));
    // half uniform over all entries, half over entries the loss touches
    let mut chosen: Vec<_> = entries.choose_multiple(&mut rng, n_samples / 2).cloned().collect();
    let live: Vec<_> = entries.iter().filter(|e| e.2 != 0.0).cloned().collect();
    chosen.extend(live.choose_multiple(&mut rng, n_samples - n_samples / 2).cloned());
    let mut max_rel: f64 = 0.0;
    for (name, idx, g) in &chosen {
        let fp = total_loss(&perturbed(&pair, name, *idx, epsilon), &batch, &noise, 1.0, 1.0);
        let fm = total_loss(&perturbed(&pair, name, *idx, -epsilon), &batch, &noise, 1.0, 1.0);
        max_rel = max_rel.max(rel_err(*g, (fp - fm) / (2.0 * epsilon)));
    }
    // the visual loss alone, through h_R into the backbone
    pair.zero_grad();
    loss_and_grad(&mut pair, &batch, &noise, 0.0, 1.0)?;
    let mut best = (String::new(), 0, 0.0f64);
    pair.backbone.visit("backbone", &mut |n, p| {
        for (i, g) in p.grad.iter().enumerate() {
            if g.abs() > best.2.abs() {
                best = (n.clone(), i, *g);
            }
        }
    });
    let fp = total_loss(&perturbed(&pair, &best.0, best.1, epsilon), &batch, &noise, 0.0, 1.0);
    let fm = total_loss(&perturbed(&pair, &best.0, best.1, -epsilon), &batch, &noise, 0.0, 1.0);
    let fd = (fp - fm) / (2.0 * epsilon);
    max_rel = max_rel.max(rel_err(best.2, fd));
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        n_params: chosen.len(),
        visual_backbone_grad: best.2.abs(),
        visual_backbone_grad_fd: fd.abs(),
        linear_toy_rel_err: linear_toy_check(seed, epsilon),
    })
}

/// Finite differences through a single linear layer under squared error.
pub fn linear_toy_check(seed: u64, epsilon: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lin = crate::nn::Linear::<f64>::new(5, 3, 1.0, &mut rng);
    let x = standard_normal::<f64>(4, 5, &mut rng);
    let y = standard_normal::<f64>(4, 3, &mut rng);
    let loss = |l: &crate::nn::Linear<f64>| {
        let d = l.forward(&x.view()) - &y;
        d.iter().map(|v| v * v).sum::<f64>() / 2.0
    };
    let d = lin.forward(&x.view()) - &y;
    lin.zero_grad();
    lin.backward(&x.view(), &d.view());
    let mut worst: f64 = 0.0;
    let mut grads = Vec::new();
    lin.visit("", &mut |n, p| grads.push((n, p.grad.clone())));
    for (name, g) in grads {
        for idx in 0..g.len() {
            let bump = |delta: f64| {
                let mut l = lin.clone();
                l.visit_mut("", &mut |n, p| {
                    if n == name {
                        let c = p.value.ncols();
                        p.value[(idx / c, idx % c)] += delta;
                    }
                });
                loss(&l)
            };
            let fd = (bump(epsilon) - bump(-epsilon)) / (2.0 * epsilon);
            let c = g.ncols();
            worst = worst.max(rel_err(g[(idx / c, idx % c)], fd));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_hand_computation() {
        struct Two(Param<f64>);
        impl Module<f64> for Two {
            fn visit(&self, _: &str, f: &mut dyn FnMut(String, &Param<f64>)) {
                f("w".into(), &self.0)
            }
            fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Param<f64>)) {
                f("w".into(), &mut self.0)
            }
        }
        let mut m = Two(Param::new(Array2::from_shape_vec((1, 2), vec![1.0, -2.0]).unwrap()));
        let mut opt = Adam::new(&m, 0.1, 0.9, 0.999, 1e-8);
        let mut want = [1.0f64, -2.0];
        let (mut mm, mut vv) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=3 {
            // loss = w0² + 3 w1
            m.0.grad = Array2::from_shape_vec((1, 2), vec![2.0 * m.0.value[(0, 0)], 3.0]).unwrap();
            let g = [2.0 * want[0], 3.0];
            for i in 0..2 {
                mm[i] = 0.9 * mm[i] + 0.1 * g[i];
                vv[i] = 0.999 * vv[i] + 0.001 * g[i] * g[i];
                let mh = mm[i] / (1.0 - 0.9f64.powi(t));
                let vh = vv[i] / (1.0 - 0.999f64.powi(t));
                want[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            opt.update(&mut m, 1.0, &|_| false);
            for i in 0..2 {
                assert!((m.0.value[(0, i)] - want[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn linear_toy_head_is_exact() {
        assert!(linear_toy_check(0, 1e-4) < 1e-8);
    }

    #[test]
    fn tiny_grad_check_passes() {
        let r = grad_check(0, 256, 1e-4).unwrap();
        assert!(r.n_params >= 200);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert!(r.visual_backbone_grad > 1e-8, "{r:?}");
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (pair, _, _) = tiny_setup(3).unwrap();
        let pair: Pair<f32> = {
            let mut p = Pair::<f32>::new(pair.backbone.config.clone(), pair.denoiser.config.clone(), 3).unwrap();
            p.backbone = pair.backbone.cast();
            p
        };
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let d1 = save_checkpoint(&pair, &a).unwrap();
        let back: Pair<f32> = load_checkpoint(&a).unwrap();
        assert_eq!(back, pair);
        let d2 = save_checkpoint(&back, &b).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let other = ModelConfig { d_model: 16, ..ModelConfig::tiny() };
        match load_checkpoint_into::<f32>(&a, other, pair.denoiser.config.clone()) {
            Err(Error::MissingParameter(n)) => assert_eq!(n, "backbone.tok_emb"),
            r => panic!("unexpected {r:?}"),
        }
        let bytes = fs::read(&a).unwrap();
        fs::write(&a, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&a), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn baseline_step_leaves_denoiser_untouched() {
        let (pair, batch, _) = tiny_setup(5).unwrap();
        let mut pair = pair;
        let before = pair.denoiser.clone();
        let cfg = TrainConfig { paradigm: Paradigm::Baseline, ..Default::default() };
        let mut opt = Adam::new(&pair, 1e-2, 0.9, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = train_step(&mut pair, &mut opt, &batch, &cfg, &mut rng, 0).unwrap();
        assert_eq!(m.loss_visual, 0.0);
        assert_eq!(pair.denoiser, before);
        let cfg = TrainConfig { paradigm: Paradigm::Ig, ..Default::default() };
        let m = train_step(&mut pair, &mut opt, &batch, &cfg, &mut rng, 1).unwrap();
        assert!(m.loss_visual > 0.0);
        assert!((m.loss_total - (m.loss_action + m.loss_visual)).abs() < 1e-12);
        assert_ne!(pair.denoiser, before);
    }

    #[test]
    fn overfits_a_single_batch() {
        let (pair, batch, _) = tiny_setup(6).unwrap();
        let mut pair = pair;
        let cfg = TrainConfig { paradigm: Paradigm::Baseline, ..Default::default() };
        let mut opt = Adam::new(&pair, 3e-2, 0.9, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last = f64::INFINITY;
        for s in 0..300 {
            last = train_step(&mut pair, &mut opt, &batch, &cfg, &mut rng, s).unwrap().loss_action;
        }
        assert!(last < 0.05, "{last}");
        for s in &batch {
            assert_eq!(pair.backbone.generate(&s.input, 4).unwrap(), s.targets);
        }
    }
}
