//! Paradigm comparison and ablation runs: corpus preparation, cached
//! training stages, evaluation and the derived diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PolicyInput};
use crate::datapipe::{build_corpus, Corpus, CorpusConfig, CorpusManifest};
use crate::error::{Error, Result};
use crate::evalharness::{
    attention_focus, evaluate, heldout_frames, AttnFrame, AttnReduction, AttnReport, EvalResult, ModelPolicy, ReportRow,
};
use crate::simworld::{splitmix, EnvId};
use crate::tokenizers::{fit_scene_tokenizer, SceneTokenizer, TextVocab};
use crate::trainengine::{load_checkpoint, run_stage_on, CheckpointRef, Pair, Paradigm, ReconTarget, Stage, TrainConfig, TrainData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub root: PathBuf,
    /// Episodes per pretraining environment (A, B, C).
    pub pretrain_episodes: usize,
    /// Episodes of env-D task data for finetuning.
    pub finetune_episodes: usize,
    pub corpus_seed: u64,
    pub chain_length: usize,
    pub tokenizer_k: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub seeds: Vec<u64>,
    pub eval_chains: usize,
    pub eval_seed0: u64,
    pub max_steps_per_subtask: usize,
    pub attn_frames: usize,
    pub attn_seed0: u64,
    pub sample_pairs: usize,
    /// Template for every stage; stage, paradigm, paths, seed and steps are overwritten.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            root: PathBuf::from("runs/experiment"),
            pretrain_episodes: 100,
            finetune_episodes: 100,
            corpus_seed: 0,
            chain_length: 5,
            tokenizer_k: 32,
            pretrain_steps: 2000,
            finetune_steps: 1000,
            seeds: vec![0, 1, 2],
            eval_chains: 100,
            eval_seed0: crate::evalharness::EVAL_SEED0,
            max_steps_per_subtask: crate::evalharness::MAX_STEPS_PER_SUBTASK,
            attn_frames: 50,
            attn_seed0: 2_000_000,
            sample_pairs: 64,
            train: TrainConfig::default(),
        }
    }
}

/// One training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub paradigm: Paradigm,
    pub recon_target: ReconTarget,
    pub pretrain: bool,
}

impl Variant {
    pub fn paradigm(p: Paradigm) -> Self {
        Variant {
            paradigm: p,
            recon_target: ReconTarget::Gaze,
            pretrain: true,
        }
    }

    pub fn label(&self) -> String {
        let mut s = self.paradigm.name().to_string();
        if self.paradigm == Paradigm::Ig && self.recon_target == ReconTarget::WholeImage {
            s.push_str("-whole");
        }
        if !self.pretrain {
            s.push_str("-nopretrain");
        }
        s
    }
}

/// The four ablation rows; neighbours differ in one axis.
pub fn ablation_variants() -> [(&'static str, Variant); 4] {
    let base = Variant {
        paradigm: Paradigm::Baseline,
        recon_target: ReconTarget::Gaze,
        pretrain: false,
    };
    let whole = Variant {
        paradigm: Paradigm::Ig,
        recon_target: ReconTarget::WholeImage,
        ..base
    };
    let gaze = Variant {
        recon_target: ReconTarget::Gaze,
        ..whole
    };
    let pre = Variant { pretrain: true, ..gaze };
    [
        ("baseline", base),
        ("whole-image-recon", whole),
        ("gaze-recon", gaze),
        ("gaze-recon+pretrain", pre),
    ]
}

/// Axes on which two variants differ.
pub fn variant_axes(a: &Variant, b: &Variant) -> Vec<&'static str> {
    let recon = |v: &Variant| v.paradigm == Paradigm::Ig;
    let mut out = Vec::new();
    if recon(a) != recon(b) {
        out.push("reconstruction");
    }
    if recon(a) && recon(b) && a.recon_target != b.recon_target {
        out.push("target");
    }
    if a.pretrain != b.pretrain {
        out.push("pretrain");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub pretrain: PathBuf,
    pub finetune: PathBuf,
    pub tokenizer: PathBuf,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct DataKey {
    pretrain_episodes: usize,
    finetune_episodes: usize,
    corpus_seed: u64,
    chain_length: usize,
    tokenizer_k: usize,
    patch_size: usize,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub paths: DataPaths,
    pretrain: Option<TrainData>,
    finetune: Option<TrainData>,
    pub log: Box<dyn FnMut(&str) + Send>,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> Option<serde_json::Value> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

impl Experiment {
    /// Builds (or reuses) the pretraining and finetuning corpora and the tokenizer.
    pub fn prepare(config: ExperimentConfig, mut log: Box<dyn FnMut(&str) + Send>) -> Result<Self> {
        let data = config.root.join("data");
        let paths = DataPaths {
            pretrain: data.join("pretrain"),
            finetune: data.join("finetune"),
            tokenizer: data.join("tokenizer.bin"),
        };
        let key = DataKey {
            pretrain_episodes: config.pretrain_episodes,
            finetune_episodes: config.finetune_episodes,
            corpus_seed: config.corpus_seed,
            chain_length: config.chain_length,
            tokenizer_k: config.tokenizer_k,
            patch_size: config.train.model.patch_size,
        };
        let key_path = data.join("data.json");
        let fresh = read_json(&key_path) == Some(serde_json::to_value(&key)?)
            && CorpusManifest::path(&paths.pretrain).exists()
            && CorpusManifest::path(&paths.finetune).exists()
            && paths.tokenizer.exists();
        if !fresh {
            log("building corpora");
            let mk = |root: &Path, envs: &[EnvId], n: usize| CorpusConfig {
                root: root.to_path_buf(),
                episodes: envs.iter().map(|&e| (e, n)).collect(),
                chain_length: config.chain_length,
                seed: config.corpus_seed,
                ..Default::default()
            };
            build_corpus(&mk(&paths.pretrain, &[EnvId::A, EnvId::B, EnvId::C], config.pretrain_episodes))?;
            build_corpus(&mk(&paths.finetune, &[EnvId::D], config.finetune_episodes))?;
            log("fitting scene tokenizer");
            let tok = fit_scene_tokenizer(&Corpus::open(&paths.pretrain)?, config.train.model.patch_size, config.tokenizer_k)?;
            tok.save(&paths.tokenizer)?;
            write_json(&key_path, &key)?;
        }
        Ok(Experiment {
            config,
            paths,
            pretrain: None,
            finetune: None,
            log,
        })
    }

    fn data(&mut self, stage: Stage) -> Result<&TrainData> {
        let (slot, path) = match stage {
            Stage::Pretrain => (&mut self.pretrain, &self.paths.pretrain),
            Stage::Finetune => (&mut self.finetune, &self.paths.finetune),
        };
        if slot.is_none() {
            *slot = Some(TrainData::load(path, None)?);
        }
        Ok(slot.as_ref().expect("just loaded"))
    }

    /// Stage config for `variant`; the no-pretrain recipe trains on the
    /// finetune split for the combined step budget.
    pub fn stage_config(&self, variant: &Variant, seed: u64, stage: Stage) -> TrainConfig {
        let c = &self.config;
        let mut t = c.train.clone();
        t.stage = stage;
        t.paradigm = variant.paradigm;
        t.recon_target = variant.recon_target;
        t.seed = seed;
        t.tokenizer = self.paths.tokenizer.clone();
        t.envs = None;
        let dir = self.run_dir(variant, seed);
        match stage {
            Stage::Pretrain => {
                t.corpus = self.paths.pretrain.clone();
                t.steps = c.pretrain_steps;
                t.checkpoint = dir.join("pretrain");
                t.init_checkpoint = None;
            }
            Stage::Finetune => {
                t.corpus = self.paths.finetune.clone();
                t.checkpoint = dir.join("finetune");
                if variant.pretrain {
                    t.steps = c.finetune_steps;
                    t.init_checkpoint = Some(dir.join("pretrain").join("final.bin"));
                } else {
                    t.steps = c.pretrain_steps + c.finetune_steps;
                    t.init_checkpoint = None;
                }
            }
        }
        t
    }

    pub fn run_dir(&self, variant: &Variant, seed: u64) -> PathBuf {
        self.config.root.join("runs").join(format!("{}-s{seed}", variant.label()))
    }

    fn run_cached(&mut self, cfg: &TrainConfig) -> Result<PathBuf> {
        let dir = &cfg.checkpoint;
        let cfg_path = dir.join("config.json");
        let final_path = dir.join("final.bin");
        let want = serde_json::to_value(cfg)?;
        match read_json(&cfg_path) {
            Some(v) if v == want && final_path.exists() => return Ok(final_path),
            Some(v) if v == want => {}
            _ if dir.exists() => fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?,
            _ => {}
        }
        write_json(&cfg_path, cfg)?;
        (self.log)(&format!(
            "training {} {:?} for {} steps",
            dir.display(),
            cfg.stage,
            cfg.steps
        ));
        let data = self.data(cfg.stage)?;
        let r: CheckpointRef = run_stage_on(cfg, data)?;
        Ok(r.path)
    }

    /// Trains `variant` for `seed` (reusing finished stages) and returns the final checkpoint.
    pub fn train(&mut self, variant: &Variant, seed: u64) -> Result<PathBuf> {
        if variant.pretrain {
            let c = self.stage_config(variant, seed, Stage::Pretrain);
            self.run_cached(&c)?;
        }
        let c = self.stage_config(variant, seed, Stage::Finetune);
        self.run_cached(&c)
    }

    /// Evaluates a checkpoint on env D, caching the result next to it.
    pub fn evaluate_checkpoint(&mut self, ckpt: &Path, paradigm: Paradigm) -> Result<EvalResult> {
        let c = &self.config;
        let key = serde_json::json!({
            "checkpoint": crate::container::sha256_hex(&fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?),
            "paradigm": paradigm,
            "n": c.eval_chains, "seed0": c.eval_seed0, "max_steps": c.max_steps_per_subtask,
        });
        let path = ckpt.with_file_name("eval.json");
        if let Some(v) = read_json(&path) {
            if v.get("key") == Some(&key) {
                if let Some(r) = v.get("result") {
                    return Ok(serde_json::from_value(r.clone())?);
                }
            }
        }
        (self.log)(&format!("evaluating {} on {} chains", ckpt.display(), c.eval_chains));
        let pair = load_checkpoint::<f32>(ckpt)?;
        let mut pol = ModelPolicy::new(pair.backbone, paradigm);
        let r = evaluate(&mut pol, c.eval_chains, EnvId::D, c.eval_seed0, c.max_steps_per_subtask)?;
        write_json(&path, &serde_json::json!({"key": key, "result": r}))?;
        Ok(r)
    }

    /// Trains and evaluates `variant` over every configured seed.
    pub fn run_variant(&mut self, label: &str, variant: &Variant) -> Result<ReportRow> {
        let mut results = Vec::new();
        for seed in self.config.seeds.clone() {
            let ckpt = self.train(variant, seed)?;
            results.push(self.evaluate_checkpoint(&ckpt, variant.paradigm)?);
        }
        Ok(ReportRow {
            label: label.to_string(),
            results,
        })
    }

    pub fn run_paradigm(&mut self, paradigm: Paradigm) -> Result<ReportRow> {
        self.run_variant(paradigm.name(), &Variant::paradigm(paradigm))
    }

    pub fn compare(&mut self, paradigms: &[Paradigm]) -> Result<Vec<ReportRow>> {
        paradigms.iter().map(|&p| self.run_paradigm(p)).collect()
    }

    pub fn ablation_suite(&mut self) -> Result<Vec<ReportRow>> {
        ablation_variants()
            .iter()
            .map(|(label, v)| self.run_variant(label, v))
            .collect()
    }

    pub fn heldout(&self) -> Result<Vec<AttnFrame>> {
        heldout_frames(self.config.attn_frames, EnvId::D, self.config.attn_seed0)
    }

    /// Per-seed attention reports for `variant`, on shared held-out frames.
    pub fn attention(
        &mut self,
        variant: &Variant,
        frames: &[AttnFrame],
        reduction: &AttnReduction,
    ) -> Result<Vec<AttnReport>> {
        let mut out = Vec::new();
        for seed in self.config.seeds.clone() {
            let ckpt = self.train(variant, seed)?;
            let pair = load_checkpoint::<f32>(&ckpt)?;
            out.push(attention_focus(&pair.backbone, variant.paradigm, frames, reduction)?);
        }
        Ok(out)
    }

    /// Conditioned-sampling check on the first seed of `variant`.
    pub fn conditioning(&mut self, variant: &Variant, frames: &[AttnFrame]) -> Result<ConditioningReport> {
        let seed = self.config.seeds.first().copied().unwrap_or(0);
        let ckpt = self.train(variant, seed)?;
        let pair = load_checkpoint::<f32>(&ckpt)?;
        let tok = SceneTokenizer::load(&self.paths.tokenizer)?;
        conditioning_check(&pair, &tok, frames, self.config.sample_pairs, splitmix(seed, 6))
    }
}

/// Backbone reconstructive tokens for one frame.
pub fn reconstructive_tokens(model: &Backbone<f32>, frame: &AttnFrame) -> Result<Array2<f32>> {
    let vocab = TextVocab::from_templates();
    let input = PolicyInput::from_images(model, vocab.tokenize(&frame.instruction)?, &frame.base, &frame.wrist, None)?;
    let seq = model.assemble_sequence(&input, &[])?;
    Ok(model.forward(&seq, false)?.0.h_r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub pairs: usize,
    pub mse_matched: f64,
    pub mse_mismatched: f64,
}

/// Samples gaze tokens from the denoiser under the frame's own `h_R` and
/// under `h_R` of a frame from another episode, with shared noise.
pub fn conditioning_check(
    pair: &Pair<f32>,
    tok: &SceneTokenizer,
    frames: &[AttnFrame],
    pairs: usize,
    seed: u64,
) -> Result<ConditioningReport> {
    if frames.len() < 2 {
        return Err(Error::Precondition("need at least two frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h: Vec<Array2<f32>> = frames
        .iter()
        .map(|f| reconstructive_tokens(&pair.backbone, f))
        .collect::<Result<_>>()?;
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    for p in 0..pairs {
        let i = p % frames.len();
        // Frames come five per episode; pick a partner from a different one.
        let mut others: Vec<usize> = (0..frames.len()).filter(|&j| j / 5 != i / 5).collect();
        if others.is_empty() {
            others = (0..frames.len()).filter(|&j| j != i).collect();
        }
        let j = *others.choose(&mut rng).expect("non-empty");
        let z0 = tok.encode(&frames[i].crop)?.mapv(|v| v as f32);
        let n = z0.nrows();
        let noise_seed = splitmix(seed, p as u64 + 1);
        let mse = |h_r: &Array2<f32>| -> Result<f64> {
            let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
            let z = pair.denoiser.sample(&h_r.view(), n, &mut r)?;
            let d = &z.slice(s![.., ..]) - &z0;
            Ok(d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / d.len() as f64)
        };
        matched += mse(&h[i])?;
        mismatched += mse(&h[j])?;
    }
    Ok(ConditioningReport {
        pairs,
        mse_matched: matched / pairs as f64,
        mse_mismatched: mismatched / pairs as f64,
    })
}

/// Frame-paired mean of per-seed `mass_in_gaze` values.
pub fn paired_mass(reports: &[AttnReport]) -> Vec<f64> {
    let n = reports.first().map_or(0, |r| r.frames.len());
    (0..n)
        .map(|f| reports.iter().map(|r| r.frames[f].mass_in_gaze).sum::<f64>() / reports.len() as f64)
        .collect()
}

pub fn summary_rows(rows: &[ReportRow]) -> BTreeMap<String, f64> {
    rows.iter().map(|r| (r.label.clone(), r.mean_avg_length())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_neighbours_differ_in_one_axis() {
        let rows = ablation_variants();
        for w in rows.windows(2) {
            assert_eq!(variant_axes(&w[0].1, &w[1].1).len(), 1, "{} vs {}", w[0].0, w[1].0);
        }
    }

    #[test]
    fn baseline_and_ig_configs_differ_only_in_paradigm() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            root: dir.path().to_path_buf(),
            ..Default::default()
        };
        let exp = Experiment {
            paths: DataPaths {
                pretrain: "p".into(),
                finetune: "f".into(),
                tokenizer: "t".into(),
            },
            config: cfg,
            pretrain: None,
            finetune: None,
            log: Box::new(|_| {}),
        };
        for stage in [Stage::Pretrain, Stage::Finetune] {
            let mut a = serde_json::to_value(exp.stage_config(&Variant::paradigm(Paradigm::Baseline), 0, stage)).unwrap();
            let mut b = serde_json::to_value(exp.stage_config(&Variant::paradigm(Paradigm::Ig), 0, stage)).unwrap();
            for v in [&mut a, &mut b] {
                v.as_object_mut().unwrap().remove("checkpoint");
                v.as_object_mut().unwrap().remove("init_checkpoint");
            }
            assert_eq!(crate::evalharness::config_diff(&a, &b), vec!["paradigm".to_string()]);
        }
    }
}
