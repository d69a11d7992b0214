//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 6 to 9 share one trained experiment. Its corpora, checkpoints and
//! evaluations are cached under `REGAZE_ACCEPTANCE_ROOT` (default
//! `<workspace>/runs/acceptance`), so the first run trains and later runs
//! reuse finished stages.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regaze_core::backbone::{Backbone, ModelConfig, PolicyInput};
use regaze_core::denoiser::{standard_normal, Denoiser, DenoiserConfig};
use regaze_core::evalharness::{evaluate, ExpertPolicy, AttnReduction};
use regaze_core::experiment::{ablation_variants, paired_mass, Experiment, ExperimentConfig, Variant};
use regaze_core::nn::Linear;
use regaze_core::simworld::{ContinuousAction, EnvId};
use regaze_core::tokenizers::{ActionCodec, SceneTokenizer, TextVocab, VocabLayout};
use regaze_core::trainengine::{Paradigm, TrainConfig};

fn report(n: usize, ok: bool, detail: &str) {
    println!("criterion {n:>2} {}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn check(n: usize, ok: bool, detail: String) {
    report(n, ok, &detail);
    assert!(ok, "criterion {n} failed: {detail}");
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_regaze")
}

// 1 -------------------------------------------------------------------------

const EXPERT_CHAINS: usize = 200;
const EXPERT_BUDGET_S: f64 = 60.0;

#[test]
fn criterion_01_expert_oracle() {
    let t = Instant::now();
    let mut worst = 5.0f64;
    let mut all_ones = true;
    for env in EnvId::ALL {
        let r = evaluate(&mut ExpertPolicy, EXPERT_CHAINS, env, 0, 60).unwrap();
        worst = worst.min(r.avg_length);
        all_ones &= r.success_rates == [1.0; 5];
    }
    let dt = t.elapsed().as_secs_f64();
    check(
        1,
        all_ones && worst == 5.0 && dt < EXPERT_BUDGET_S,
        format!("expert min avg_length {worst:.2} over {EXPERT_CHAINS} chains x 4 envs in {dt:.1}s"),
    );
}

// 2 -------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;
const GRAD_MIN_PARAMS: usize = 200;
const GRAD_BUDGET_S: f64 = 120.0;

#[test]
fn criterion_02_gradient_check() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let status = Command::new(bin())
        .args(["grad-check", "--set", "samples=256", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let dt = t.elapsed().as_secs_f64();
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("grad_check.json")).unwrap()).unwrap();
    let err = rep["max_rel_err"].as_f64().unwrap();
    let n = rep["n_params"].as_u64().unwrap() as usize;
    let vis = rep["visual_backbone_grad"].as_f64().unwrap();
    check(
        2,
        status.status.success() && err < GRAD_TOL && n >= GRAD_MIN_PARAMS && vis > 0.0 && dt < GRAD_BUDGET_S,
        format!("max_rel_err {err:.2e} over {n} params, |dL_visual/d backbone| {vis:.2e}, {dt:.1}s"),
    );
}

// 3 -------------------------------------------------------------------------

const MC_DRAWS: usize = 100_000;
const ZERO_LOSS_TOL: f64 = 0.05;

#[test]
fn criterion_03_diffusion_statistics() {
    let cfg = DenoiserConfig::default();
    let sched = cfg.schedule().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sigma = 0.0f64;
    for t in [1, sched.t / 2, sched.t] {
        let z0 = standard_normal::<f64>(MC_DRAWS, 1, &mut rng);
        let eps = standard_normal::<f64>(MC_DRAWS, 1, &mut rng);
        let zt = sched.q_sample(&z0.view(), t, &eps.view()).unwrap();
        let mean = zt.mean().unwrap();
        let var = zt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (MC_DRAWS - 1) as f64;
        let ab = sched.alpha_bar(t);
        let expected = ab + (1.0 - ab);
        // Standard error of a Gaussian sample variance.
        let se = expected * (2.0 / (MC_DRAWS - 1) as f64).sqrt();
        worst_sigma = worst_sigma.max((var - expected).abs() / se);
    }
    let mut den = Denoiser::<f64>::new(cfg.clone(), &mut rng).unwrap();
    den.out = Linear::zeros(cfg.d_tok, cfg.d_tok);
    let h_r = standard_normal::<f64>(cfg.n_cond, cfg.d_tok, &mut rng);
    let z0 = standard_normal::<f64>(16, cfg.d_tok, &mut rng);
    let n = 400;
    let mean_loss = (0..n).map(|_| den.recon_loss(&h_r.view(), &z0.view(), &mut rng).unwrap()).sum::<f64>() / n as f64;
    check(
        3,
        worst_sigma < 3.0 && (mean_loss - 1.0).abs() <= ZERO_LOSS_TOL,
        format!("q_sample variance within {worst_sigma:.2} sigma; zero-denoiser loss {mean_loss:.4}"),
    );
}

// 4 -------------------------------------------------------------------------

const ROUNDTRIP_N: usize = 10_000;
const PCA_ORACLE_TOL: f64 = 1e-8;

/// Rank-k reconstruction error by SVD of the centred data matrix.
fn svd_rank_k_error(patches: &[Vec<f64>], k: usize) -> f64 {
    let n = patches.len();
    let d = patches[0].len();
    let mut mean = vec![0.0; d];
    for p in patches {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |r, c| patches[r][c] - mean[c]);
    let sv = x.svd(false, false).singular_values;
    let mut s2: Vec<f64> = sv.iter().map(|v| v * v).collect();
    s2.sort_by(|a, b| b.total_cmp(a));
    s2[k.min(s2.len())..].iter().sum::<f64>() / n as f64
}

fn codec_error(tok: &SceneTokenizer, patches: &[Vec<f64>]) -> f64 {
    let z = tok.encode_patches(patches);
    let back = tok.decode_patches(&z.view());
    patches
        .iter()
        .zip(&back)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum::<f64>()
        / patches.len() as f64
}

#[test]
fn criterion_04_codec_exactness() {
    let layout = VocabLayout::new(&TextVocab::from_templates());
    let codec = ActionCodec::new(&layout);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..ROUNDTRIP_N {
        let a = ContinuousAction::from_array([(); 4].map(|_| rng.gen_range(-1.0..=1.0)));
        let b = codec.detokenize(&codec.tokenize(&a).unwrap()).unwrap();
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    let rand_patches = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..192).map(|_| rng.gen::<f64>()).collect()).collect()
    };
    let full = rand_patches(400, &mut rng);
    let lossless = codec_error(&SceneTokenizer::fit(&full, 8, 192).unwrap(), &full);
    let small = rand_patches(100, &mut rng);
    let mut oracle_gap = 0.0f64;
    for k in [4, 16, 32, 64] {
        let tok = SceneTokenizer::fit(&small, 8, k).unwrap();
        oracle_gap = oracle_gap.max((codec_error(&tok, &small) - svd_rank_k_error(&small, k)).abs());
    }
    check(
        4,
        worst <= 1.0 / 256.0 && lossless < 1e-9 && oracle_gap < PCA_ORACLE_TOL,
        format!("action roundtrip max err {worst:.2e}; k=192 error {lossless:.1e}; PCA vs SVD oracle gap {oracle_gap:.1e}"),
    );
}

// 5 -------------------------------------------------------------------------

const CAUSAL_TRIALS: usize = 100;

#[test]
fn criterion_05_causality() {
    let cfg = ModelConfig {
        n_layers: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Backbone::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let dim = cfg.patch_size * cfg.patch_size * 3;
    let n_text = TextVocab::from_templates().len();
    let action_ids: Vec<usize> = (0..256).map(|i| model.layout().action_offset + i).collect();
    let mut failures = 0;
    for _ in 0..CAUSAL_TRIALS {
        let mut patches = |n: usize| Array2::from_shape_simple_fn((n, dim), || rng.gen::<f32>());
        let (base, wrist) = (patches(cfg.view_patches()), patches(cfg.view_patches()));
        let n_instr = rng.gen_range(1..=12);
        let input = PolicyInput {
            instruction: (0..n_instr).map(|_| rng.gen_range(4..n_text)).collect(),
            base,
            wrist,
            crop: None,
        };
        let prefix: Vec<usize> = (0..3).map(|_| action_ids[rng.gen_range(0..256)]).collect();
        let seq = model.assemble_sequence(&input, &prefix).unwrap();
        let p = rng.gen_range(1..seq.len());
        let mut seq2 = seq.clone();
        let bump = rng.gen_range(0.1f32..2.0);
        seq2.embeddings.row_mut(p).mapv_inplace(|v| v + bump);
        let (_, ca) = model.forward(&seq, false).unwrap();
        let (_, cb) = model.forward(&seq2, false).unwrap();
        let past_equal = ca.hidden().slice(s![..p, ..]) == cb.hidden().slice(s![..p, ..]);
        let here_changed = ca.hidden().row(p) != cb.hidden().row(p);
        if !(past_equal && here_changed) {
            failures += 1;
        }
    }
    check(
        5,
        failures == 0,
        format!("{} of {CAUSAL_TRIALS} random trials kept every earlier position bit-identical", CAUSAL_TRIALS - failures),
    );
}

// 6 to 9: the trained experiment -------------------------------------------

const PARADIGM_MARGIN: f64 = 0.2;
const ABLATION_TIE: f64 = 0.1;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Budgets for the trained criteria; matches `configs/acceptance.json`.
pub fn acceptance_config() -> ExperimentConfig {
    let root = std::env::var_os("REGAZE_ACCEPTANCE_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("runs/acceptance"));
    let file = workspace_root().join("configs/acceptance.json");
    let mut cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
    cfg.root = root;
    cfg
}

fn experiment() -> &'static Mutex<Experiment> {
    static EXP: OnceLock<Mutex<Experiment>> = OnceLock::new();
    EXP.get_or_init(|| {
        let cfg = acceptance_config();
        assert_eq!(cfg.train.model.d_model, 128);
        assert_eq!(cfg.train.batch_size, 32);
        assert!(cfg.finetune_steps <= 5000 && cfg.seeds.len() >= 3 && cfg.eval_chains >= 100);
        Mutex::new(Experiment::prepare(cfg, Box::new(|m| eprintln!("[acceptance] {m}"))).unwrap())
    })
}

fn lock() -> std::sync::MutexGuard<'static, Experiment> {
    experiment().lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_06_paradigm_direction() {
    let mut exp = lock();
    let base = exp.run_paradigm(Paradigm::Baseline).unwrap();
    let ig = exp.run_paradigm(Paradigm::Ig).unwrap();
    let (b, i) = (base.mean_avg_length(), ig.mean_avg_length());
    check(
        6,
        i - b >= PARADIGM_MARGIN,
        format!("avg_length ig {i:.3} vs baseline {b:.3} (margin {:.3}, need >= {PARADIGM_MARGIN})", i - b),
    );
}

#[test]
fn criterion_07_attention_focus() {
    let mut exp = lock();
    let frames = exp.heldout().unwrap();
    let red = AttnReduction::default();
    let ig = paired_mass(&exp.attention(&Variant::paradigm(Paradigm::Ig), &frames, &red).unwrap());
    let base = paired_mass(&exp.attention(&Variant::paradigm(Paradigm::Baseline), &frames, &red).unwrap());
    let n = ig.len() as f64;
    let (mi, mb) = (ig.iter().sum::<f64>() / n, base.iter().sum::<f64>() / n);
    let wins = ig.iter().zip(&base).filter(|(a, b)| a > b).count();
    check(
        7,
        ig.len() >= 50 && mi > mb,
        format!("mass_in_gaze ig {mi:.4} vs baseline {mb:.4} on {} frames (ig higher on {wins})", ig.len()),
    );
}

#[test]
fn criterion_08_ablation_direction() {
    let mut exp = lock();
    let rows = ablation_variants();
    let (_, whole) = rows[1];
    let (_, gaze) = rows[2];
    let w = exp.run_variant("whole-image-recon", &whole).unwrap().mean_avg_length();
    let g = exp.run_variant("gaze-recon", &gaze).unwrap().mean_avg_length();
    check(
        8,
        g >= w - ABLATION_TIE,
        format!("avg_length gaze-recon {g:.3} vs whole-image-recon {w:.3} (tie band {ABLATION_TIE})"),
    );
}

#[test]
fn criterion_09_conditioned_sampling() {
    let mut exp = lock();
    let frames = exp.heldout().unwrap();
    let r = exp.conditioning(&Variant::paradigm(Paradigm::Ig), &frames).unwrap();
    check(
        9,
        r.pairs >= 64 && r.mse_matched < r.mse_mismatched,
        format!(
            "latent MSE matched {:.4} vs mismatched {:.4} over {} pairs",
            r.mse_matched, r.mse_mismatched, r.pairs
        ),
    );
}

// 10 ------------------------------------------------------------------------

fn regaze(args: &[&str], out: &Path, sets: &[String]) -> serde_json::Value {
    let mut c = Command::new(bin());
    c.args(args).arg("--deterministic").arg("--out").arg(out);
    for s in sets {
        c.arg("--set").arg(s);
    }
    let o = c.output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap()
}

fn pipeline(root: &Path) -> Vec<serde_json::Value> {
    let corpus = root.join("corpus");
    let tok = root.join("tok");
    let train = root.join("train");
    let eval = root.join("eval");
    let tiny = serde_json::to_string(&TrainConfig::default().model).unwrap();
    let mut model: serde_json::Value = serde_json::from_str(&tiny).unwrap();
    model["d_model"] = 32.into();
    model["n_layers"] = 1.into();
    model["recon_head_dim"] = 8.into();
    vec![
        regaze(&["gen-data"], &corpus, &["episodes={\"A\":12}".into(), "seed=3".into()]),
        regaze(
            &["fit-tokenizer"],
            &tok,
            &[format!("corpus=\"{}\"", corpus.display()), "k=8".into()],
        ),
        regaze(
            &["pretrain"],
            &train,
            &[
                format!("corpus=\"{}\"", corpus.display()),
                format!("tokenizer=\"{}\"", tok.join("tokenizer.bin").display()),
                format!("model={model}"),
                "denoiser.d_tok=8".into(),
                "denoiser.n_layers=1".into(),
                "denoiser.n_cond=128".into(),
                "steps=6".into(),
                "batch_size=4".into(),
                "checkpoint_every=3".into(),
            ],
        ),
        regaze(
            &["eval", "--policy", "checkpoint"],
            &eval,
            &[
                format!("checkpoint=\"{}\"", train.join("final.bin").display()),
                "n_chains=2".into(),
            ],
        ),
    ]
}

#[test]
fn criterion_10_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let first = pipeline(dir.path());
    for sub in ["corpus", "tok", "train", "eval"] {
        std::fs::remove_dir_all(dir.path().join(sub)).unwrap();
    }
    let second = pipeline(dir.path());
    let same = first == second;
    let outputs: usize = first.iter().map(|r| r["outputs"].as_object().map_or(0, |m| m.len())).sum();
    check(
        10,
        same && outputs > 0,
        format!("4 commands rerun with identical run.json; {outputs} output digests {}", if same { "identical" } else { "differ" }),
    );
}
