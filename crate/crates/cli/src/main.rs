use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use regaze_core::container::sha256_hex;
use regaze_core::datapipe::{build_corpus, Corpus, CorpusConfig};
use regaze_core::evalharness::{
    self, attention_heatmap, emit_report, evaluate, image_attention, AttnReduction, ExpertPolicy, ModelPolicy,
    Policy, RandomPolicy, ReportRow, Summary, ZeroPolicy,
};
use regaze_core::experiment::{ablation_variants, paired_mass, Experiment, ExperimentConfig, Variant};
use regaze_core::simworld::EnvId;
use regaze_core::tokenizers::fit_scene_tokenizer;
use regaze_core::trainengine::{self, grad_check, load_checkpoint, Paradigm, Stage, TrainConfig};
use regaze_core::Error;

#[derive(Parser)]
#[command(name = "regaze", about = "Gaze-reconstruction VLA policies on a toy tabletop benchmark")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.learning_rate=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[arg(long, global = true)]
    json_logs: bool,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Build a sharded corpus from expert rollouts.
    GenData,
    /// Fit the PCA scene tokenizer on a corpus' gaze crops.
    FitTokenizer,
    Pretrain,
    Finetune,
    /// Closed-loop chain evaluation.
    Eval {
        #[arg(long, value_enum)]
        policy: Option<PolicyKind>,
    },
    /// Train and evaluate all paradigms.
    Compare,
    /// Run the four ablation rows.
    Ablate,
    /// Attention heatmaps and focus statistics for a checkpoint.
    VizAttn,
    /// Finite-difference gradient check on the tiny model.
    GradCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PolicyKind {
    Expert,
    Zero,
    Random,
    Checkpoint,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    episodes: BTreeMap<EnvId, usize>,
    chain_length: usize,
    seed: u64,
    episodes_per_shard: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let c = CorpusConfig::default();
        GenDataConfig {
            episodes: [(EnvId::A, 100), (EnvId::B, 100), (EnvId::C, 100)].into_iter().collect(),
            chain_length: c.chain_length,
            seed: c.seed,
            episodes_per_shard: c.episodes_per_shard,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitTokenizerConfig {
    corpus: PathBuf,
    patch_size: usize,
    k: usize,
}

impl Default for FitTokenizerConfig {
    fn default() -> Self {
        FitTokenizerConfig {
            corpus: "corpus".into(),
            patch_size: 8,
            k: 32,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    policy: PolicyKind,
    checkpoint: Option<PathBuf>,
    paradigm: Paradigm,
    n_chains: usize,
    env: EnvId,
    seed0: u64,
    max_steps_per_subtask: usize,
    seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            policy: PolicyKind::Expert,
            checkpoint: None,
            paradigm: Paradigm::Ig,
            n_chains: 100,
            env: EnvId::D,
            seed0: evalharness::EVAL_SEED0,
            max_steps_per_subtask: evalharness::MAX_STEPS_PER_SUBTASK,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareConfig {
    experiment: ExperimentConfig,
    paradigms: Vec<Paradigm>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            experiment: ExperimentConfig::default(),
            paradigms: Paradigm::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VizConfig {
    checkpoint: PathBuf,
    paradigm: Paradigm,
    frames: usize,
    seed0: u64,
    reduction: AttnReduction,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig {
            checkpoint: "final.bin".into(),
            paradigm: Paradigm::Ig,
            frames: 8,
            seed0: 2_000_000,
            reduction: AttnReduction::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradCheckConfig {
    seed: u64,
    samples: usize,
    epsilon: f64,
    threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            samples: 256,
            epsilon: 1e-4,
            threshold: 1e-4,
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(format!("config: {e}"))
    }
}

type Res<T> = std::result::Result<T, Failure>;

struct Logger {
    json: bool,
}

impl Logger {
    fn info(&self, msg: &str) {
        if self.json {
            println!("{}", json!({"level": "info", "msg": msg}));
        } else {
            println!("{msg}");
        }
    }

    fn result(&self, fields: Value) {
        if self.json {
            println!("{}", json!({"level": "result", "fields": fields}));
        } else if let Value::Object(m) = fields {
            for (k, v) in m {
                println!("{k}: {v}");
            }
        }
    }
}

fn io_err(p: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", p.display()))
}

/// Sets `a.b.c` in a JSON object; the value is parsed as JSON, else kept as a string.
fn apply_set(cfg: &mut Value, kv: &str) -> Res<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
    let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = cfg;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Failure::Data(format!("--set {key}: {p} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), val);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides and the global flags.
fn load_config<T: Serialize + DeserializeOwned + Default>(
    g: &Global,
    flags: &[(&str, Option<Value>)],
) -> Res<(T, Value)> {
    let mut v = serde_json::to_value(T::default())?;
    if let Some(p) = &g.config {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let file: Value = serde_json::from_str(&text)?;
        merge(&mut v, file);
    }
    for kv in &g.set {
        apply_set(&mut v, kv)?;
    }
    for (k, val) in flags {
        if let Some(val) = val {
            apply_set(&mut v, &format!("{k}={val}"))?;
        }
    }
    let t: T = serde_json::from_value(v)?;
    let echoed = serde_json::to_value(&t)?;
    Ok((t, echoed))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Content digest of a file, or of a directory as a sorted (path, digest) listing.
fn content_digest(path: &Path) -> Res<String> {
    if path.is_dir() {
        let mut entries = Vec::new();
        walk(path, path, &mut entries)?;
        let listing: Vec<String> = entries.iter().map(|(p, d)| format!("{d}  {p}")).collect();
        Ok(sha256_hex(listing.join("\n").as_bytes()))
    } else {
        Ok(sha256_hex(&fs::read(path).map_err(|e| io_err(path, e))?))
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Res<()> {
    let mut items: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    items.sort();
    for p in items {
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("inside root").to_string_lossy().replace('\\', "/");
            out.push((rel, sha256_hex(&fs::read(&p).map_err(|e| io_err(&p, e))?)));
        }
    }
    Ok(())
}

/// Files under `out` that a command produced, keyed by relative path.
fn output_digests(out: &Path) -> Res<BTreeMap<String, String>> {
    let mut entries = Vec::new();
    if out.exists() {
        walk(out, out, &mut entries)?;
    }
    Ok(entries
        .into_iter()
        .filter(|(p, _)| p != "run.json" && p != "config.json")
        .collect())
}

struct Run {
    out: PathBuf,
    command: &'static str,
    config: Value,
    inputs: BTreeMap<String, String>,
}

impl Run {
    fn start(out: &Path, command: &'static str, config: Value, inputs: &[&Path]) -> Res<Self> {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let p = out.join("config.json");
        fs::write(&p, serde_json::to_string_pretty(&config)?).map_err(|e| io_err(&p, e))?;
        let mut digests = BTreeMap::new();
        for i in inputs {
            if i.exists() {
                digests.insert(i.display().to_string(), content_digest(i)?);
            }
        }
        Ok(Run {
            out: out.to_path_buf(),
            command,
            config,
            inputs: digests,
        })
    }

    fn finish(self, status: &str) -> Res<()> {
        let outputs = output_digests(&self.out)?;
        let run = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
            "status": status,
        });
        let p = self.out.join("run.json");
        fs::write(&p, serde_json::to_string_pretty(&run)?).map_err(|e| io_err(&p, e))
    }
}

fn seed_flag(g: &Global, key: &'static str) -> (&'static str, Option<Value>) {
    (key, g.seed.map(|s| json!(s)))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.global.workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.global.workers).build_global();
    }
    let log = Logger {
        json: cli.global.json_logs,
    };
    match run(&cli, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Numeric(m) => (3, m),
            };
            if log.json {
                println!("{}", json!({"level": "error", "msg": msg, "exit": code}));
            }
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli, log: &Logger) -> Res<()> {
    let g = &cli.global;
    let det = g.deterministic.then(|| json!(true));
    match &cli.command {
        Command::GenData => {
            let (c, echo): (GenDataConfig, _) = load_config(g, &[seed_flag(g, "seed")])?;
            let run = Run::start(&g.out, "gen-data", echo, &[])?;
            let m = build_corpus(&CorpusConfig {
                root: g.out.clone(),
                episodes: c.episodes,
                chain_length: c.chain_length,
                seed: c.seed,
                episodes_per_shard: c.episodes_per_shard,
            })?;
            log.result(json!({"episodes": m.episode_count, "samples": m.sample_count, "manifest_digest": m.digest()}));
            run.finish("ok")
        }
        Command::FitTokenizer => {
            let (c, echo): (FitTokenizerConfig, _) = load_config(g, &[])?;
            let run = Run::start(&g.out, "fit-tokenizer", echo, &[&c.corpus])?;
            let tok = fit_scene_tokenizer(&Corpus::open(&c.corpus)?, c.patch_size, c.k)?;
            let digest = tok.save(&g.out.join("tokenizer.bin"))?;
            log.result(json!({"k": tok.k, "digest": digest}));
            run.finish("ok")
        }
        Command::Pretrain | Command::Finetune => {
            let stage = if matches!(cli.command, Command::Pretrain) {
                Stage::Pretrain
            } else {
                Stage::Finetune
            };
            let (mut c, _): (TrainConfig, _) =
                load_config(g, &[seed_flag(g, "seed"), ("deterministic", det.clone())])?;
            c.stage = stage;
            c.checkpoint = g.out.clone();
            let echo = serde_json::to_value(&c)?;
            let mut inputs: Vec<&Path> = vec![&c.corpus, &c.tokenizer];
            if let Some(p) = &c.init_checkpoint {
                inputs.push(p);
            }
            let run = Run::start(&g.out, if stage == Stage::Pretrain { "pretrain" } else { "finetune" }, echo, &inputs)?;
            log.info(&format!("training {:?} {} for {} steps", stage, c.paradigm.name(), c.steps));
            let r = trainengine::run_stage(&c)?;
            log.result(json!({"checkpoint": r.path, "digest": r.digest, "final": r.final_metrics}));
            run.finish("ok")
        }
        Command::Eval { policy } => {
            let pflag = policy.map(|p| serde_json::to_value(p).expect("enum serializes"));
            let (c, echo): (EvalConfig, _) = load_config(g, &[("policy", pflag), seed_flag(g, "seed")])?;
            let inputs: Vec<&Path> = c.checkpoint.iter().map(|p| p.as_path()).collect();
            let run = Run::start(&g.out, "eval", echo, &inputs)?;
            let mut pol: Box<dyn Policy> = match c.policy {
                PolicyKind::Expert => Box::new(ExpertPolicy),
                PolicyKind::Zero => Box::new(ZeroPolicy),
                PolicyKind::Random => Box::new(RandomPolicy::new(c.seed)),
                PolicyKind::Checkpoint => {
                    let p = c
                        .checkpoint
                        .as_ref()
                        .ok_or_else(|| Failure::Data("policy checkpoint needs a checkpoint path".into()))?;
                    Box::new(ModelPolicy::new(load_checkpoint::<f32>(p)?.backbone, c.paradigm))
                }
            };
            let r = evaluate(pol.as_mut(), c.n_chains, c.env, c.seed0, c.max_steps_per_subtask)?;
            let p = g.out.join("eval.json");
            fs::write(&p, serde_json::to_string_pretty(&r)?).map_err(|e| io_err(&p, e))?;
            log.result(json!({"avg_length": r.avg_length, "success_rates": r.success_rates, "n_chains": r.n_chains}));
            run.finish("ok")
        }
        Command::Compare | Command::Ablate => {
            let ablate = matches!(cli.command, Command::Ablate);
            let (c, _): (CompareConfig, _) = load_config(
                g,
                &[
                    ("experiment.corpus_seed", g.seed.map(|s| json!(s))),
                    ("experiment.train.deterministic", det.clone()),
                ],
            )?;
            let echo = serde_json::to_value(&c)?;
            let run = Run::start(&g.out, if ablate { "ablate" } else { "compare" }, echo, &[])?;
            let json_logs = log.json;
            let mut exp = Experiment::prepare(
                c.experiment.clone(),
                Box::new(move |m| Logger { json: json_logs }.info(m)),
            )?;
            let (name, rows): (&str, Vec<ReportRow>) = if ablate {
                ("ablation", exp.ablation_suite()?)
            } else {
                ("paradigms", exp.compare(&c.paradigms)?)
            };
            let mut attention = BTreeMap::new();
            let mut heatmaps = Vec::new();
            if !ablate && c.experiment.attn_frames > 0 {
                let frames = exp.heldout()?;
                let red = AttnReduction::default();
                for p in &c.paradigms {
                    let v = Variant::paradigm(*p);
                    let reps = exp.attention(&v, &frames, &red)?;
                    let mass = paired_mass(&reps);
                    let mut rep = reps[0].clone();
                    rep.mean_mass_in_gaze = mass.iter().sum::<f64>() / mass.len().max(1) as f64;
                    attention.insert(p.name().to_string(), rep);
                    let ckpt = exp.train(&v, c.experiment.seeds[0])?;
                    let model = load_checkpoint::<f32>(&ckpt)?.backbone;
                    for (i, f) in frames.iter().enumerate().take(4) {
                        let att = image_attention(&model, *p, f, &red)?;
                        let n = model.config.view_patches();
                        heatmaps.push((p.name().to_string(), i, attention_heatmap(&f.base, &att[..n], model.config.patch_size, &f.boxes.base)));
                    }
                }
            }
            for r in &rows {
                log.result(json!({"row": r.label, "avg_length": r.mean_avg_length(), "rates": r.mean_rates()}));
            }
            let labels: Vec<&str> = if ablate {
                ablation_variants().iter().map(|(l, _)| *l).collect()
            } else {
                c.paradigms.iter().map(|p| p.name()).collect()
            };
            let summary = Summary {
                run_id: format!("{name}-{}", &sha256_hex(serde_json::to_string(&c)?.as_bytes())[..12]),
                tables: [(name.to_string(), rows)].into_iter().collect(),
                attention,
                extra: json!({"rows": labels}),
            };
            let dir = g.out.join("results").join(&summary.run_id);
            emit_report(&summary, &heatmaps, &dir)?;
            log.info(&format!("report written to {}", dir.display()));
            run.finish("ok")
        }
        Command::VizAttn => {
            let (c, echo): (VizConfig, _) = load_config(g, &[])?;
            let run = Run::start(&g.out, "viz-attn", echo, &[&c.checkpoint])?;
            let model = load_checkpoint::<f32>(&c.checkpoint)?.backbone;
            let frames = evalharness::heldout_frames(c.frames, EnvId::D, c.seed0)?;
            let rep = evalharness::attention_focus(&model, c.paradigm, &frames, &c.reduction)?;
            let n = model.config.view_patches();
            for (i, f) in frames.iter().enumerate() {
                let att = image_attention(&model, c.paradigm, f, &c.reduction)?;
                let img = attention_heatmap(&f.base, &att[..n], model.config.patch_size, &f.boxes.base);
                let dir = g.out.join("attn").join(format!("episode-{:03}", i / 5));
                fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                let p = dir.join(format!("{:03}.png", i % 5));
                fs::write(&p, img.encode_png()?).map_err(|e| io_err(&p, e))?;
            }
            let p = g.out.join("attention.json");
            fs::write(&p, serde_json::to_string_pretty(&rep)?).map_err(|e| io_err(&p, e))?;
            log.result(json!({"mean_mass_in_gaze": rep.mean_mass_in_gaze, "mean_entropy": rep.mean_entropy, "frames": rep.frames.len()}));
            run.finish("ok")
        }
        Command::GradCheck => {
            let (c, echo): (GradCheckConfig, _) = load_config(g, &[seed_flag(g, "seed")])?;
            let run = Run::start(&g.out, "grad-check", echo, &[])?;
            let r = grad_check(c.seed, c.samples, c.epsilon)?;
            let p = g.out.join("grad_check.json");
            fs::write(&p, serde_json::to_string_pretty(&r)?).map_err(|e| io_err(&p, e))?;
            log.result(json!({
                "max_rel_err": r.max_rel_err,
                "n_params": r.n_params,
                "visual_backbone_grad": r.visual_backbone_grad,
            }));
            let ok = r.max_rel_err < c.threshold && r.visual_backbone_grad > 0.0;
            run.finish(if ok { "ok" } else { "failed" })?;
            if ok {
                Ok(())
            } else {
                Err(Failure::Numeric(format!(
                    "gradient check failed: max_rel_err {:e} (threshold {:e})",
                    r.max_rel_err, c.threshold
                )))
            }
        }
    }
}
