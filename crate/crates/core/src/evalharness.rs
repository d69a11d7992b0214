//! Closed-loop chain rollouts, CALVIN-style metrics, attention focus and
//! report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PolicyInput};
use crate::datapipe::{collect_episode, crop_gaze, GazeBoxes};
use crate::error::{Error, Result};
use crate::raster::{BBox, Image};
use crate::simworld::{
    self, create_world, expert_action, gaze_bbox, sample_task_chain, splitmix, step, ContinuousAction, EnvId, Phase,
    Subtask, View, WorldState,
};
use crate::tokenizers::TextVocab;
use crate::trainengine::Paradigm;

pub const CHAIN_LENGTH: usize = 5;
pub const MAX_STEPS_PER_SUBTASK: usize = 60;
pub const EVAL_SEED0: u64 = 1_000_000;

/// What a policy sees at one control step. `world` and `subtask` are only
/// meant for oracle policies (the scripted expert and the EG crop detector).
pub struct Observation<'a> {
    pub base: &'a Image,
    pub wrist: &'a Image,
    pub instruction: &'a str,
    pub world: &'a WorldState,
    pub subtask: &'a Subtask,
}

pub trait Policy {
    fn predict(&mut self, obs: &Observation) -> Result<ContinuousAction>;
}

pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn predict(&mut self, obs: &Observation) -> Result<ContinuousAction> {
        Ok(expert_action(obs.world, obs.subtask))
    }
}

pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn predict(&mut self, _: &Observation) -> Result<ContinuousAction> {
        Ok(ContinuousAction::ZERO)
    }
}

pub struct RandomPolicy(pub ChaCha8Rng);

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl Policy for RandomPolicy {
    fn predict(&mut self, _: &Observation) -> Result<ContinuousAction> {
        let mut u = || self.0.gen_range(-1.0..=1.0);
        Ok(ContinuousAction::from_array([u(), u(), u(), u()]))
    }
}

/// Trained backbone decoding greedily in the paradigm's output format.
pub struct ModelPolicy {
    pub backbone: Backbone<f32>,
    pub paradigm: Paradigm,
    vocab: TextVocab,
}

impl ModelPolicy {
    pub fn new(backbone: Backbone<f32>, paradigm: Paradigm) -> Self {
        ModelPolicy {
            backbone,
            paradigm,
            vocab: TextVocab::from_templates(),
        }
    }

    pub fn input(&self, obs: &Observation) -> Result<PolicyInput<f32>> {
        let crop = if self.paradigm.uses_crop_input() {
            let b = gaze_bbox(obs.world, obs.subtask, View::Base)?;
            Some(crop_gaze(obs.base, &b)?)
        } else {
            None
        };
        PolicyInput::from_images(
            &self.backbone,
            self.vocab.tokenize(obs.instruction)?,
            obs.base,
            obs.wrist,
            crop.as_ref(),
        )
    }

    /// All decoded ids (CG: 4 bbox + 4 action) and the executed action.
    pub fn decode(&self, obs: &Observation) -> Result<(Vec<usize>, ContinuousAction)> {
        let input = self.input(obs)?;
        self.backbone.predict_actions_with_lead(&input, self.paradigm.lead_tokens())
    }
}

impl Policy for ModelPolicy {
    fn predict(&mut self, obs: &Observation) -> Result<ContinuousAction> {
        Ok(self.decode(obs)?.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskOutcome {
    pub verb: String,
    pub success: bool,
    pub steps: usize,
}

/// One observed step, kept when tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFrame {
    pub base: Image,
    pub wrist: Image,
    pub instruction: String,
    pub boxes: Option<GazeBoxes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub seed: u64,
    pub env_id: EnvId,
    pub completed: usize,
    pub subtasks: Vec<SubtaskOutcome>,
    pub error: Option<String>,
    pub trace: Option<Vec<TraceFrame>>,
}

pub fn rollout_chain(
    policy: &mut dyn Policy,
    seed: u64,
    env_id: EnvId,
    max_steps_per_subtask: usize,
    trace: bool,
) -> Result<ChainResult> {
    let mut world = create_world(seed, env_id)?;
    let chain = sample_task_chain(seed, &world, CHAIN_LENGTH)?;
    let instructions: Vec<String> = chain.iter().map(|s| s.instruction(&world)).collect();
    let mut res = ChainResult {
        seed,
        env_id,
        completed: 0,
        subtasks: Vec::new(),
        error: None,
        trace: trace.then(Vec::new),
    };
    'chain: for (mut sub, instr) in chain.into_iter().zip(&instructions) {
        sub.advance(&world);
        let mut steps = 0;
        while sub.phase != Phase::Done && steps < max_steps_per_subtask {
            let base = simworld::render(&world, View::Base);
            let wrist = simworld::render(&world, View::Wrist);
            if let Some(t) = res.trace.as_mut() {
                t.push(TraceFrame {
                    base: base.clone(),
                    wrist: wrist.clone(),
                    instruction: instr.clone(),
                    boxes: gaze_bbox(&world, &sub, View::Base).ok().map(|b| GazeBoxes {
                        base: b,
                        wrist: gaze_bbox(&world, &sub, View::Wrist).ok(),
                    }),
                });
            }
            let obs = Observation {
                base: &base,
                wrist: &wrist,
                instruction: instr,
                world: &world,
                subtask: &sub,
            };
            let a = match policy.predict(&obs) {
                Ok(a) if a.in_range() => a,
                Ok(a) => {
                    res.error = Some(format!("policy emitted out-of-range action {a:?}"));
                    break 'chain;
                }
                Err(e) => {
                    res.error = Some(format!("policy failed: {e}"));
                    break 'chain;
                }
            };
            world = step(&world, &a);
            sub.advance(&world);
            steps += 1;
        }
        let success = sub.phase == Phase::Done;
        res.subtasks.push(SubtaskOutcome {
            verb: sub.verb.name().to_string(),
            success,
            steps,
        });
        if !success {
            break;
        }
        res.completed += 1;
    }
    Ok(res)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStat {
    pub attempted: usize,
    pub succeeded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_chains: usize,
    /// `success_counts[i]`: chains completing at least `i + 1` subtasks.
    pub success_counts: [usize; CHAIN_LENGTH],
    pub success_rates: [f64; CHAIN_LENGTH],
    pub avg_length: f64,
    pub per_task: BTreeMap<String, TaskStat>,
    pub env_id: EnvId,
    pub seed0: u64,
    pub policy_errors: usize,
}

impl EvalResult {
    pub fn from_chains(chains: &[ChainResult], env_id: EnvId, seed0: u64) -> Self {
        let n = chains.len();
        let mut counts = [0; CHAIN_LENGTH];
        let mut per_task: BTreeMap<String, TaskStat> = BTreeMap::new();
        for c in chains {
            for slot in counts.iter_mut().take(c.completed) {
                *slot += 1;
            }
            for s in &c.subtasks {
                let e = per_task.entry(s.verb.clone()).or_default();
                e.attempted += 1;
                e.succeeded += s.success as usize;
            }
        }
        let rates = counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 });
        let avg_length = if n == 0 {
            0.0
        } else {
            chains.iter().map(|c| c.completed as f64).sum::<f64>() / n as f64
        };
        EvalResult {
            n_chains: n,
            success_counts: counts,
            success_rates: rates,
            avg_length,
            per_task,
            env_id,
            seed0,
            policy_errors: chains.iter().filter(|c| c.error.is_some()).count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.success_rates.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Precondition("success rates increase with chain position".into()));
        }
        let sum: f64 = self.success_rates.iter().sum();
        if (sum - self.avg_length).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "avg_length {} differs from summed rates {sum}",
                self.avg_length
            )));
        }
        Ok(())
    }
}

pub fn evaluate(
    policy: &mut dyn Policy,
    n_chains: usize,
    env_id: EnvId,
    seed0: u64,
    max_steps_per_subtask: usize,
) -> Result<EvalResult> {
    let chains = (0..n_chains)
        .map(|i| rollout_chain(policy, seed0 + i as u64, env_id, max_steps_per_subtask, false))
        .collect::<Result<Vec<_>>>()?;
    let r = EvalResult::from_chains(&chains, env_id, seed0);
    r.validate()?;
    Ok(r)
}

/// Which attention rows and layers are reduced into one distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnReduction {
    /// `None` averages every layer.
    pub layer: Option<usize>,
    /// `None` averages every head.
    pub head: Option<usize>,
    /// Average every ACT query instead of the first.
    pub all_queries: bool,
}

impl Default for AttnReduction {
    fn default() -> Self {
        AttnReduction {
            layer: Some(usize::MAX),
            head: None,
            all_queries: false,
        }
    }
}

impl AttnReduction {
    pub fn tag(&self) -> String {
        let layer = match self.layer {
            Some(usize::MAX) => "final".to_string(),
            Some(l) => l.to_string(),
            None => "mean".to_string(),
        };
        let head = self.head.map_or("mean".to_string(), |h| h.to_string());
        let q = if self.all_queries { "all-act" } else { "first-act" };
        format!("layer={layer},head={head},query={q}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameAttn {
    pub mass_in_gaze: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnReport {
    pub frames: Vec<FrameAttn>,
    pub mean_mass_in_gaze: f64,
    pub mean_entropy: f64,
    pub reduction: String,
}

/// Mass on `in_box` keys and entropy normalised by `ln(len)`, after
/// renormalising `p` to sum to one.
pub fn focus_stats(p: &[f64], in_box: &[bool]) -> FrameAttn {
    let total: f64 = p.iter().sum();
    let mut mass = 0.0;
    let mut h = 0.0;
    for (&v, &b) in p.iter().zip(in_box) {
        let q = v / total;
        if b {
            mass += q;
        }
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    let entropy = if p.len() > 1 { h / (p.len() as f64).ln() } else { 0.0 };
    FrameAttn {
        mass_in_gaze: mass.clamp(0.0, 1.0),
        entropy: entropy.clamp(0.0, 1.0),
    }
}

/// Key cells of one view (row-major patches) that intersect `b`.
pub fn patches_in_box(b: &BBox, image: usize, patch: usize) -> Vec<bool> {
    let n = image / patch;
    (0..n * n)
        .map(|j| {
            let (x0, y0) = ((j % n * patch) as u32, (j / n * patch) as u32);
            b.intersects(x0, y0, x0 + patch as u32, y0 + patch as u32)
        })
        .collect()
}

/// A held-out observation with its gaze boxes.
#[derive(Debug, Clone)]
pub struct AttnFrame {
    pub base: Image,
    pub wrist: Image,
    pub crop: Image,
    pub instruction: String,
    pub boxes: GazeBoxes,
}

/// Evenly spaced expert frames from fresh episodes on `env`.
pub fn heldout_frames(n: usize, env: EnvId, seed0: u64) -> Result<Vec<AttnFrame>> {
    let mut out = Vec::with_capacity(n);
    let mut seed = seed0;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed0, 5));
    while out.len() < n {
        let ep = crate::datapipe::annotate_gaze(collect_episode(seed, env, CHAIN_LENGTH)?)?;
        seed += 1;
        let e = &ep.episode;
        for _ in 0..5.min(n - out.len()) {
            let f = rng.gen_range(0..e.actions.len());
            out.push(AttnFrame {
                base: e.frames[f].base.clone(),
                wrist: e.frames[f].wrist.clone(),
                crop: ep.crops[f].clone(),
                instruction: e.frame_instruction(f).to_string(),
                boxes: e.gaze_boxes[f],
            });
        }
    }
    Ok(out)
}

/// Reduced, image-restricted attention distribution over `image_tokens` keys.
pub fn image_attention(
    model: &Backbone<f32>,
    paradigm: Paradigm,
    frame: &AttnFrame,
    reduction: &AttnReduction,
) -> Result<Vec<f64>> {
    let vocab = TextVocab::from_templates();
    let crop = paradigm.uses_crop_input().then_some(&frame.crop);
    let input = PolicyInput::from_images(model, vocab.tokenize(&frame.instruction)?, &frame.base, &frame.wrist, crop)?;
    let seq = model.assemble_sequence(&input, &[])?;
    let (out, _) = model.forward(&seq, true)?;
    let att = out.attention_maps()?;
    let layers: Vec<usize> = match reduction.layer {
        Some(usize::MAX) => vec![att.len() - 1],
        Some(l) if l < att.len() => vec![l],
        Some(l) => return Err(Error::Config(format!("layer {l} out of range"))),
        None => (0..att.len()).collect(),
    };
    let queries: Vec<usize> = if reduction.all_queries {
        seq.act_span.clone().collect()
    } else {
        vec![seq.act_span.start]
    };
    let span = seq.image_span.clone();
    let mut p = vec![0.0; span.len()];
    for &l in &layers {
        let heads: Vec<usize> = match reduction.head {
            Some(h) => vec![h.min(att[l].len() - 1)],
            None => (0..att[l].len()).collect(),
        };
        for &h in &heads {
            for &q in &queries {
                for (j, k) in span.clone().enumerate() {
                    p[j] += att[l][h][(q, k)] as f64;
                }
            }
        }
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NonFiniteActivation("image attention has no mass".into()));
    }
    Ok(p.into_iter().map(|v| v / total).collect())
}

pub fn gaze_key_mask(frame: &AttnFrame, image: usize, patch: usize) -> Vec<bool> {
    let mut m = patches_in_box(&frame.boxes.base, image, patch);
    match frame.boxes.wrist {
        Some(w) => m.extend(patches_in_box(&w, image, patch)),
        None => m.extend(std::iter::repeat(false).take((image / patch).pow(2))),
    }
    m
}

pub fn attention_focus(
    model: &Backbone<f32>,
    paradigm: Paradigm,
    frames: &[AttnFrame],
    reduction: &AttnReduction,
) -> Result<AttnReport> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let p = image_attention(model, paradigm, f, reduction)?;
        out.push(focus_stats(&p, &gaze_key_mask(f, cfg.image_size, cfg.patch_size)));
    }
    let n = out.len().max(1) as f64;
    Ok(AttnReport {
        mean_mass_in_gaze: out.iter().map(|f| f.mass_in_gaze).sum::<f64>() / n,
        mean_entropy: out.iter().map(|f| f.entropy).sum::<f64>() / n,
        frames: out,
        reduction: reduction.tag(),
    })
}

/// Base-view attention blended in red over the frame, gaze box outlined in green.
pub fn attention_heatmap(frame: &Image, p_base: &[f64], patch: usize, gaze: &BBox) -> Image {
    let n = frame.width / patch;
    let max = p_base.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut img = frame.clone();
    for y in 0..frame.height {
        for x in 0..frame.width {
            let a = p_base[(y / patch) * n + x / patch] / max;
            let c = frame.get(x, y);
            let mix = |v: u8, t: f64| ((1.0 - 0.6 * a) * v as f64 + 0.6 * a * t).round() as u8;
            img.put(x, y, [mix(c[0], 255.0), mix(c[1], 0.0), mix(c[2], 0.0)]);
        }
    }
    for x in gaze.x_min..gaze.x_max {
        img.put(x as usize, gaze.y_min as usize, [0, 255, 0]);
        img.put(x as usize, gaze.y_max as usize - 1, [0, 255, 0]);
    }
    for y in gaze.y_min..gaze.y_max {
        img.put(gaze.x_min as usize, y as usize, [0, 255, 0]);
        img.put(gaze.x_max as usize - 1, y as usize, [0, 255, 0]);
    }
    img
}

/// One table row: a label with per-seed results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub results: Vec<EvalResult>,
}

impl ReportRow {
    pub fn mean_avg_length(&self) -> f64 {
        self.results.iter().map(|r| r.avg_length).sum::<f64>() / self.results.len().max(1) as f64
    }

    pub fn mean_rates(&self) -> [f64; CHAIN_LENGTH] {
        let n = self.results.len().max(1) as f64;
        let mut m = [0.0; CHAIN_LENGTH];
        for r in &self.results {
            for (a, b) in m.iter_mut().zip(r.success_rates) {
                *a += b / n;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub tables: BTreeMap<String, Vec<ReportRow>>,
    pub attention: BTreeMap<String, AttnReport>,
    pub extra: serde_json::Value,
}

/// Heatmaps to write: (label, frame, image).
pub type Heatmaps = Vec<(String, usize, Image)>;

/// Writes `summary.json`, `tables/<name>.csv` and `attn/<label>/<frame>.png`.
pub fn emit_report(summary: &Summary, heatmaps: &Heatmaps, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if summary.tables.values().all(|t| t.is_empty()) {
        return Err(Error::Precondition("no results to report".into()));
    }
    let mut written = Vec::new();
    let tables = out_dir.join("tables");
    fs::create_dir_all(&tables).map_err(|e| Error::io(&tables, e))?;
    for (name, rows) in &summary.tables {
        let path = tables.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["paradigm", "sr1", "sr2", "sr3", "sr4", "sr5", "avg_len", "n_chains", "seed0"])?;
        for row in rows {
            let rates = row.mean_rates();
            let mut rec = vec![row.label.clone()];
            rec.extend(rates.iter().map(|r| format!("{r:.4}")));
            rec.push(format!("{:.4}", row.mean_avg_length()));
            rec.push(row.results.iter().map(|r| r.n_chains).sum::<usize>().to_string());
            rec.push(row.results.first().map_or(0, |r| r.seed0).to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    for (label, frame, img) in heatmaps {
        let dir = out_dir.join("attn").join(label);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{frame:03}.png"));
        fs::write(&path, img.encode_png()?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary)?;
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    let back: Summary = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    if serde_json::to_value(&back)? != serde_json::to_value(summary)? {
        return Err(Error::Precondition("summary.json failed read-back validation".into()));
    }
    written.push(path);
    Ok(written)
}

/// Dotted paths of JSON leaves that differ between two configs.
pub fn config_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: String, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(path),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, String::new(), &mut out);
    out
}
