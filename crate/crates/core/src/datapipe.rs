//! Expert rollouts → paired (full frame, gaze crop) corpus on disk.
//!
//! Layout: `<root>/manifest.json` and `<root>/shards/shard-%05d.bin`.
//!
//! Shard file: `b"RGZS" ‖ u32 schema version ‖ u32 record count`, then per
//! record `u32 payload length ‖ u32 CRC-32(payload) ‖ payload`. A payload is
//! `u32 header length ‖ JSON header ‖ (u32 length ‖ PNG)* ‖ actions as f32 LE`,
//! with three PNGs per frame (base, wrist, gaze crop).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::error::{Error, Result};
use crate::raster::{BBox, Image};
use crate::simworld::{
    self, create_world, expert_action, gaze_bbox, object_bbox, sample_task_chain, step,
    ContinuousAction, EnvId, Phase, Subtask, View,
};
use crate::tokenizers::TextVocab;

pub const SHARD_MAGIC: &[u8; 4] = b"RGZS";
pub const SCHEMA_VERSION: u32 = 1;
pub const CROP_SIZE: usize = 32;
pub const MAX_STEPS_PER_SUBTASK: usize = 60;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub base: Image,
    pub wrist: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeBoxes {
    pub base: BBox,
    pub wrist: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// All subtask clauses joined with "; then".
    pub instruction: String,
    pub subtask_instructions: Vec<String>,
    pub subtasks: Vec<Subtask>,
    pub frames: Vec<Frame>,
    /// `actions[i]` is taken at `frames[i]`.
    pub actions: Vec<ContinuousAction>,
    pub gaze_boxes: Vec<GazeBoxes>,
    pub subtask_index: Vec<usize>,
    pub env_id: EnvId,
    pub seed: u64,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.actions.len() + 1 != self.frames.len() {
            return bad(format!(
                "{} actions for {} frames",
                self.actions.len(),
                self.frames.len()
            ));
        }
        if self.gaze_boxes.len() != self.frames.len() || self.subtask_index.len() != self.frames.len() {
            return bad("per-frame annotation count differs from frame count".into());
        }
        if self.subtask_index.windows(2).any(|w| w[0] > w[1]) {
            return bad("subtask_index decreases".into());
        }
        for (g, f) in self.gaze_boxes.iter().zip(&self.frames) {
            if !g.base.is_valid(f.base.width, f.base.height)
                || g.wrist.is_some_and(|w| !w.is_valid(f.wrist.width, f.wrist.height))
            {
                return bad("gaze box outside raster".into());
            }
        }
        Ok(())
    }

    /// Instruction the policy sees at `frame`.
    pub fn frame_instruction(&self, frame: usize) -> &str {
        &self.subtask_instructions[self.subtask_index[frame]]
    }
}

/// Rolls the expert through a freshly sampled chain, recording every frame.
pub fn collect_episode(seed: u64, env_id: EnvId, chain_length: usize) -> Result<Episode> {
    let mut world = create_world(seed, env_id)?;
    let chain = sample_task_chain(seed, &world, chain_length)?;
    let subtask_instructions: Vec<String> = chain.iter().map(|s| s.instruction(&world)).collect();
    let mut ep = Episode {
        instruction: subtask_instructions.join("; then "),
        subtask_instructions,
        subtasks: chain.clone(),
        frames: Vec::new(),
        actions: Vec::new(),
        gaze_boxes: Vec::new(),
        subtask_index: Vec::new(),
        env_id,
        seed,
    };
    let record = |ep: &mut Episode, world: &simworld::WorldState, sub: &Subtask, i: usize| -> Result<()> {
        ep.frames.push(Frame {
            base: simworld::render(world, View::Base),
            wrist: simworld::render(world, View::Wrist),
        });
        ep.gaze_boxes.push(GazeBoxes {
            base: gaze_bbox(world, sub, View::Base)?,
            wrist: gaze_bbox(world, sub, View::Wrist).ok(),
        });
        ep.subtask_index.push(i);
        Ok(())
    };
    let mut last = chain[0].clone();
    for (i, mut sub) in chain.into_iter().enumerate() {
        sub.advance(&world);
        let mut steps = 0;
        while sub.phase != Phase::Done {
            if steps == MAX_STEPS_PER_SUBTASK {
                return Err(Error::InfeasibleChain(format!(
                    "expert exceeded {MAX_STEPS_PER_SUBTASK} steps on subtask {i} (seed {seed})"
                )));
            }
            record(&mut ep, &world, &sub, i)?;
            let a = expert_action(&world, &sub);
            ep.actions.push(a);
            world = step(&world, &a);
            sub.advance(&world);
            steps += 1;
        }
        last = sub;
    }
    // Terminal frame keeps the last subtask's final gaze object.
    last.phase = Phase::TransportToDestination;
    let n = ep.subtasks.len() - 1;
    record(&mut ep, &world, &last, n)?;
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedEpisode {
    pub episode: Episode,
    /// Base-view gaze crops, one per frame, `CROP_SIZE × CROP_SIZE`.
    pub crops: Vec<Image>,
}

pub fn crop_gaze(frame: &Image, bbox: &BBox) -> Result<Image> {
    if bbox.area() < 4 {
        return Err(Error::DegenerateBox { area: bbox.area() });
    }
    Ok(frame.crop_resize(bbox, CROP_SIZE, CROP_SIZE))
}

/// Crops every frame with boxes from `source` (frame index → box).
pub fn annotate_gaze_with(
    episode: Episode,
    mut source: impl FnMut(usize, &Frame) -> BBox,
) -> Result<AnnotatedEpisode> {
    episode.validate()?;
    let crops = episode
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| crop_gaze(&f.base, &source(i, f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnnotatedEpisode { episode, crops })
}

/// Uses the episode's own (simulator oracle) boxes as the detector.
pub fn annotate_gaze(episode: Episode) -> Result<AnnotatedEpisode> {
    let boxes: Vec<BBox> = episode.gaze_boxes.iter().map(|g| g.base).collect();
    annotate_gaze_with(episode, |i, _| boxes[i])
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    instruction: String,
    subtask_instructions: Vec<String>,
    subtasks: Vec<Subtask>,
    boxes: Vec<GazeBoxes>,
    subtask_index: Vec<usize>,
    seed: u64,
    env_id: EnvId,
    n_frames: usize,
    n_actions: usize,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode_record(a: &AnnotatedEpisode) -> Result<Vec<u8>> {
    let e = &a.episode;
    let header = RecordHeader {
        instruction: e.instruction.clone(),
        subtask_instructions: e.subtask_instructions.clone(),
        subtasks: e.subtasks.clone(),
        boxes: e.gaze_boxes.clone(),
        subtask_index: e.subtask_index.clone(),
        seed: e.seed,
        env_id: e.env_id,
        n_frames: e.frames.len(),
        n_actions: e.actions.len(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    put_u32(&mut out, head.len());
    out.extend_from_slice(&head);
    for (f, c) in e.frames.iter().zip(&a.crops) {
        for img in [&f.base, &f.wrist, c] {
            let png = img.encode_png()?;
            put_u32(&mut out, png.len());
            out.extend_from_slice(&png);
        }
    }
    for act in &e.actions {
        for v in act.to_array() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn decode_record(payload: &[u8], path: &Path) -> Result<AnnotatedEpisode> {
    let corrupt = |d: &str| Error::ChecksumMismatch {
        path: path.to_path_buf(),
        detail: d.to_string(),
    };
    let mut c = Cursor { buf: payload, pos: 0 };
    let hlen = c.u32().ok_or_else(|| corrupt("short record"))?;
    let header: RecordHeader =
        serde_json::from_slice(c.take(hlen).ok_or_else(|| corrupt("short header"))?)?;
    let mut frames = Vec::with_capacity(header.n_frames);
    let mut crops = Vec::with_capacity(header.n_frames);
    for _ in 0..header.n_frames {
        let mut imgs = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = c.u32().ok_or_else(|| corrupt("short image length"))?;
            imgs.push(Image::decode_png(c.take(n).ok_or_else(|| corrupt("short image"))?)?);
        }
        crops.push(imgs.pop().unwrap());
        let wrist = imgs.pop().unwrap();
        let base = imgs.pop().unwrap();
        frames.push(Frame { base, wrist });
    }
    let mut actions = Vec::with_capacity(header.n_actions);
    for _ in 0..header.n_actions {
        let b = c.take(16).ok_or_else(|| corrupt("short actions"))?;
        let v: Vec<f64> = b
            .chunks_exact(4)
            .map(|x| f32::from_le_bytes([x[0], x[1], x[2], x[3]]) as f64)
            .collect();
        actions.push(ContinuousAction::from_array([v[0], v[1], v[2], v[3]]));
    }
    let episode = Episode {
        instruction: header.instruction,
        subtask_instructions: header.subtask_instructions,
        subtasks: header.subtasks,
        frames,
        actions,
        gaze_boxes: header.boxes,
        subtask_index: header.subtask_index,
        env_id: header.env_id,
        seed: header.seed,
    };
    episode.validate()?;
    Ok(AnnotatedEpisode { episode, crops })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardRef {
    pub path: PathBuf,
    pub episodes: usize,
    pub samples: usize,
    pub digest: String,
}

pub fn write_shard(episodes: &[AnnotatedEpisode], path: &Path) -> Result<ShardRef> {
    if episodes.is_empty() {
        return Err(Error::Precondition("refusing to write an empty shard".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(SHARD_MAGIC);
    put_u32(&mut out, SCHEMA_VERSION as usize);
    put_u32(&mut out, episodes.len());
    for e in episodes {
        let payload = encode_record(e)?;
        put_u32(&mut out, payload.len());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &out).map_err(|e| Error::io(path, e))?;
    Ok(ShardRef {
        path: path.to_path_buf(),
        episodes: episodes.len(),
        samples: episodes.iter().map(|e| e.episode.frames.len()).sum(),
        digest: sha256_hex(&out),
    })
}

pub fn read_shard(path: &Path) -> Result<Vec<AnnotatedEpisode>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |d: String| Error::ChecksumMismatch {
        path: path.to_path_buf(),
        detail: d,
    };
    let mut c = Cursor { buf: &bytes, pos: 0 };
    if c.take(4) != Some(SHARD_MAGIC.as_slice()) {
        return Err(corrupt("bad magic".into()));
    }
    let version = c.u32().ok_or_else(|| corrupt("short preamble".into()))? as u32;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersionUnsupported {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let count = c.u32().ok_or_else(|| corrupt("short preamble".into()))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = c.u32().ok_or_else(|| corrupt(format!("record {i}: missing length")))?;
        let crc = c.u32().ok_or_else(|| corrupt(format!("record {i}: missing checksum")))? as u32;
        let payload = c
            .take(len)
            .ok_or_else(|| corrupt(format!("record {i}: truncated payload")))?;
        if crc32fast::hash(payload) != crc {
            return Err(corrupt(format!("record {i}: CRC-32 differs")));
        }
        out.push(decode_record(payload, path)?);
    }
    if c.pos != bytes.len() {
        return Err(corrupt("trailing bytes after last record".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub root: PathBuf,
    /// Episodes per environment.
    pub episodes: BTreeMap<EnvId, usize>,
    pub chain_length: usize,
    pub seed: u64,
    pub episodes_per_shard: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            root: PathBuf::from("corpus"),
            episodes: [(EnvId::A, 10), (EnvId::B, 10), (EnvId::C, 10)].into_iter().collect(),
            chain_length: 5,
            seed: 0,
            episodes_per_shard: 8,
        }
    }
}

/// Seed of the `index`-th episode of `env` in a corpus built from `base`.
pub fn episode_seed(base: u64, env: EnvId, index: usize) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add((env as u64 + 1) * 10_000_000)
        .wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    /// Relative to the corpus root.
    pub shard_paths: Vec<String>,
    pub shard_sample_counts: Vec<usize>,
    pub shard_digests: Vec<String>,
    pub episode_count: usize,
    pub sample_count: usize,
    pub env_histogram: BTreeMap<String, usize>,
    pub instruction_vocab: Vec<String>,
    pub chain_length: usize,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = Self::path(root);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

pub fn build_corpus(config: &CorpusConfig) -> Result<CorpusManifest> {
    if config.episodes_per_shard == 0 {
        return Err(Error::Config("episodes_per_shard must be positive".into()));
    }
    let root = &config.root;
    let manifest_path = CorpusManifest::path(root);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let shard_dir = root.join("shards");
    if shard_dir.exists() {
        fs::remove_dir_all(&shard_dir).map_err(|e| Error::io(&shard_dir, e))?;
    }
    fs::create_dir_all(&shard_dir).map_err(|e| Error::io(&shard_dir, e))?;

    let jobs: Vec<(EnvId, usize)> = config
        .episodes
        .iter()
        .flat_map(|(&env, &n)| (0..n).map(move |i| (env, i)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::Config("corpus config requests no episodes".into()));
    }
    let episodes: Vec<AnnotatedEpisode> = jobs
        .par_iter()
        .map(|&(env, i)| {
            annotate_gaze(collect_episode(
                episode_seed(config.seed, env, i),
                env,
                config.chain_length,
            )?)
        })
        .collect::<Result<_>>()?;

    let mut manifest = CorpusManifest {
        format_version: SCHEMA_VERSION,
        shard_paths: Vec::new(),
        shard_sample_counts: Vec::new(),
        shard_digests: Vec::new(),
        episode_count: episodes.len(),
        sample_count: 0,
        env_histogram: BTreeMap::new(),
        instruction_vocab: Vec::new(),
        chain_length: config.chain_length,
        seed: config.seed,
    };
    let mut words = std::collections::BTreeSet::new();
    for e in &episodes {
        *manifest
            .env_histogram
            .entry(e.episode.env_id.name().to_string())
            .or_default() += 1;
        words.extend(
            TextVocab::normalize(&e.episode.instruction)
                .split_whitespace()
                .map(str::to_string),
        );
    }
    manifest.instruction_vocab = words.into_iter().collect();
    for (i, chunk) in episodes.chunks(config.episodes_per_shard).enumerate() {
        let rel = format!("shards/shard-{i:05}.bin");
        let r = write_shard(chunk, &root.join(&rel))?;
        manifest.sample_count += r.samples;
        manifest.shard_sample_counts.push(r.samples);
        manifest.shard_digests.push(r.digest);
        manifest.shard_paths.push(rel);
    }
    let tmp = root.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Read-only view of a built corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(root)?;
        for p in &manifest.shard_paths {
            let full = root.join(p);
            if !full.exists() {
                return Err(Error::Io {
                    path: full,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "shard listed in manifest is missing"),
                });
            }
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn shard_paths(&self) -> impl Iterator<Item = PathBuf> + '_ {
        self.manifest.shard_paths.iter().map(|p| self.root.join(p))
    }

    /// Streams episodes shard by shard.
    pub fn episodes(&self) -> impl Iterator<Item = Result<AnnotatedEpisode>> + '_ {
        self.shard_paths().flat_map(|p| match read_shard(&p) {
            Ok(v) => v.into_iter().map(Ok).collect::<Vec<_>>(),
            Err(e) => vec![Err(e)],
        })
    }

    pub fn load_all(&self) -> Result<Vec<AnnotatedEpisode>> {
        self.episodes().collect()
    }
}

/// Verifies that re-cropping each stored full frame reproduces its stored crop.
pub fn check_pair_integrity(e: &AnnotatedEpisode) -> Result<()> {
    for (i, (f, g)) in e.episode.frames.iter().zip(&e.episode.gaze_boxes).enumerate() {
        if crop_gaze(&f.base, &g.base)? != e.crops[i] {
            return Err(Error::ChecksumMismatch {
                path: PathBuf::new(),
                detail: format!("frame {i}: stored crop differs from re-crop"),
            });
        }
    }
    Ok(())
}

/// Bounding box of an object in the base view, for callers that bring their own detector.
pub fn oracle_box(world: &simworld::WorldState, id: u32) -> Result<BBox> {
    object_bbox(world, id, View::Base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::check_success;

    #[test]
    fn single_subtask_episode() {
        let e = collect_episode(3, EnvId::A, 1).unwrap();
        e.validate().unwrap();
        assert!(e.subtask_index.iter().all(|&i| i == 0));
        assert_eq!(e.subtasks.len(), 1);
        assert_eq!(e, collect_episode(3, EnvId::A, 1).unwrap());
    }

    #[test]
    fn replaying_actions_completes_every_subtask() {
        let e = collect_episode(17, EnvId::C, 5).unwrap();
        let mut w = create_world(17, EnvId::C).unwrap();
        let mut done = vec![false; 5];
        for a in &e.actions {
            w = step(&w, a);
            for (i, s) in e.subtasks.iter().enumerate() {
                if i <= *e.subtask_index.iter().max().unwrap() && check_success(&w, s) {
                    done[i] = true;
                }
            }
        }
        assert!(done.iter().all(|&d| d));
        assert!(e.instruction.contains("; then"));
    }

    #[test]
    fn crop_mean_tracks_box_mean() {
        let e = annotate_gaze(collect_episode(5, EnvId::B, 2).unwrap()).unwrap();
        for (i, f) in e.episode.frames.iter().enumerate() {
            let b = e.episode.gaze_boxes[i].base;
            let full = BBox { x_min: 0, y_min: 0, x_max: 32, y_max: 32 };
            let diff = (e.crops[i].mean_in(&full) - f.base.mean_in(&b)).abs();
            assert!(diff <= 2.0 / 255.0, "frame {i}: {diff}");
        }
        check_pair_integrity(&e).unwrap();
    }

    #[test]
    fn degenerate_box_rejected() {
        let img = Image::new(64, 64, [0, 0, 0]);
        let b = BBox { x_min: 3, y_min: 3, x_max: 4, y_max: 6 };
        assert!(matches!(crop_gaze(&img, &b), Err(Error::DegenerateBox { area: 3 })));
    }

    #[test]
    fn shard_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let eps: Vec<_> = (0..2)
            .map(|s| annotate_gaze(collect_episode(s, EnvId::A, 2).unwrap()).unwrap())
            .collect();
        let p = dir.path().join("s.bin");
        assert!(matches!(write_shard(&[], &p), Err(Error::Precondition(_))));
        write_shard(&eps, &p).unwrap();
        let back = read_shard(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in eps.iter().zip(&back) {
            assert_eq!(a.crops, b.crops);
            assert_eq!(a.episode.frames, b.episode.frames);
            assert_eq!(a.episode.gaze_boxes, b.episode.gaze_boxes);
            assert_eq!(a.episode.instruction, b.episode.instruction);
            for (x, y) in a.episode.actions.iter().zip(&b.episode.actions) {
                assert_eq!(x.to_array().map(|v| v as f32), y.to_array().map(|v| v as f32));
            }
        }
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::ChecksumMismatch { .. })));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 100] ^= 0x40;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::ChecksumMismatch { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        fs::write(&p, &v2).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::SchemaVersionUnsupported { found: 9, .. })));
    }
}
