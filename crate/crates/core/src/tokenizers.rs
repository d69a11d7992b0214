//! Text vocabulary, action binning, the learned patch embedder and the
//! frozen PCA scene codec that produces reconstruction targets.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::error::{Error, Result};
use crate::nn::{join, sc, Linear, Module, Param, Scalar};
use crate::raster::Image;
use crate::simworld::{Color, ContinuousAction, Kind, ACTION_DIM};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const ACT_START: usize = 3;
pub const N_SPECIAL: usize = 4;
pub const ACTION_BINS: usize = 256;

/// Word-level vocabulary over the instruction templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextVocab {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let words: Vec<String> = words.into_iter().collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), N_SPECIAL + i))
            .collect();
        TextVocab { words, index }
    }

    /// Every word any instruction template can produce, in a fixed order.
    pub fn from_templates() -> Self {
        let mut words: Vec<String> = ["put", "the", "into", "stack", "on", "flip", ";", "then"]
            .iter()
            .map(|w| w.to_string())
            .collect();
        words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        words.extend([Kind::Block, Kind::Bowl, Kind::Cup].iter().map(|k| k.name().to_string()));
        Self::from_words(words)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Number of text ids including the specials.
    pub fn len(&self) -> usize {
        N_SPECIAL + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Lower-cases, splits `;` into its own word and collapses whitespace.
    pub fn normalize(text: &str) -> String {
        text.to_lowercase()
            .replace(';', " ; ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let norm = Self::normalize(text);
        let mut ids = vec![BOS];
        for w in norm.split_whitespace() {
            ids.push(
                *self
                    .index
                    .get(w)
                    .ok_or_else(|| Error::UnknownWord(w.to_string()))?,
            );
        }
        ids.push(EOS);
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= N_SPECIAL && i < self.len())
            .map(|&i| self.words[i - N_SPECIAL].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

}

/// Shared id space: specials, words, then action bins. The single source of
/// truth for `vocab_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_text: usize,
    pub action_offset: usize,
    pub action_bins: usize,
    pub vocab_size: usize,
}

impl VocabLayout {
    pub fn new(text: &TextVocab) -> Self {
        let n_text = text.len();
        VocabLayout {
            n_text,
            action_offset: n_text,
            action_bins: ACTION_BINS,
            vocab_size: n_text + ACTION_BINS,
        }
    }

    pub fn is_action(&self, id: usize) -> bool {
        (self.action_offset..self.action_offset + self.action_bins).contains(&id)
    }
}

/// Uniform per-dimension binning of [-1, 1] into token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCodec {
    pub bins: usize,
    pub offset: usize,
}

impl ActionCodec {
    pub fn new(layout: &VocabLayout) -> Self {
        ActionCodec {
            bins: layout.action_bins,
            offset: layout.action_offset,
        }
    }

    pub fn bin(&self, a: f64) -> Result<usize> {
        if !(a.abs() <= 1.0 + 1e-9) {
            return Err(Error::OutOfRange { value: a });
        }
        let b = ((a + 1.0) / 2.0 * self.bins as f64).floor();
        Ok((b.max(0.0) as usize).min(self.bins - 1))
    }

    pub fn center(&self, bin: usize) -> f64 {
        -1.0 + (bin as f64 + 0.5) * 2.0 / self.bins as f64
    }

    pub fn tokenize(&self, a: &ContinuousAction) -> Result<[usize; ACTION_DIM]> {
        let v = a.to_array();
        let mut out = [0; ACTION_DIM];
        for (o, x) in out.iter_mut().zip(v) {
            *o = self.offset + self.bin(x)?;
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<ContinuousAction> {
        if ids.len() != ACTION_DIM {
            return Err(Error::ShapeMismatch {
                expected: format!("{ACTION_DIM} action tokens"),
                got: ids.len().to_string(),
            });
        }
        let mut a = [0.0; ACTION_DIM];
        for (o, &id) in a.iter_mut().zip(ids) {
            if !(self.offset..self.offset + self.bins).contains(&id) {
                return Err(Error::Precondition(format!("token {id} is not an action token")));
            }
            *o = self.center(id - self.offset);
        }
        Ok(ContinuousAction::from_array(a))
    }

    /// Token for a coordinate in [0, 1] (same bins, mapped from [0, 1]).
    pub fn tokenize_unit(&self, x: f64) -> Result<usize> {
        Ok(self.offset + self.bin(x.clamp(0.0, 1.0) * 2.0 - 1.0)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSlot {
    Base,
    Wrist,
    /// Explicit gaze crop fed as an extra image segment.
    Crop,
}

impl ImageSlot {
    pub const ALL: [ImageSlot; 3] = [ImageSlot::Base, ImageSlot::Wrist, ImageSlot::Crop];

    fn index(self) -> usize {
        self as usize
    }
}

/// Amplitude of the 2-D sin/cos initialisation of the positional tables.
pub const POS_INIT_SCALE: f64 = 0.1;
/// Large enough that base and wrist patches at the same grid cell start apart.
pub const TAG_INIT_STD: f64 = 0.1;

/// Row-major `n × d` table for a square grid: the first half of the columns
/// encodes the patch row, the second half the column, in sin/cos pairs.
pub fn sincos_2d<F: Scalar>(n: usize, d: usize) -> Array2<F> {
    let side = (n as f64).sqrt().round() as usize;
    let half = d / 2;
    let pairs = (half / 2).max(1);
    Array2::from_shape_fn((n, d), |(i, c)| {
        let (coord, c) = if c < half { (i / side.max(1), c) } else { (i % side.max(1), c - half) };
        let freq = 1.0 / 100f64.powf((c / 2) as f64 / pairs as f64);
        let a = coord as f64 * freq;
        sc::<F>(POS_INIT_SCALE * if c % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Learned vision encoder: 8-px patches → linear projection + per-slot 2-D
/// positional table + slot tag.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder<F: Scalar> {
    pub patch: usize,
    pub proj: Linear<F>,
    /// Positional table per slot (`patches × d`).
    pub pos: Vec<Param<F>>,
    /// One row per slot.
    pub tag: Param<F>,
}

impl<F: Scalar> PatchEmbedder<F> {
    pub fn new(patch: usize, view_patches: usize, crop_patches: usize, d: usize, rng: &mut impl Rng) -> Self {
        let dim = patch * patch * 3;
        PatchEmbedder {
            patch,
            proj: Linear::new(dim, d, 0.02, rng),
            pos: vec![
                Param::new(sincos_2d(view_patches, d)),
                Param::new(sincos_2d(view_patches, d)),
                Param::new(sincos_2d(crop_patches, d)),
            ],
            tag: Param::normal(ImageSlot::ALL.len(), d, TAG_INIT_STD, rng),
        }
    }

    pub fn patch_matrix(&self, img: &Image) -> Result<Array2<F>> {
        let p = img.patches(self.patch)?;
        let dim = self.patch * self.patch * 3;
        Ok(Array2::from_shape_fn((p.len(), dim), |(r, c)| sc::<F>(p[r][c])))
    }

    /// `h_I`: one row per patch, row-major over the raster.
    pub fn encode(&self, img: &Image, slot: ImageSlot) -> Result<Array2<F>> {
        let x = self.patch_matrix(img)?;
        self.encode_patches(&x.view(), slot)
    }

    pub fn encode_patches(&self, x: &ArrayView2<F>, slot: ImageSlot) -> Result<Array2<F>> {
        let pos = &self.pos[slot.index()].value;
        if x.nrows() != pos.nrows() || x.ncols() != self.proj.w.value.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x {}", pos.nrows(), self.proj.w.value.nrows()),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        let mut h = self.proj.forward(x);
        h += pos;
        h += &self.tag.value.row(slot.index());
        Ok(h)
    }

    pub fn backward(&mut self, x: &ArrayView2<F>, slot: ImageSlot, dh: &ArrayView2<F>) {
        self.proj.accumulate(x, dh);
        self.pos[slot.index()].grad += dh;
        let mut tg = self.tag.grad.row_mut(slot.index());
        for row in dh.rows() {
            tg += &row;
        }
    }
}

impl<F: Scalar> Module<F> for PatchEmbedder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        for (slot, p) in ImageSlot::ALL.iter().zip(&self.pos) {
            f(join(prefix, &format!("pos_{}", slot_name(*slot))), p);
        }
        f(join(prefix, "tag"), &self.tag);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        for (slot, p) in ImageSlot::ALL.iter().zip(self.pos.iter_mut()) {
            f(join(prefix, &format!("pos_{}", slot_name(*slot))), p);
        }
        f(join(prefix, "tag"), &mut self.tag);
    }
}

fn slot_name(s: ImageSlot) -> &'static str {
    match s {
        ImageSlot::Base => "base",
        ImageSlot::Wrist => "wrist",
        ImageSlot::Crop => "crop",
    }
}

pub const SCENE_MIN_PATCHES: usize = 10_000;

/// Frozen linear patch codec fitted by principal component analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTokenizer {
    pub patch_size: usize,
    pub k: usize,
    /// Patch-space mean, length `3·patch²`.
    pub mean: Vec<f64>,
    /// Orthonormal columns, `3·patch² × k`, ordered by decreasing variance.
    pub components: Array2<f64>,
}

impl SceneTokenizer {
    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Fits mean and top-`k` principal directions of `patches` (rows in [0, 1]).
    pub fn fit(patches: &[Vec<f64>], patch_size: usize, k: usize) -> Result<Self> {
        let dim = patch_size * patch_size * 3;
        if k == 0 || k > dim {
            return Err(Error::Precondition(format!("k must lie in 1..={dim}, got {k}")));
        }
        if patches.is_empty() || patches.iter().any(|p| p.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("non-empty patches of length {dim}"),
                got: format!("{} patches", patches.len()),
            });
        }
        let n = patches.len();
        let mut mean = vec![0.0; dim];
        for p in patches {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = Array2::from_shape_fn((n, dim), |(r, c)| patches[r][c] - mean[c]);
        let cov = centered.t().dot(&centered) / n as f64;
        let trace: f64 = (0..dim).map(|i| cov[[i, i]]).sum();
        if trace <= 1e-12 {
            return Err(Error::DegenerateCovariance);
        }
        let eig = SymmetricEigen::new(DMatrix::from_fn(dim, dim, |r, c| cov[[r, c]]));
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Array2::zeros((dim, k));
        for (j, &col) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(col);
            // sign convention: largest-magnitude entry positive
            let (imax, _) = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, &x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
            let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..dim {
                components[[i, j]] = sign * v[i];
            }
        }
        Ok(SceneTokenizer {
            patch_size,
            k,
            mean,
            components,
        })
    }

    pub fn encode_patches(&self, patches: &[Vec<f64>]) -> Array2<f64> {
        let dim = self.dim();
        let x = Array2::from_shape_fn((patches.len(), dim), |(r, c)| patches[r][c] - self.mean[c]);
        x.dot(&self.components)
    }

    pub fn decode_patches(&self, z: &ArrayView2<f64>) -> Vec<Vec<f64>> {
        let x = z.dot(&self.components.t());
        x.rows()
            .into_iter()
            .map(|r| r.iter().zip(&self.mean).map(|(v, m)| v + m).collect())
            .collect()
    }

    /// `z₀`: one row of `k` latents per patch.
    pub fn encode(&self, img: &Image) -> Result<Array2<f64>> {
        Ok(self.encode_patches(&img.patches(self.patch_size)?))
    }

    pub fn decode(&self, z: &ArrayView2<f64>, width: usize, height: usize) -> Result<Image> {
        let n = (width / self.patch_size) * (height / self.patch_size);
        if z.nrows() != n || z.ncols() != self.k {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} x {}", self.k),
                got: format!("{} x {}", z.nrows(), z.ncols()),
            });
        }
        Ok(Image::from_patches(&self.decode_patches(z), self.patch_size, width, height))
    }

    fn payload(&self) -> Vec<u8> {
        let comps: Vec<f32> = self.components.iter().map(|&v| v as f32).collect();
        container::f32_bytes(self.mean.iter().map(|&v| v as f32).chain(comps))
    }

    /// SHA-256 of the stored float payload; identical before and after training.
    pub fn digest(&self) -> String {
        container::sha256_hex(&self.payload())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let header = json!({
            "kind": "scene_tokenizer",
            "k": self.k,
            "patch_size": self.patch_size,
            "dim": self.dim(),
        });
        container::write(path, header, &self.payload())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload) = container::read(path)?;
        let get = |key: &str| {
            h[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("tokenizer header lacks {key}")))
        };
        let (k, patch_size, dim) = (get("k")?, get("patch_size")?, get("dim")?);
        let vals = container::read_f32s(&payload);
        if vals.len() != dim + dim * k {
            return Err(Error::DigestMismatch {
                path: path.to_path_buf(),
                detail: "payload size disagrees with header shape".into(),
            });
        }
        let mean = vals[..dim].iter().map(|&v| v as f64).collect();
        let components =
            Array2::from_shape_fn((dim, k), |(r, c)| vals[dim + r * k + c] as f64);
        Ok(SceneTokenizer {
            patch_size,
            k,
            mean,
            components,
        })
    }

    /// Rounds the parameters through their stored precision so the in-memory
    /// codec equals what `load` would return.
    pub fn quantized(&self) -> Self {
        SceneTokenizer {
            mean: self.mean.iter().map(|&v| v as f32 as f64).collect(),
            components: self.components.mapv(|v| v as f32 as f64),
            ..self.clone()
        }
    }
}

/// Fits the scene codec on every gaze crop in a built corpus.
pub fn fit_scene_tokenizer(corpus: &crate::datapipe::Corpus, patch_size: usize, k: usize) -> Result<SceneTokenizer> {
    let mut patches = Vec::new();
    for ep in corpus.episodes() {
        for crop in &ep?.crops {
            patches.extend(crop.patches(patch_size)?);
        }
    }
    if patches.len() < SCENE_MIN_PATCHES {
        return Err(Error::Precondition(format!(
            "corpus yields {} gaze patches, need at least {SCENE_MIN_PATCHES}",
            patches.len()
        )));
    }
    SceneTokenizer::fit(&patches, patch_size, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codec() -> ActionCodec {
        ActionCodec::new(&VocabLayout::new(&TextVocab::from_templates()))
    }

    #[test]
    fn text_roundtrip_and_specials() {
        let v = TextVocab::from_templates();
        assert_eq!(v.tokenize("").unwrap(), vec![BOS, EOS]);
        let s = "put the red block into the blue bowl; then flip the pink cup";
        let ids = v.tokenize(s).unwrap();
        assert_eq!(v.detokenize(&ids), TextVocab::normalize(s));
        assert_ne!(ids, v.tokenize("put the red block into the green bowl").unwrap());
        assert!(matches!(v.tokenize("grab it"), Err(Error::UnknownWord(w)) if w == "grab"));
        assert!(ids.iter().all(|&i| i < v.len()));
    }

    #[test]
    fn layout_ranges_are_disjoint() {
        let v = TextVocab::from_templates();
        let l = VocabLayout::new(&v);
        assert_eq!(l.vocab_size, v.len() + 256);
        assert!(!l.is_action(v.len() - 1));
        assert!(l.is_action(l.action_offset));
        assert!(!l.is_action(l.vocab_size));
    }

    #[test]
    fn action_bins() {
        let c = codec();
        assert_eq!(c.bin(-1.0).unwrap(), 0);
        assert_eq!(c.bin(1.0).unwrap(), 255);
        // floor((0.37 + 1) / 2 * 256) = floor(175.36)
        assert_eq!(c.bin(0.37).unwrap(), 175);
        assert!(matches!(c.bin(1.01), Err(Error::OutOfRange { .. })));
        assert!(c.bin(1.0 + 1e-10).is_ok());
        let a = ContinuousAction::from_array([0.37, -0.2, 1.0, -1.0]);
        let ids = c.tokenize(&a).unwrap();
        let back = c.detokenize(&ids).unwrap();
        for (x, y) in a.to_array().iter().zip(back.to_array()) {
            assert!((x - y).abs() <= 1.0 / 256.0);
        }
        assert_eq!(c.tokenize(&back).unwrap(), ids);
        for b in 0..256 {
            assert_eq!(c.bin(c.center(b)).unwrap(), b);
        }
    }

    #[test]
    fn patch_embedder_rows_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pe = PatchEmbedder::<f64>::new(8, 64, 16, 12, &mut rng);
        pe.proj = Linear::zeros(192, 12);
        let h = pe.encode(&Image::new(64, 64, [0, 0, 0]), ImageSlot::Wrist).unwrap();
        assert_eq!(h.nrows(), 64);
        for r in 0..64 {
            let want = &pe.pos[1].value.row(r) + &pe.tag.value.row(1);
            assert_eq!(h.row(r), want);
        }
        assert!(matches!(
            pe.encode(&Image::new(32, 32, [0, 0, 0]), ImageSlot::Base),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn patch_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pe = PatchEmbedder::<f64>::new(8, 64, 16, 12, &mut rng);
        pe.pos.iter_mut().for_each(|p| p.value.fill(0.0));
        let mut img = Image::new(64, 64, [0, 0, 0]);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 31 % 253) as u8;
        }
        // swap patch (0,0) with patch (row 2, col 5)
        let mut sw = img.clone();
        for y in 0..8 {
            for x in 0..8 {
                let a = img.get(x, y);
                let b = img.get(40 + x, 16 + y);
                sw.put(x, y, b);
                sw.put(40 + x, 16 + y, a);
            }
        }
        let h = pe.encode(&img, ImageSlot::Base).unwrap();
        let hs = pe.encode(&sw, ImageSlot::Base).unwrap();
        assert_eq!(h.row(0), hs.row(2 * 8 + 5));
        assert_eq!(h.row(21), hs.row(0));
        assert_eq!(h.row(7), hs.row(7));
    }

    fn random_patches(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn scene_tokenizer_basic_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            SceneTokenizer::fit(&vec![vec![0.5; 192]; 50], 8, 4),
            Err(Error::DegenerateCovariance)
        ));
        let pts = random_patches(400, 192, &mut rng);
        let t = SceneTokenizer::fit(&pts, 8, 32).unwrap();
        let gram = t.components.t().dot(&t.components);
        for i in 0..32 {
            for j in 0..32 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-6);
            }
        }
        let z = t.encode_patches(&[t.mean.clone()]);
        assert!(z.iter().all(|v| v.abs() < 1e-12));
        for p in pts.iter().take(20) {
            let z = t.encode_patches(std::slice::from_ref(p));
            let cn: f64 = p.iter().zip(&t.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let zn: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(zn <= cn + 1e-12);
            let recon = t.decode_patches(&z.view());
            let z2 = t.encode_patches(&recon);
            let back = t.decode_patches(&z2.view());
            for (a, b) in recon[0].iter().zip(&back[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_rank_codec_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut crops = Vec::new();
        for _ in 0..10 {
            let mut img = Image::new(32, 32, [0, 0, 0]);
            for b in img.data.iter_mut() {
                *b = rng.gen();
            }
            crops.push(img);
        }
        let patches: Vec<Vec<f64>> = crops.iter().flat_map(|c| c.patches(8).unwrap()).collect();
        let t = SceneTokenizer::fit(&patches, 8, 192).unwrap();
        for c in &crops {
            let z = t.encode(c).unwrap();
            assert_eq!(z.dim(), (16, 192));
            assert_eq!(&t.decode(&z.view(), 32, 32).unwrap(), c);
        }
    }

    #[test]
    fn save_load_preserves_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = SceneTokenizer::fit(&random_patches(300, 192, &mut rng), 8, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok.bin");
        let d = t.save(&p).unwrap();
        assert_eq!(d, t.digest());
        let l = SceneTokenizer::load(&p).unwrap();
        assert_eq!(l, t.quantized());
        assert_eq!(l.digest(), d);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(SceneTokenizer::load(&p), Err(Error::DigestMismatch { .. })));
    }
}
