//! Decoder-only transformer policy: instruction, image patches and an
//! action prefix in one causal sequence.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Block, BlockCache, KvCache, LayerNorm, LayerNormCache, Linear, Module, Param, Scalar};
use crate::raster::Image;
use crate::simworld::ACTION_DIM;
use crate::tokenizers::{ActionCodec, ImageSlot, PatchEmbedder, TextVocab, VocabLayout, ACT_START};

/// Longest instruction the templates produce, counting BOS and EOS.
pub const MAX_INSTRUCTION_TOKENS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub recon_head_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub crop_size: usize,
    /// Reserved PROPRIO segment; must stay off.
    pub proprio: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: VocabLayout::new(&TextVocab::from_templates()).vocab_size,
            max_seq_len: 192,
            dropout: 0.0,
            recon_head_dim: 32,
            image_size: 64,
            patch_size: 8,
            crop_size: 32,
            proprio: false,
        }
    }
}

impl ModelConfig {
    /// Grad-check scale: 16-px views, one layer, at most 24 positions.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_seq_len: 24,
            recon_head_dim: 6,
            image_size: 16,
            patch_size: 8,
            crop_size: 16,
            ..Default::default()
        }
    }

    pub fn view_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn crop_patches(&self) -> usize {
        (self.crop_size / self.patch_size).pow(2)
    }

    /// Rows of `h_R`.
    pub fn image_tokens(&self) -> usize {
        2 * self.view_patches()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.recon_head_dim == 0 {
            return bad("n_layers, ffn_mult and recon_head_dim must be positive".into());
        }
        let layout = VocabLayout::new(&TextVocab::from_templates());
        if self.vocab_size != layout.vocab_size {
            return bad(format!(
                "vocab_size {} disagrees with the shared layout ({})",
                self.vocab_size, layout.vocab_size
            ));
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported; eval and training are both deterministic".into());
        }
        if self.proprio {
            return bad("proprioception segment is reserved and not implemented".into());
        }
        if self.patch_size == 0
            || self.image_size % self.patch_size != 0
            || self.crop_size % self.patch_size != 0
        {
            return bad("image and crop sizes must be multiples of patch_size".into());
        }
        Ok(())
    }

    /// Sequence length for an instruction of `instr` tokens, with or without a
    /// crop segment and `act` action positions.
    pub fn seq_len(&self, instr: usize, crop: bool, act: usize) -> usize {
        instr + self.image_tokens() + if crop { self.crop_patches() } else { 0 } + act
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Instr,
    ImgBase,
    ImgWrist,
    ImgCrop,
    Act,
}

/// Inputs at one step: token ids and patch matrices (`patches × 3·p²`).
#[derive(Debug, Clone)]
pub struct PolicyInput<F: Scalar> {
    pub instruction: Vec<usize>,
    pub base: Array2<F>,
    pub wrist: Array2<F>,
    pub crop: Option<Array2<F>>,
}

impl<F: Scalar> PolicyInput<F> {
    pub fn from_images(
        model: &Backbone<F>,
        instruction: Vec<usize>,
        base: &Image,
        wrist: &Image,
        crop: Option<&Image>,
    ) -> Result<Self> {
        Ok(PolicyInput {
            instruction,
            base: model.patch.patch_matrix(base)?,
            wrist: model.patch.patch_matrix(wrist)?,
            crop: crop.map(|c| model.patch.patch_matrix(c)).transpose()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TokenSequence<F: Scalar> {
    /// `L × d_model`, including absolute positional embeddings.
    pub embeddings: Array2<F>,
    pub segment: Vec<Segment>,
    /// Base and wrist positions; the rows that produce `h_R`.
    pub image_span: Range<usize>,
    pub crop_span: Option<Range<usize>>,
    pub act_span: Range<usize>,
    ids: Vec<(usize, usize)>,
    images: Vec<(ImageSlot, usize, Array2<F>)>,
}

impl<F: Scalar> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }

    pub fn mask(&self, i: usize, j: usize) -> bool {
        j <= i
    }

    pub fn mask_matrix(&self) -> Vec<Vec<bool>> {
        let l = self.len();
        (0..l).map(|i| (0..l).map(|j| self.mask(i, j)).collect()).collect()
    }
}

/// Per layer, per head, `L × L`.
pub type AttnTensor<F> = Vec<Vec<Array2<F>>>;

#[derive(Debug, Clone)]
pub struct BackboneOutput<F: Scalar> {
    /// One row per ACT position; row `i` predicts action token `i`.
    pub action_logits: Array2<F>,
    /// `image_tokens × recon_head_dim`.
    pub h_r: Array2<F>,
    pub attn: Option<AttnTensor<F>>,
}

impl<F: Scalar> BackboneOutput<F> {
    pub fn attention_maps(&self) -> Result<&AttnTensor<F>> {
        self.attn.as_ref().ok_or(Error::AttentionNotRetained)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache<F: Scalar> {
    blocks: Vec<BlockCache<F>>,
    ln_f: LayerNormCache<F>,
    hidden: Array2<F>,
}

impl<F: Scalar> ForwardCache<F> {
    /// Final-layer-norm hidden states at every position.
    pub fn hidden(&self) -> &Array2<F> {
        &self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<F: Scalar> {
    pub config: ModelConfig,
    pub tok_emb: Param<F>,
    pub pos_emb: Param<F>,
    pub patch: PatchEmbedder<F>,
    pub blocks: Vec<Block<F>>,
    pub ln_f: LayerNorm<F>,
    pub lm_head: Linear<F>,
    pub recon_head: Linear<F>,
}

fn check_finite<F: Scalar>(x: &Array2<F>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(what.to_string()))
    }
}

impl<F: Scalar> Backbone<F> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = Param::normal(config.vocab_size, d, 0.02, rng);
        let pos_emb = Param::normal(config.max_seq_len, d, 0.02, rng);
        let patch = PatchEmbedder::new(config.patch_size, config.view_patches(), config.crop_patches(), d, rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(d, config.n_heads, config.ffn_mult, true, config.n_layers, rng))
            .collect();
        let lm_head = Linear::new(d, config.vocab_size, 0.02, rng);
        let recon_head = Linear::new(d, config.recon_head_dim, 0.02, rng);
        Ok(Backbone {
            ln_f: LayerNorm::new(d),
            config,
            tok_emb,
            pos_emb,
            patch,
            blocks,
            lm_head,
            recon_head,
        })
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout::new(&TextVocab::from_templates())
    }

    /// Order: instruction, base, wrist, optional crop, `ACT_START`, prefix.
    pub fn assemble_sequence(&self, input: &PolicyInput<F>, action_prefix: &[usize]) -> Result<TokenSequence<F>> {
        let cfg = &self.config;
        let l = cfg.seq_len(input.instruction.len(), input.crop.is_some(), 1 + action_prefix.len());
        if l > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: l, max: cfg.max_seq_len });
        }
        let d = cfg.d_model;
        let mut emb = Array2::zeros((l, d));
        let mut segment = Vec::with_capacity(l);
        let mut ids = Vec::new();
        let mut images = Vec::new();
        let push_id = |pos: usize, id: usize, emb: &mut Array2<F>, ids: &mut Vec<(usize, usize)>| -> Result<()> {
            if id >= cfg.vocab_size {
                return Err(Error::Precondition(format!("token id {id} outside vocabulary")));
            }
            emb.row_mut(pos).assign(&self.tok_emb.value.row(id));
            ids.push((pos, id));
            Ok(())
        };
        let mut pos = 0;
        for &id in &input.instruction {
            push_id(pos, id, &mut emb, &mut ids)?;
            segment.push(Segment::Instr);
            pos += 1;
        }
        let img_start = pos;
        let mut slots = vec![
            (ImageSlot::Base, Segment::ImgBase, &input.base),
            (ImageSlot::Wrist, Segment::ImgWrist, &input.wrist),
        ];
        if let Some(c) = &input.crop {
            slots.push((ImageSlot::Crop, Segment::ImgCrop, c));
        }
        let mut crop_span = None;
        for (slot, seg, x) in slots {
            let h = self.patch.encode_patches(&x.view(), slot)?;
            let n = h.nrows();
            emb.slice_mut(s![pos..pos + n, ..]).assign(&h);
            images.push((slot, pos, x.clone()));
            if slot == ImageSlot::Crop {
                crop_span = Some(pos..pos + n);
            }
            segment.extend(std::iter::repeat(seg).take(n));
            pos += n;
        }
        let image_span = img_start..img_start + cfg.image_tokens();
        let act_start = pos;
        for &id in std::iter::once(&ACT_START).chain(action_prefix) {
            push_id(pos, id, &mut emb, &mut ids)?;
            segment.push(Segment::Act);
            pos += 1;
        }
        emb += &self.pos_emb.value.slice(s![..l, ..]);
        Ok(TokenSequence {
            embeddings: emb,
            segment,
            image_span,
            crop_span,
            act_span: act_start..l,
            ids,
            images,
        })
    }

    pub fn forward(&self, seq: &TokenSequence<F>, retain_attn: bool) -> Result<(BackboneOutput<F>, ForwardCache<F>)> {
        let mut x = seq.embeddings.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, c) = b.forward(&x.view());
            check_finite(&y, &format!("block {i}"))?;
            x = y;
            caches.push(c);
        }
        let (hidden, ln_f) = self.ln_f.forward(&x.view());
        let action_logits = self.lm_head.forward(&hidden.slice(s![seq.act_span.clone(), ..]));
        let h_r = self.recon_head.forward(&hidden.slice(s![seq.image_span.clone(), ..]));
        check_finite(&action_logits, "action logits")?;
        let attn = retain_attn.then(|| caches.iter().map(|c| c.attn.probs.clone()).collect());
        Ok((
            BackboneOutput { action_logits, h_r, attn },
            ForwardCache { blocks: caches, ln_f, hidden },
        ))
    }

    /// Accumulates parameter gradients from `dL/dlogits` and optionally `dL/dh_R`.
    pub fn backward(
        &mut self,
        seq: &TokenSequence<F>,
        cache: &ForwardCache<F>,
        d_logits: &ArrayView2<F>,
        d_h_r: Option<&ArrayView2<F>>,
    ) {
        let mut dh = Array2::zeros(cache.hidden.raw_dim());
        let act = seq.act_span.clone();
        let da = self
            .lm_head
            .backward(&cache.hidden.slice(s![act.clone(), ..]), d_logits);
        dh.slice_mut(s![act, ..]).assign(&da);
        if let Some(g) = d_h_r {
            let img = seq.image_span.clone();
            let di = self.recon_head.backward(&cache.hidden.slice(s![img.clone(), ..]), g);
            dh.slice_mut(s![img, ..]).assign(&di);
        }
        let mut dx = self.ln_f.backward(&cache.ln_f, &dh.view());
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = b.backward(c, &dx.view());
        }
        let l = seq.len();
        let mut pg = self.pos_emb.grad.slice_mut(s![..l, ..]);
        pg += &dx;
        for &(pos, id) in &seq.ids {
            let mut r = self.tok_emb.grad.row_mut(id);
            r += &dx.row(pos);
        }
        for (slot, start, x) in &seq.images {
            let n = x.nrows();
            self.patch
                .backward(&x.view(), *slot, &dx.slice(s![*start..*start + n, ..]));
        }
    }

    fn decode_step(&self, x: &Array2<F>, kv: &mut [KvCache<F>]) -> Array2<F> {
        let mut h = x.clone();
        for (b, c) in self.blocks.iter().zip(kv.iter_mut()) {
            h = b.forward_cached(&h.view(), c);
        }
        let last = h.slice(s![h.nrows() - 1.., ..]).to_owned();
        let (y, _) = self.ln_f.forward(&last.view());
        self.lm_head.forward(&y.view())
    }

    /// Greedy decode of `n` tokens restricted to the action-id slice.
    pub fn generate(&self, input: &PolicyInput<F>, n: usize) -> Result<Vec<usize>> {
        let seq = self.assemble_sequence(input, &[])?;
        let total = seq.len() + n - 1;
        if total > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: total, max: self.config.max_seq_len });
        }
        let layout = self.layout();
        let lo = layout.action_offset;
        let hi = lo + layout.action_bins;
        let mut kv: Vec<KvCache<F>> = self
            .blocks
            .iter()
            .map(|_| KvCache::new(total, self.config.d_model))
            .collect();
        let mut logits = self.decode_step(&seq.embeddings, &mut kv);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = logits.row(0);
            let mut best = lo;
            for id in lo..hi {
                if row[id] > row[best] {
                    best = id;
                }
            }
            if !row[best].is_finite() {
                return Err(Error::NonFiniteActivation("decode logits".into()));
            }
            out.push(best);
            if i + 1 < n {
                let pos = seq.len() + i;
                let mut e = self.tok_emb.value.slice(s![best..best + 1, ..]).to_owned();
                e += &self.pos_emb.value.slice(s![pos..pos + 1, ..]);
                logits = self.decode_step(&e, &mut kv);
            }
        }
        Ok(out)
    }

    /// Decodes `lead` discarded tokens (CG bbox) followed by the action.
    pub fn predict_actions_with_lead(
        &self,
        input: &PolicyInput<F>,
        lead: usize,
    ) -> Result<(Vec<usize>, crate::simworld::ContinuousAction)> {
        let ids = self.generate(input, lead + ACTION_DIM)?;
        let a = ActionCodec::new(&self.layout()).detokenize(&ids[lead..])?;
        Ok((ids, a))
    }

    pub fn predict_actions(&self, input: &PolicyInput<F>) -> Result<crate::simworld::ContinuousAction> {
        Ok(self.predict_actions_with_lead(input, 0)?.1)
    }

    pub fn cast<G: Scalar>(&self) -> Backbone<G> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = Backbone::<G>::new(self.config.clone(), &mut rng).expect("validated config");
        let mut vals = Vec::new();
        self.visit("", &mut |_, p| vals.push(p.cast::<G>()));
        let mut it = vals.into_iter();
        out.visit_mut("", &mut |_, p| *p = it.next().unwrap());
        out
    }
}

impl<F: Scalar> Module<F> for Backbone<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "tok_emb"), &self.tok_emb);
        f(join(prefix, "pos_emb"), &self.pos_emb);
        self.patch.visit(&join(prefix, "patch"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.lm_head.visit(&join(prefix, "lm_head"), f);
        self.recon_head.visit(&join(prefix, "recon_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "tok_emb"), &mut self.tok_emb);
        f(join(prefix, "pos_emb"), &mut self.pos_emb);
        self.patch.visit_mut(&join(prefix, "patch"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.lm_head.visit_mut(&join(prefix, "lm_head"), f);
        self.recon_head.visit_mut(&join(prefix, "recon_head"), f);
    }
}
