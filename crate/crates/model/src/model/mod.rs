//! The toy multimodal model: visual encoder, causal language model, prompt
//! and memory projections, and a mask decoder that predicts the first frame
//! and propagates forward.

mod decoder;
mod infer;
mod lm;
mod visual;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use pixelrt_core::autograd::{Graph, Var};
use pixelrt_core::mask::FrameSize;
use pixelrt_core::nn::{sinusoidal_positions, Mlp};
use pixelrt_core::params::{Block, Init, ParamStore};
use pixelrt_core::tensor::Matrix;
use pixelrt_core::{Error, Result};

use crate::chat::{RenderedSequence, SlotBinding, SpecialTokens, TURN_SEPARATOR};
use crate::clip::VideoClip;
use crate::prompt::{build_m2l_projector, encode_mask_on_graph, PromptEncoderConfig, SparsePromptEncoder, VisualPrompt};

pub use decoder::{bilinear_matrix, DecoderOutput, DecoderVars, MaskDecoder};
pub use infer::{ObjectOutput, TurnOutput};
pub use lm::{LanguageModel, LmOutput};
pub use visual::{token_grid, VisualEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualEncoderConfig {
    pub patch_size: usize,
    pub d_vis: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            d_vis: 64,
            n_layers: 2,
            n_heads: 4,
            min_tokens: 16,
            max_tokens: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_llm: 128,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 2,
            vocab_size: SpecialTokens::default().vocab_size(),
            max_seq: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_dec: usize,
    /// Side of the square grid the decoder works on.
    pub resolution: usize,
    pub image_patch: usize,
    pub hires_patch: usize,
    pub n_heads: usize,
    /// Decoder tokens produced per `<SEG>`.
    pub token_count: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_dec: 32,
            resolution: 128,
            image_patch: 8,
            hires_patch: 4,
            n_heads: 2,
            token_count: 2,
        }
    }
}

impl DecoderConfig {
    pub fn image_grid(&self) -> usize {
        self.resolution / self.image_patch
    }

    pub fn hires_grid(&self) -> usize {
        self.resolution / self.hires_patch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub visual: VisualEncoderConfig,
    pub lm: LmConfig,
    pub prompt: PromptEncoderConfig,
    pub decoder: DecoderConfig,
    pub max_new_tokens: usize,
    /// Route referring questions through memory pre-filling and injection.
    pub use_memory: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            visual: VisualEncoderConfig::default(),
            lm: LmConfig::default(),
            prompt: PromptEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            max_new_tokens: 256,
            use_memory: true,
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter model for tests and quick smoke runs.
    pub fn tiny() -> Self {
        Self {
            visual: VisualEncoderConfig {
                d_vis: 16,
                n_layers: 1,
                n_heads: 2,
                ..Default::default()
            },
            lm: LmConfig {
                d_llm: 16,
                n_layers: 1,
                n_heads: 2,
                ..Default::default()
            },
            prompt: PromptEncoderConfig {
                n_freq: 8,
                d_pos: 16,
                ..Default::default()
            },
            decoder: DecoderConfig {
                d_dec: 8,
                resolution: 32,
                image_patch: 8,
                hires_patch: 4,
                n_heads: 2,
                token_count: 2,
            },
            max_new_tokens: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.visual;
        if v.min_tokens == 0 || v.max_tokens < v.min_tokens {
            return Err(Error::Config(format!(
                "token bounds [{}, {}] need max >= min >= 1",
                v.min_tokens, v.max_tokens
            )));
        }
        if v.patch_size == 0 || !v.d_vis.is_multiple_of(v.n_heads) || !v.d_vis.is_multiple_of(4) {
            return Err(Error::Config("visual width must divide into heads and be a multiple of 4".into()));
        }
        let l = &self.lm;
        if l.n_heads == 0 || !l.d_llm.is_multiple_of(l.n_heads) {
            return Err(Error::Config(format!(
                "d_llm {} is not divisible by {} heads",
                l.d_llm, l.n_heads
            )));
        }
        if l.vocab_size < SpecialTokens::default().vocab_size() {
            return Err(Error::Config(format!("vocab of {} cannot hold the special tokens", l.vocab_size)));
        }
        let d = &self.decoder;
        if ![1, 2, 4, 8].contains(&d.token_count) {
            return Err(Error::Config(format!("token_count {} not in {{1, 2, 4, 8}}", d.token_count)));
        }
        if d.image_patch == 0
            || d.hires_patch == 0
            || !d.resolution.is_multiple_of(d.image_patch)
            || !d.resolution.is_multiple_of(d.hires_patch)
            || !d.hires_grid().is_multiple_of(d.image_grid())
        {
            return Err(Error::Config("decoder patches must tile the decoder resolution".into()));
        }
        if !d.d_dec.is_multiple_of(d.n_heads) || !d.d_dec.is_multiple_of(4) {
            return Err(Error::Config("d_dec must divide into heads and be a multiple of 4".into()));
        }
        Ok(())
    }
}

/// Frame features that do not depend on the question, computed once per
/// clip at inference time.
#[derive(Clone, Debug)]
pub struct EncodedClip {
    /// Token grid of the language-model path.
    pub grid: FrameSize,
    /// Per frame, `grid.area() × d_vis`.
    pub visual: Vec<Matrix>,
    /// Per frame, decoder image tokens and high-resolution features.
    pub decoder_image: Vec<Matrix>,
    pub decoder_hires: Vec<Matrix>,
}

/// Clip features living on a graph.
#[derive(Clone, Debug)]
pub struct ClipVars {
    pub grid: FrameSize,
    pub frame_size: FrameSize,
    pub visual: Vec<Var>,
    /// All frames' visual tokens mapped to the language-model width.
    pub visual_llm: Var,
    pub decoder_image: Vec<Var>,
    pub decoder_hires: Vec<Var>,
}

impl ClipVars {
    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }

    pub fn visual_tokens(&self) -> usize {
        self.visual.len() * self.grid.area()
    }
}

pub struct PixelModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub tokens: SpecialTokens,
    pub prompt_encoder: SparsePromptEncoder,
    pub m2l: Mlp,
    pub visual: VisualEncoder,
    pub vl_projector: Mlp,
    pub lm: LanguageModel,
    pub l2m: Mlp,
    pub decoder: MaskDecoder,
}

impl PixelModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let d_llm = cfg.lm.d_llm;
        let d_vis = cfg.visual.d_vis;
        let prompt_encoder = SparsePromptEncoder::new(&mut store, &mut init, &cfg.prompt, d_llm)?;
        let m2l = build_m2l_projector(&mut store, &mut init, d_vis, d_llm);
        let visual = VisualEncoder::new(&mut store, &mut init, &cfg.visual);
        let vl_projector = Mlp::new(&mut store, &mut init, "vl", Block::VlProjector, (d_vis, d_llm, d_llm));
        let lm = LanguageModel::new(&mut store, &mut init, &cfg.lm);
        let l2m = Mlp::new(
            &mut store,
            &mut init,
            "l2m",
            Block::L2mProjector,
            (d_llm, d_llm, cfg.decoder.token_count * cfg.decoder.d_dec),
        );
        let decoder = MaskDecoder::new(&mut store, &mut init, &cfg.decoder);
        Ok(Self {
            cfg,
            store,
            tokens: SpecialTokens::default(),
            prompt_encoder,
            m2l,
            visual,
            vl_projector,
            lm,
            l2m,
            decoder,
        })
    }

    /// Runs both image encoders over every frame and keeps the values.
    pub fn encode_clip(&self, clip: &VideoClip) -> Result<EncodedClip> {
        let mut g = Graph::new(&self.store);
        let vars = self.clip_vars(&mut g, clip)?;
        Ok(EncodedClip {
            grid: vars.grid,
            visual: vars.visual.iter().map(|&v| g.value(v).clone()).collect(),
            decoder_image: vars.decoder_image.iter().map(|&v| g.value(v).clone()).collect(),
            decoder_hires: vars.decoder_hires.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Encodes `clip` on the graph so the encoders can be trained.
    pub fn clip_vars(&self, g: &mut Graph, clip: &VideoClip) -> Result<ClipVars> {
        if clip.is_empty() {
            return Err(Error::NoFrame);
        }
        let grid = token_grid(&self.cfg.visual, clip.frame_size())?;
        let mut visual = Vec::with_capacity(clip.len());
        let mut decoder_image = Vec::with_capacity(clip.len());
        let mut decoder_hires = Vec::with_capacity(clip.len());
        for t in 0..clip.len() {
            visual.push(self.visual.encode_frame(g, clip, t, grid));
            let (img, hi) = self.decoder.encode_frame(g, clip, t);
            decoder_image.push(img);
            decoder_hires.push(hi);
        }
        Ok(self.finish_clip_vars(g, grid, clip.frame_size(), visual, decoder_image, decoder_hires))
    }

    /// Puts cached features on a graph as constants.
    pub fn constant_clip_vars(&self, g: &mut Graph, enc: &EncodedClip, frame_size: FrameSize) -> ClipVars {
        let visual = enc.visual.iter().map(|m| g.constant(m.clone())).collect();
        let image = enc.decoder_image.iter().map(|m| g.constant(m.clone())).collect();
        let hires = enc.decoder_hires.iter().map(|m| g.constant(m.clone())).collect();
        self.finish_clip_vars(g, enc.grid, frame_size, visual, image, hires)
    }

    fn finish_clip_vars(
        &self,
        g: &mut Graph,
        grid: FrameSize,
        frame_size: FrameSize,
        visual: Vec<Var>,
        decoder_image: Vec<Var>,
        decoder_hires: Vec<Var>,
    ) -> ClipVars {
        let all = if visual.len() == 1 {
            visual[0]
        } else {
            g.concat_rows(&visual)
        };
        let visual_llm = self.vl_projector.forward(g, all);
        ClipVars {
            grid,
            frame_size,
            visual,
            visual_llm,
            decoder_image,
            decoder_hires,
        }
    }

    /// One `1 × d_llm` token per visual prompt.
    pub fn encode_prompt(&self, g: &mut Graph, clip: &ClipVars, prompt: &VisualPrompt) -> Result<Var> {
        let n = clip.len();
        match prompt {
            VisualPrompt::Point(p) => self.prompt_encoder.encode_point(g, p, n),
            VisualPrompt::Box(b) => self.prompt_encoder.encode_box(g, b, n),
            VisualPrompt::Mask(m) => {
                let f = *clip
                    .visual
                    .get(m.t)
                    .ok_or_else(|| Error::Range(format!("mask prompt frame {} outside clip of {n}", m.t)))?;
                encode_mask_on_graph(g, &m.mask, f, clip.grid, &self.m2l)
            }
        }
    }

    /// Projects a pooled visual feature into the language-model width.
    pub fn project_memory(&self, pooled: &[f64]) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(Matrix::row_vector(pooled.to_vec()));
        let y = self.m2l.forward(&mut g, x);
        g.value(y).clone().into_vec()
    }

    /// `[visual tokens | prompt | separator | answer]` embedded, with the
    /// rows named in `substitutions` (text positions) replaced, plus fixed
    /// positional encodings. Returns the input and the text offset.
    pub fn embed_turn(
        &self,
        g: &mut Graph,
        clip: &ClipVars,
        text: &[u32],
        substitutions: &BTreeMap<usize, Var>,
    ) -> Result<Var> {
        let table = g.param(self.lm.embed);
        let mut parts = vec![clip.visual_llm];
        let mut start = 0;
        for (&pos, &row) in substitutions {
            if pos > start {
                parts.push(g.gather_rows(table, text[start..pos].iter().map(|&i| i as usize).collect()));
            }
            parts.push(row);
            start = pos + 1;
        }
        if start < text.len() {
            parts.push(g.gather_rows(table, text[start..].iter().map(|&i| i as usize).collect()));
        }
        let x = g.concat_rows(&parts);
        let n = g.shape(x).0;
        if n > self.cfg.lm.max_seq {
            return Err(Error::SequenceLength {
                len: n,
                max: self.cfg.lm.max_seq,
            });
        }
        let pos = g.constant(sinusoidal_positions(n, self.cfg.lm.d_llm));
        Ok(g.add(x, pos))
    }

    /// Replacement rows for the `<REF>` slots of `seq`.
    pub fn ref_rows(
        &self,
        g: &mut Graph,
        clip: &ClipVars,
        seq: &RenderedSequence,
        prompts: &[VisualPrompt],
    ) -> Result<BTreeMap<usize, Var>> {
        let mut rows = BTreeMap::new();
        for slot in &seq.slots {
            if let SlotBinding::Ref { prompt_index } = slot.binding {
                let p = prompts.get(prompt_index).ok_or_else(|| {
                    Error::Precondition(format!("<REF> slot bound to missing prompt {prompt_index}"))
                })?;
                rows.insert(slot.position, self.encode_prompt(g, clip, p)?);
            }
        }
        Ok(rows)
    }

    /// `<SEG>` hidden state to `token_count × d_dec` decoder tokens.
    pub fn seg_to_decoder_tokens(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let (rows, cols) = g.shape(hidden);
        if rows != 1 || cols != self.cfg.lm.d_llm {
            return Err(Error::Config(format!(
                "hidden state is {rows}x{cols}, expected 1x{}",
                self.cfg.lm.d_llm
            )));
        }
        let y = self.l2m.forward(g, hidden);
        let want = self.cfg.decoder.token_count * self.cfg.decoder.d_dec;
        if g.shape(y).1 != want {
            return Err(Error::Config(format!(
                "projector width {} does not split into {} tokens of {}",
                g.shape(y).1,
                self.cfg.decoder.token_count,
                self.cfg.decoder.d_dec
            )));
        }
        Ok(g.reshape(y, self.cfg.decoder.token_count, self.cfg.decoder.d_dec))
    }

    pub fn decode_mask(&self, g: &mut Graph, seg_tokens: Var, clip: &ClipVars) -> Result<DecoderVars> {
        self.decoder.forward(g, seg_tokens, &clip.decoder_image, &clip.decoder_hires)
    }

    pub fn lm_forward(&self, g: &mut Graph, inputs: Var) -> Result<LmOutput> {
        self.lm.forward(g, inputs)
    }
}

/// Token ids of `prompt`, the turn separator and `answer`, and the offset of
/// the answer in that sequence.
pub fn join_turn(prompt: &RenderedSequence, answer: &RenderedSequence) -> (RenderedSequence, usize) {
    let mut seq = prompt.clone();
    seq.push_text(TURN_SEPARATOR);
    let offset = seq.len();
    seq.append(answer);
    (seq, offset)
}
