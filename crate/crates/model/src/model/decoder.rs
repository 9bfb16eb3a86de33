//! Two-way attention mask decoder with forward propagation.
//!
//! Frame 0 is decoded from the `<SEG>` tokens alone. Every later frame first
//! attends to the previous frame's features tagged with the previous frame's
//! binarized prediction, then runs the same token/image decoder.

use pixelrt_core::autograd::{Graph, Var};
use pixelrt_core::mask::{downsample_mask, BinaryMask, FrameSize, SpatioTemporalMask};
use pixelrt_core::nn::{Attention, LayerNorm, Linear, Mlp};
use pixelrt_core::params::{Block, Init, ParamId, ParamStore};
use pixelrt_core::tensor::{matmul, Matrix};
use pixelrt_core::{Error, Result};

use super::visual::{grid_positions, patchify};
use super::DecoderConfig;
use crate::clip::VideoClip;

/// Linear interpolation weights from `inp` samples to `out` samples with
/// half-pixel centers and edge clamping, as an `out × inp` matrix.
pub fn bilinear_matrix(out: usize, inp: usize) -> Matrix {
    let mut m = Matrix::zeros(out, inp);
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let w = src - i0 as f64;
        m.set(i, i0, m.get(i, i0) + 1.0 - w);
        m.set(i, i1, m.get(i, i1) + w);
    }
    m
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    pub image_in: Linear,
    pub image_out: Linear,
    pub hires_in: Linear,
    pub mask_token: ParamId,
    pub mask_embed: ParamId,
    pub prop_attn: Attention,
    pub prop_ln: LayerNorm,
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub token_to_image: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub ln3: LayerNorm,
    pub image_to_token: Attention,
    pub ln4: LayerNorm,
    pub final_attn: Attention,
    pub ln5: LayerNorm,
    pub hyper: Mlp,
    pub objectness_head: Linear,
    pub iou_head: Linear,
    up_index: Vec<usize>,
    positions: Matrix,
}

/// Decoder results still attached to the graph.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    /// Per frame, a `hires_grid × hires_grid` logit grid.
    pub logits: Vec<Var>,
    /// `frames × 1`.
    pub objectness_logits: Var,
    pub objectness: Var,
    /// `1 × 1`.
    pub iou_pred: Var,
}

/// Decoder predictions for one object over a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    /// Per frame, logits at the decoder resolution.
    pub mask_logits: Vec<Matrix>,
    /// Per frame, the coarse grid the logits are interpolated from.
    pub low_res: Vec<Matrix>,
    pub iou_pred: f64,
    pub objectness: Vec<f64>,
}

impl DecoderOutput {
    /// Binarized masks at `frame_size`. Frames whose objectness is below
    /// one half are left empty.
    pub fn to_mask(&self, frame_size: FrameSize) -> Result<SpatioTemporalMask> {
        let n = self.low_res.len();
        let mut out = SpatioTemporalMask::new(n, frame_size);
        let Some(first) = self.low_res.first() else {
            return Ok(out);
        };
        let uh = bilinear_matrix(frame_size.height, first.rows());
        let uw = bilinear_matrix(frame_size.width, first.cols());
        for (t, l) in self.low_res.iter().enumerate() {
            if self.objectness[t] < 0.5 {
                continue;
            }
            let up = matmul(&matmul(&uh, false, l, false), false, &uw, true);
            out.insert(t, BinaryMask::from_logits(frame_size, up.data())?)?;
        }
        Ok(out)
    }
}

impl DecoderVars {
    pub fn output(&self, g: &Graph, resolution: usize) -> DecoderOutput {
        let low_res: Vec<Matrix> = self.logits.iter().map(|&v| g.value(v).clone()).collect();
        let u = bilinear_matrix(resolution, low_res.first().map_or(1, |m| m.rows()));
        let mask_logits = low_res
            .iter()
            .map(|l| matmul(&matmul(&u, false, l, false), false, &u, true))
            .collect();
        DecoderOutput {
            mask_logits,
            low_res,
            iou_pred: g.scalar(self.iou_pred),
            objectness: g.value(self.objectness).data().to_vec(),
        }
    }
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &DecoderConfig) -> Self {
        let b = Block::MaskDecoder;
        let d = cfg.d_dec;
        let h = cfg.n_heads;
        let ip = cfg.image_patch;
        let hp = cfg.hires_patch;
        let (ig, hg) = (cfg.image_grid(), cfg.hires_grid());
        let ratio = hg / ig;
        let up_index = (0..hg * hg)
            .map(|i| (i / hg / ratio) * ig + (i % hg) / ratio)
            .collect();
        let attn = |store: &mut ParamStore, init: &mut Init, name: &str| {
            Attention::new(store, init, &format!("decoder.{name}"), b, d, h)
        };
        let ln = |store: &mut ParamStore, name: &str| LayerNorm::new(store, &format!("decoder.{name}"), b, d);
        Self {
            cfg: cfg.clone(),
            image_in: Linear::new(store, init, "decoder.image_in", b, ip * ip * 3, d),
            image_out: Linear::new(store, init, "decoder.image_out", b, d, d),
            hires_in: Linear::new(store, init, "decoder.hires_in", b, hp * hp * 3, d),
            mask_token: store.insert("decoder.mask_token", b, init.normal(1, d, 1.0)),
            mask_embed: store.insert("decoder.mask_embed", b, init.normal(1, d, 1.0)),
            prop_attn: attn(store, init, "prop_attn"),
            prop_ln: ln(store, "prop_ln"),
            self_attn: attn(store, init, "self_attn"),
            ln1: ln(store, "ln1"),
            token_to_image: attn(store, init, "token_to_image"),
            ln2: ln(store, "ln2"),
            mlp: Mlp::new(store, init, "decoder.mlp", b, (d, 2 * d, d)),
            ln3: ln(store, "ln3"),
            image_to_token: attn(store, init, "image_to_token"),
            ln4: ln(store, "ln4"),
            final_attn: attn(store, init, "final_attn"),
            ln5: ln(store, "ln5"),
            hyper: Mlp::new(store, init, "decoder.hyper", b, (d, d, d)),
            objectness_head: Linear::new(store, init, "decoder.objectness", b, d, 1),
            iou_head: Linear::new(store, init, "decoder.iou", b, d, 1),
            up_index,
            positions: grid_positions(FrameSize::new(ig, ig).expect("non-empty grid"), d),
        }
    }

    /// Image tokens and high-resolution features for frame `t`.
    pub fn encode_frame(&self, g: &mut Graph, clip: &VideoClip, t: usize) -> (Var, Var) {
        let (ig, hg) = (self.cfg.image_grid(), self.cfg.hires_grid());
        let grid = FrameSize::new(ig, ig).expect("non-empty grid");
        let patches = g.constant(patchify(clip, t, grid, self.cfg.image_patch));
        let x = self.image_in.forward(g, patches);
        let x = g.gelu(x);
        let image = self.image_out.forward(g, x);
        let grid = FrameSize::new(hg, hg).expect("non-empty grid");
        let patches = g.constant(patchify(clip, t, grid, self.cfg.hires_patch));
        let hires = self.hires_in.forward(g, patches);
        (image, hires)
    }

    fn two_way(&self, g: &mut Graph, tokens: Var, image: Var, pos: Var) -> (Var, Var) {
        let a = self.self_attn.forward(g, tokens, tokens, tokens, None);
        let t = g.add(tokens, a);
        let t = self.ln1.forward(g, t);
        let ipos = g.add(image, pos);
        let a = self.token_to_image.forward(g, t, ipos, image, None);
        let t = g.add(t, a);
        let t = self.ln2.forward(g, t);
        let m = self.mlp.forward(g, t);
        let t = g.add(t, m);
        let t = self.ln3.forward(g, t);
        let a = self.image_to_token.forward(g, ipos, t, t, None);
        let e = g.add(image, a);
        let e = self.ln4.forward(g, e);
        let epos = g.add(e, pos);
        let a = self.final_attn.forward(g, t, epos, e, None);
        let t = g.add(t, a);
        (self.ln5.forward(g, t), e)
    }

    /// Binarized previous-frame prediction on the image grid, as a column.
    fn previous_mask(&self, g: &mut Graph, logits: Var) -> Result<Matrix> {
        let hg = self.cfg.hires_grid();
        let ig = self.cfg.image_grid();
        let hi = FrameSize::new(hg, hg)?;
        let mask = BinaryMask::from_logits(hi, g.value(logits).data())?;
        let small = downsample_mask(&mask, FrameSize::new(ig, ig)?)?;
        Ok(g.pin(Matrix::column_vector(small.to_f64())))
    }

    pub fn forward(&self, g: &mut Graph, seg_tokens: Var, images: &[Var], hires: &[Var]) -> Result<DecoderVars> {
        if images.is_empty() {
            return Err(Error::NoFrame);
        }
        if g.shape(seg_tokens).1 != self.cfg.d_dec {
            return Err(Error::Config(format!(
                "decoder tokens are {} wide, decoder expects {}",
                g.shape(seg_tokens).1,
                self.cfg.d_dec
            )));
        }
        let hg = self.cfg.hires_grid();
        let mask_token = g.param(self.mask_token);
        let tokens = g.concat_rows(&[mask_token, seg_tokens]);
        let pos = g.constant(self.positions.clone());
        let mut logits = Vec::with_capacity(images.len());
        let mut mask_rows = Vec::with_capacity(images.len());
        let mut obj = Vec::with_capacity(images.len());
        for (t, (&image, &hi)) in images.iter().zip(hires).enumerate() {
            let mut e = image;
            if t > 0 {
                let prev = self.previous_mask(g, logits[t - 1])?;
                let prev = g.constant(prev);
                let embed = g.param(self.mask_embed);
                let tag = g.matmul(prev, embed);
                let memory = g.add(images[t - 1], tag);
                let mpos = g.add(memory, pos);
                let q = g.add(e, pos);
                let a = self.prop_attn.forward(g, q, mpos, memory, None);
                let x = g.add(e, a);
                e = self.prop_ln.forward(g, x);
            }
            let (t_out, e_out) = self.two_way(g, tokens, e, pos);
            let m = g.slice_rows(t_out, 0, 1);
            let h = self.hyper.forward(g, m);
            let up = g.gather_rows(e_out, self.up_index.clone());
            let f = g.add(hi, up);
            let l = g.matmul_t(f, false, h, true);
            logits.push(g.reshape(l, hg, hg));
            obj.push(self.objectness_head.forward(g, m));
            mask_rows.push(m);
        }
        let n = images.len();
        let objectness_logits = if n == 1 { obj[0] } else { g.concat_rows(&obj) };
        let objectness = g.sigmoid(objectness_logits);
        let all = if n == 1 { mask_rows[0] } else { g.concat_rows(&mask_rows) };
        let avg = g.constant(Matrix::filled(1, n, 1.0 / n as f64));
        let pooled = g.matmul(avg, all);
        let iou = self.iou_head.forward(g, pooled);
        let iou_pred = g.sigmoid(iou);
        Ok(DecoderVars {
            logits,
            objectness_logits,
            objectness,
            iou_pred,
        })
    }

    /// All frames' logits upsampled to the decoder resolution, one frame per
    /// row of the result.
    pub fn upsampled(&self, g: &mut Graph, vars: &DecoderVars) -> Var {
        let res = self.cfg.resolution;
        let u = g.constant(bilinear_matrix(res, self.cfg.hires_grid()));
        let rows: Vec<Var> = vars
            .logits
            .iter()
            .map(|&l| {
                let a = g.matmul(u, l);
                let b = g.matmul_t(a, false, u, true);
                g.reshape(b, 1, res * res)
            })
            .collect();
        if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)
        }
    }
}
