//! Visual prompt encoding: points, boxes and masks each become one token in
//! the language model's embedding space.
//!
//! Sparse prompts use random Fourier features of their normalized
//! coordinates plus a learned type vector (single point, top-left corner,
//! bottom-right corner). Box corners are concatenated and projected back to
//! the positional width. The frame index gets its own 1-D Fourier features;
//! positional and temporal parts are concatenated and mapped through
//! `GELU → Linear`. Mask prompts are pooled from visual-encoder features
//! under the downsampled mask and projected by the mask-to-language MLP.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use pixelrt_core::autograd::{Graph, Var};
use pixelrt_core::error::{Error, Result};
use pixelrt_core::mask::{decode_rle, downsample_mask, encode_rle, BinaryMask, FrameSize, RleMask};
use pixelrt_core::nn::{Linear, Mlp};
use pixelrt_core::params::{Block, Init, ParamId, ParamStore};
use pixelrt_core::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub t: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrompt {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrompt {
    pub mask: BinaryMask,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VisualPrompt {
    Point(PointPrompt),
    Box(BoxPrompt),
    Mask(MaskPrompt),
}

impl VisualPrompt {
    pub fn frame(&self) -> usize {
        match self {
            VisualPrompt::Point(p) => p.t,
            VisualPrompt::Box(b) => b.t,
            VisualPrompt::Mask(m) => m.t,
        }
    }

    pub fn to_json(&self) -> PromptJson {
        match self {
            VisualPrompt::Point(p) => PromptJson {
                kind: PromptKind::Point,
                t: p.t,
                xy: Some(vec![p.x, p.y]),
                rle: None,
            },
            VisualPrompt::Box(b) => PromptJson {
                kind: PromptKind::Box,
                t: b.t,
                xy: Some(vec![b.x1, b.y1, b.x2, b.y2]),
                rle: None,
            },
            VisualPrompt::Mask(m) => PromptJson {
                kind: PromptKind::Mask,
                t: m.t,
                xy: None,
                rle: Some(encode_rle(&m.mask)),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Point,
    Box,
    Mask,
}

/// Wire form of a prompt: normalized `xy` for points and boxes, `rle` for
/// masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptJson {
    pub kind: PromptKind,
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xy: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<RleMask>,
}

/// A validation failure pointing at the offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn prefixed(mut self, prefix: &str) -> Self {
        self.field = format!("{prefix}.{}", self.field);
        self
    }
}

impl PromptJson {
    pub fn validate(
        &self,
        clip_length: usize,
        frame_size: FrameSize,
    ) -> std::result::Result<VisualPrompt, FieldError> {
        if self.t >= clip_length {
            return Err(FieldError::new(
                "t",
                format!("frame {} is outside a clip of {clip_length} frames", self.t),
            ));
        }
        let coords = |n: usize| -> std::result::Result<Vec<f64>, FieldError> {
            let xy = self
                .xy
                .as_ref()
                .ok_or_else(|| FieldError::new("xy", "missing coordinates"))?;
            if xy.len() != n {
                return Err(FieldError::new(
                    "xy",
                    format!("expected {n} coordinates, got {}", xy.len()),
                ));
            }
            for (i, v) in xy.iter().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    return Err(FieldError::new(
                        format!("xy[{i}]"),
                        format!("{v} is not a normalized coordinate in [0, 1]"),
                    ));
                }
            }
            Ok(xy.clone())
        };
        match self.kind {
            PromptKind::Point => {
                let xy = coords(2)?;
                Ok(VisualPrompt::Point(PointPrompt {
                    x: xy[0],
                    y: xy[1],
                    t: self.t,
                }))
            }
            PromptKind::Box => {
                let xy = coords(4)?;
                if xy[0] > xy[2] || xy[1] > xy[3] {
                    return Err(FieldError::new("xy", "box corners must satisfy x1<=x2, y1<=y2"));
                }
                Ok(VisualPrompt::Box(BoxPrompt {
                    x1: xy[0],
                    y1: xy[1],
                    x2: xy[2],
                    y2: xy[3],
                    t: self.t,
                }))
            }
            PromptKind::Mask => {
                let rle = self
                    .rle
                    .as_ref()
                    .ok_or_else(|| FieldError::new("rle", "missing mask"))?;
                if rle.size != frame_size {
                    return Err(FieldError::new(
                        "rle.size",
                        format!(
                            "mask is {}x{}, frames are {}x{}",
                            rle.size.height, rle.size.width, frame_size.height, frame_size.width
                        ),
                    ));
                }
                let mask = decode_rle(rle).map_err(|e| FieldError::new("rle.counts", e.to_string()))?;
                Ok(VisualPrompt::Mask(MaskPrompt { mask, t: self.t }))
            }
        }
    }
}

/// Random Gaussian frequencies for 2-D positions and 1-D frame times.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBasis {
    pub frequencies_2d: Matrix,
    pub frequencies_1d: Vec<f64>,
    pub seed: u64,
}

pub fn make_fourier_basis(n_freq: usize, sigma: f64, seed: u64) -> Result<FourierBasis> {
    if n_freq == 0 {
        return Err(Error::Precondition("Fourier basis needs n_freq > 0".into()));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Precondition("Fourier basis needs sigma > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).expect("sigma checked above");
    let frequencies_2d = Matrix::from_fn(n_freq, 2, |_, _| dist.sample(&mut rng));
    let frequencies_1d = (0..n_freq).map(|_| dist.sample(&mut rng)).collect();
    Ok(FourierBasis {
        frequencies_2d,
        frequencies_1d,
        seed,
    })
}

impl FourierBasis {
    pub fn n_freq(&self) -> usize {
        self.frequencies_1d.len()
    }

    pub fn width(&self) -> usize {
        2 * self.n_freq()
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Range(format!("{name}={v} is outside [0, 1]")))
    }
}

/// `[cos(2π B·p), sin(2π B·p)]` for `p = (x, y)`.
pub fn fourier_embed_2d(basis: &FourierBasis, x: f64, y: f64) -> Result<Vec<f64>> {
    check_unit("x", x)?;
    check_unit("y", y)?;
    Ok(fourier_2d_unchecked(basis, x, y))
}

pub(crate) fn fourier_2d_unchecked(basis: &FourierBasis, x: f64, y: f64) -> Vec<f64> {
    let n = basis.n_freq();
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        let a = 2.0 * PI * (basis.frequencies_2d.get(i, 0) * x + basis.frequencies_2d.get(i, 1) * y);
        out[i] = a.cos();
        out[n + i] = a.sin();
    }
    out
}

/// Same construction on `t / (clip_length - 1)`; single-frame clips use 0.
pub fn fourier_embed_time(basis: &FourierBasis, t: usize, clip_length: usize) -> Result<Vec<f64>> {
    if t >= clip_length {
        return Err(Error::Range(format!(
            "frame {t} outside a clip of {clip_length} frames"
        )));
    }
    let tau = if clip_length <= 1 {
        0.0
    } else {
        t as f64 / (clip_length - 1) as f64
    };
    let n = basis.n_freq();
    let mut out = vec![0.0; 2 * n];
    for (i, &f) in basis.frequencies_1d.iter().enumerate() {
        let a = 2.0 * PI * f * tau;
        out[i] = a.cos();
        out[n + i] = a.sin();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CornerKind {
    SinglePoint = 0,
    TopLeft = 1,
    BottomRight = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEncoderConfig {
    pub n_freq: usize,
    pub sigma: f64,
    pub d_pos: usize,
    pub seed: u64,
}

impl Default for PromptEncoderConfig {
    fn default() -> Self {
        Self {
            n_freq: 128,
            sigma: 1.0,
            d_pos: 256,
            seed: 0x5eed,
        }
    }
}

/// Parameters of the sparse (point/box) prompt encoder.
#[derive(Clone, Debug)]
pub struct SparsePromptEncoder {
    pub basis: FourierBasis,
    pub type_embeddings: ParamId,
    pub box_merge: Linear,
    pub out: Linear,
    pub d_pos: usize,
}

impl SparsePromptEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        cfg: &PromptEncoderConfig,
        d_llm: usize,
    ) -> Result<Self> {
        if 2 * cfg.n_freq != cfg.d_pos {
            return Err(Error::Config(format!(
                "Fourier width 2*{} must equal the positional width {}",
                cfg.n_freq, cfg.d_pos
            )));
        }
        let basis = make_fourier_basis(cfg.n_freq, cfg.sigma, cfg.seed)?;
        let b = Block::SparsePromptEncoder;
        let type_embeddings = store.insert("prompt.type_embeddings", b, init.normal(3, cfg.d_pos, 1.0));
        let box_merge = Linear::new(store, init, "prompt.box_merge", b, 2 * cfg.d_pos, cfg.d_pos);
        let out = Linear::new(store, init, "prompt.out", b, 2 * cfg.d_pos, d_llm);
        Ok(Self {
            basis,
            type_embeddings,
            box_merge,
            out,
            d_pos: cfg.d_pos,
        })
    }

    fn corner(&self, g: &mut Graph, x: f64, y: f64, kind: CornerKind) -> Result<Var> {
        let f = fourier_embed_2d(&self.basis, x, y)?;
        let f = g.constant(Matrix::row_vector(f));
        let types = g.param(self.type_embeddings);
        let ty = g.gather_rows(types, vec![kind as usize]);
        Ok(g.add(f, ty))
    }

    fn finish(&self, g: &mut Graph, positional: Var, t: usize, clip_length: usize) -> Result<Var> {
        let time = fourier_embed_time(&self.basis, t, clip_length)?;
        let time = g.constant(Matrix::row_vector(time));
        let z = g.concat_cols(&[positional, time]);
        let z = g.gelu(z);
        Ok(self.out.forward(g, z))
    }

    pub fn encode_point(&self, g: &mut Graph, p: &PointPrompt, clip_length: usize) -> Result<Var> {
        let pos = self.corner(g, p.x, p.y, CornerKind::SinglePoint)?;
        self.finish(g, pos, p.t, clip_length)
    }

    pub fn encode_box(&self, g: &mut Graph, b: &BoxPrompt, clip_length: usize) -> Result<Var> {
        if b.x1 > b.x2 || b.y1 > b.y2 {
            return Err(Error::Range("box corners must satisfy x1<=x2, y1<=y2".into()));
        }
        let tl = self.corner(g, b.x1, b.y1, CornerKind::TopLeft)?;
        let br = self.corner(g, b.x2, b.y2, CornerKind::BottomRight)?;
        let cat = g.concat_cols(&[tl, br]);
        let pos = self.box_merge.forward(g, cat);
        self.finish(g, pos, b.t, clip_length)
    }
}

/// Row weights that average the feature rows selected by `mask_on_grid`
/// (row-major cells); `None` when nothing is selected.
pub fn pooling_weights(mask_on_grid: &BinaryMask) -> Option<Matrix> {
    let count = mask_on_grid.area();
    if count == 0 {
        return None;
    }
    let w = 1.0 / count as f64;
    Some(Matrix::row_vector(
        mask_on_grid
            .as_slice()
            .iter()
            .map(|&v| if v != 0 { w } else { 0.0 })
            .collect(),
    ))
}

/// Mean of the feature rows under the mask; `Ok(None)` means the object is
/// not visible at this resolution.
pub fn masked_pool(features: &Matrix, grid: FrameSize, mask: &BinaryMask) -> Result<Option<Vec<f64>>> {
    if mask.size() != grid || features.rows() != grid.area() {
        return Err(Error::Shape(format!(
            "mask {}x{} against a {}x{} grid with {} feature rows",
            mask.height(),
            mask.width(),
            grid.height,
            grid.width,
            features.rows()
        )));
    }
    Ok(pooling_weights(mask).map(|w| w.matmul(features).into_vec()))
}

/// Downsample → masked pooling → mask-to-language projection, on the graph.
pub fn encode_mask_on_graph(
    g: &mut Graph,
    mask: &BinaryMask,
    frame_features: Var,
    grid: FrameSize,
    m2l: &Mlp,
) -> Result<Var> {
    let small = downsample_mask(mask, grid)?;
    let weights = pooling_weights(&small).ok_or(Error::EmptyPrompt)?;
    if g.shape(frame_features).0 != grid.area() {
        return Err(Error::Shape("feature rows do not match the token grid".into()));
    }
    let w = g.constant(weights);
    let pooled = g.matmul(w, frame_features);
    Ok(m2l.forward(g, pooled))
}

pub fn build_m2l_projector(store: &mut ParamStore, init: &mut Init, d_vis: usize, d_llm: usize) -> Mlp {
    Mlp::new(store, init, "m2l", Block::M2lProjector, (d_vis, d_llm, d_llm))
}
