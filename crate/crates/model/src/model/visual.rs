use pixelrt_core::autograd::{Graph, Var};
use pixelrt_core::mask::FrameSize;
use pixelrt_core::nn::{sinusoidal_positions, LayerNorm, Linear, TransformerBlock};
use pixelrt_core::params::{Block, Init, ParamStore};
use pixelrt_core::tensor::Matrix;
use pixelrt_core::{Error, Result};

use super::VisualEncoderConfig;
use crate::clip::VideoClip;

/// Token grid for a frame: one token per whole patch, rescaled so the count
/// lands inside `[min_tokens, max_tokens]` while keeping the aspect ratio.
pub fn token_grid(cfg: &VisualEncoderConfig, size: FrameSize) -> Result<FrameSize> {
    let p = cfg.patch_size;
    if size.height < p || size.width < p {
        return Err(Error::TooSmall {
            height: size.height,
            width: size.width,
            patch: p,
        });
    }
    let (mut h, mut w) = (size.height / p, size.width / p);
    let n = h * w;
    if n > cfg.max_tokens {
        let s = (cfg.max_tokens as f64 / n as f64).sqrt();
        h = ((h as f64 * s).floor() as usize).max(1);
        w = ((w as f64 * s).floor() as usize).max(1);
        while h * w > cfg.max_tokens {
            if h >= w {
                h -= 1;
            } else {
                w -= 1;
            }
        }
    } else if n < cfg.min_tokens {
        let s = (cfg.min_tokens as f64 / n as f64).sqrt();
        h = (h as f64 * s).ceil() as usize;
        w = (w as f64 * s).ceil() as usize;
    }
    FrameSize::new(h, w)
}

/// Row-major patches of a frame resampled to `grid × patch`, one row of
/// `patch² · 3` values per token.
pub(crate) fn patchify(clip: &VideoClip, t: usize, grid: FrameSize, patch: usize) -> Matrix {
    let size = FrameSize::new(grid.height * patch, grid.width * patch).expect("non-empty grid");
    let px = clip.pixels(t, size);
    let mut m = Matrix::zeros(grid.area(), patch * patch * 3);
    for gy in 0..grid.height {
        for gx in 0..grid.width {
            let row = m.row_mut(gy * grid.width + gx);
            for dy in 0..patch {
                for dx in 0..patch {
                    let src = px[(gy * patch + dy) * size.width + gx * patch + dx];
                    let o = (dy * patch + dx) * 3;
                    row[o..o + 3].copy_from_slice(&src);
                }
            }
        }
    }
    m
}

/// Fixed 2-D positions: half the channels encode the row, half the column.
pub(crate) fn grid_positions(grid: FrameSize, dim: usize) -> Matrix {
    let rows = sinusoidal_positions(grid.height, dim / 2);
    let cols = sinusoidal_positions(grid.width, dim / 2);
    Matrix::from_fn(grid.area(), dim, |i, c| {
        let (y, x) = (i / grid.width, i % grid.width);
        if c < dim / 2 {
            rows.get(y, c)
        } else {
            cols.get(x, c - dim / 2)
        }
    })
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub patch_embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub patch_size: usize,
    pub d_vis: usize,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &VisualEncoderConfig) -> Self {
        let b = Block::VisualEncoder;
        let p = cfg.patch_size;
        Self {
            patch_embed: Linear::new(store, init, "visual.patch", b, p * p * 3, cfg.d_vis),
            blocks: (0..cfg.n_layers)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        init,
                        &format!("visual.block{i}"),
                        b,
                        cfg.d_vis,
                        cfg.n_heads,
                        2 * cfg.d_vis,
                    )
                })
                .collect(),
            ln: LayerNorm::new(store, "visual.ln", b, cfg.d_vis),
            patch_size: p,
            d_vis: cfg.d_vis,
        }
    }

    /// `grid.area() × d_vis` features for frame `t`.
    pub fn encode_frame(&self, g: &mut Graph, clip: &VideoClip, t: usize, grid: FrameSize) -> Var {
        let patches = g.constant(patchify(clip, t, grid, self.patch_size));
        let x = self.patch_embed.forward(g, patches);
        let pos = g.constant(grid_positions(grid, self.d_vis));
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, x, None);
        }
        self.ln.forward(g, x)
    }
}
