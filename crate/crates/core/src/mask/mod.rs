//! Binary masks, their run-length form, resizing, and segmentation metrics.

mod metrics;
mod rle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use metrics::{
    aggregate_iou, box_iou, boundary, boundary_tolerance, contour_accuracy_f, rec_correct,
    region_similarity_j, video_scores, MetricReport,
};
pub use rle::{decode_rle, encode_rle, RleMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSize {
    pub height: usize,
    pub width: usize,
}

impl FrameSize {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Range(format!(
                "frame size {height}x{width} must be at least 1x1"
            )));
        }
        Ok(Self { height, width })
    }

    #[inline]
    pub fn area(self) -> usize {
        self.height * self.width
    }

    pub fn diagonal(self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }
}

/// Row-major grid of {0,1} cells.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    size: FrameSize,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.size.height, self.size.width)?;
        if self.size.area() <= 1024 {
            for y in 0..self.size.height {
                let row: String = (0..self.size.width)
                    .map(|x| if self.get(y, x) { '#' } else { '.' })
                    .collect();
                writeln!(f, "  {row}")?;
            }
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn zeros(size: FrameSize) -> Self {
        Self {
            size,
            data: vec![0; size.area()],
        }
    }

    pub fn ones(size: FrameSize) -> Self {
        Self {
            size,
            data: vec![1; size.area()],
        }
    }

    /// `data` is row-major; any non-zero byte is treated as 1.
    pub fn from_row_major(size: FrameSize, data: Vec<u8>) -> Result<Self> {
        if data.len() != size.area() {
            return Err(Error::Shape(format!(
                "mask data has {} cells, expected {}",
                data.len(),
                size.area()
            )));
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self { size, data })
    }

    pub fn from_fn(size: FrameSize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(size.area());
        for y in 0..size.height {
            for x in 0..size.width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { size, data }
    }

    #[inline]
    pub fn size(&self) -> FrameSize {
        self.size
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.size.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.size.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.size.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.size.width + x] = u8::from(on);
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a & b != 0)
            .count()
    }

    pub fn union_area(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a | b != 0)
            .count()
    }

    pub fn check_same_size(&self, other: &BinaryMask) -> Result<()> {
        if self.size != other.size {
            return Err(Error::Shape(format!(
                "masks are {}x{} and {}x{}",
                self.size.height, self.size.width, other.size.height, other.size.width
            )));
        }
        Ok(())
    }

    /// Thresholds a row-major logit grid: a cell is on when its logit is
    /// strictly positive (probability above 0.5).
    pub fn from_logits(size: FrameSize, logits: &[f64]) -> Result<Self> {
        if logits.len() != size.area() {
            return Err(Error::Shape(format!(
                "{} logits for a {}x{} mask",
                logits.len(),
                size.height,
                size.width
            )));
        }
        Ok(Self {
            size,
            data: logits.iter().map(|&v| u8::from(v > 0.0)).collect(),
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Nearest-neighbour resize to any size (used for display and for
    /// mapping ground truth onto the decoder grid when upsampling).
    pub fn resize_nearest(&self, target: FrameSize) -> BinaryMask {
        BinaryMask::from_fn(target, |y, x| {
            let sy = (y * self.size.height) / target.height;
            let sx = (x * self.size.width) / target.width;
            self.get(sy, sx)
        })
    }
}

/// Area-interpolating downsample followed by a 0.5 threshold.
///
/// Cell `(i, j)` of the output covers the source rectangle
/// `[i·H/h, (i+1)·H/h) × [j·W/w, (j+1)·W/w)`, including fractional
/// overlaps. Coordinates are scaled by `h` and `w` so the covered mean is
/// compared against one half in exact integer arithmetic.
pub fn downsample_mask(mask: &BinaryMask, target: FrameSize) -> Result<BinaryMask> {
    let src = mask.size();
    if target.height > src.height || target.width > src.width {
        return Err(Error::InvalidTarget(format!(
            "cannot downsample {}x{} to larger {}x{}",
            src.height, src.width, target.height, target.width
        )));
    }
    let row_spans = spans(src.height, target.height);
    let col_spans = spans(src.width, target.width);
    // Cell area in scaled units is H·W.
    let cell_area = (src.height * src.width) as u64;
    let mut out = BinaryMask::zeros(target);
    for (i, rs) in row_spans.iter().enumerate() {
        for (j, cs) in col_spans.iter().enumerate() {
            let mut covered = 0u64;
            for &(sy, wy) in rs {
                for &(sx, wx) in cs {
                    if mask.get(sy, sx) {
                        covered += wy * wx;
                    }
                }
            }
            out.set(i, j, 2 * covered >= cell_area);
        }
    }
    Ok(out)
}

/// For each of `n_dst` output cells, the source indices it overlaps and the
/// overlap length, in units where one source cell has length `n_dst`.
fn spans(n_src: usize, n_dst: usize) -> Vec<Vec<(usize, u64)>> {
    (0..n_dst)
        .map(|i| {
            let lo = i * n_src;
            let hi = (i + 1) * n_src;
            let first = lo / n_dst;
            let last = (hi - 1) / n_dst;
            (first..=last)
                .map(|s| {
                    let a = (s * n_dst).max(lo);
                    let b = ((s + 1) * n_dst).min(hi);
                    (s, (b - a) as u64)
                })
                .collect()
        })
        .collect()
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BoundingBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 > x2 || y1 > y2 {
            return Err(Error::Range(format!(
                "box ({x1},{y1},{x2},{y2}) has inverted corners"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.x1..=self.x2).contains(&x) && (self.y1..=self.y2).contains(&y)
    }
}

pub fn box_from_mask(mask: &BinaryMask) -> Result<BoundingBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
                });
            }
        }
    }
    let (x1, y1, x2, y2) = bounds.ok_or(Error::EmptyMask)?;
    Ok(BoundingBox { x1, y1, x2, y2 })
}

/// One object's masks across a clip. A missing frame means the object is
/// not visible there; empty masks are never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatioTemporalMask {
    clip_length: usize,
    frame_size: FrameSize,
    frames: BTreeMap<usize, BinaryMask>,
}

impl SpatioTemporalMask {
    pub fn new(clip_length: usize, frame_size: FrameSize) -> Self {
        Self {
            clip_length,
            frame_size,
            frames: BTreeMap::new(),
        }
    }

    pub fn clip_length(&self) -> usize {
        self.clip_length
    }

    pub fn frame_size(&self) -> FrameSize {
        self.frame_size
    }

    pub fn insert(&mut self, frame: usize, mask: BinaryMask) -> Result<()> {
        if frame >= self.clip_length {
            return Err(Error::Range(format!(
                "frame {frame} outside clip of {} frames",
                self.clip_length
            )));
        }
        if mask.size() != self.frame_size {
            return Err(Error::Shape(format!(
                "frame mask {}x{} does not match clip frame size {}x{}",
                mask.height(),
                mask.width(),
                self.frame_size.height,
                self.frame_size.width
            )));
        }
        if mask.is_empty() {
            self.frames.remove(&frame);
        } else {
            self.frames.insert(frame, mask);
        }
        Ok(())
    }

    pub fn get(&self, frame: usize) -> Option<&BinaryMask> {
        self.frames.get(&frame)
    }

    /// The frame's mask, or an empty one when the object is not visible.
    pub fn frame_or_empty(&self, frame: usize) -> BinaryMask {
        self.frames
            .get(&frame)
            .cloned()
            .unwrap_or_else(|| BinaryMask::zeros(self.frame_size))
    }

    pub fn visible_frames(&self) -> Vec<usize> {
        self.frames.keys().copied().collect()
    }

    pub fn is_visible(&self, frame: usize) -> bool {
        self.frames.contains_key(&frame)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &BinaryMask)> {
        self.frames.iter().map(|(k, v)| (*k, v))
    }

    pub fn to_rle_map(&self) -> BTreeMap<usize, RleMask> {
        self.frames
            .iter()
            .map(|(&t, m)| (t, encode_rle(m)))
            .collect()
    }

    /// Keeps frames `indices[k]` as new frame `k`.
    pub fn reindexed(&self, indices: &[usize]) -> SpatioTemporalMask {
        let mut out = SpatioTemporalMask::new(indices.len(), self.frame_size);
        for (k, &src) in indices.iter().enumerate() {
            if let Some(m) = self.frames.get(&src) {
                out.frames.insert(k, m.clone());
            }
        }
        out
    }
}
