//! In-memory RGB frame sequences.

use std::path::Path;

use image::{imageops, ImageBuffer, Rgb, RgbImage};
use pixelrt_core::mask::FrameSize;
use pixelrt_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    size: FrameSize,
    frames: Vec<RgbImage>,
}

impl VideoClip {
    pub fn from_images(frames: Vec<RgbImage>) -> Result<Self> {
        let first = frames.first().ok_or(Error::NoFrame)?;
        let (w, h) = first.dimensions();
        let size = FrameSize::new(h as usize, w as usize)?;
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dimensions() != (w, h)) {
            return Err(Error::Upload(format!(
                "frame {i} is {}x{}, expected {w}x{h}",
                f.width(),
                f.height()
            )));
        }
        Ok(Self { size, frames })
    }

    /// Decodes encoded images (PNG or anything the `image` crate reads with
    /// the enabled formats).
    pub fn decode(encoded: &[impl AsRef<[u8]>]) -> Result<Self> {
        let frames = encoded
            .iter()
            .enumerate()
            .map(|(i, bytes)| {
                image::load_from_memory(bytes.as_ref())
                    .map(|img| img.to_rgb8())
                    .map_err(|e| Error::Upload(format!("frame {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(frames)
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let frames = paths
            .iter()
            .map(|p| Ok(image::open(p.as_ref())?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> FrameSize {
        self.size
    }

    pub fn frame(&self, t: usize) -> &RgbImage {
        &self.frames[t]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            size: self.size,
            frames: indices.iter().map(|&t| self.frames[t].clone()).collect(),
        }
    }

    /// Frame `t` resampled to `target`, as `H·W` rows of RGB in `[0, 1]`.
    pub fn pixels(&self, t: usize, target: FrameSize) -> Vec<[f64; 3]> {
        let src = &self.frames[t];
        let resized;
        let img = if (src.height() as usize, src.width() as usize) == (target.height, target.width) {
            src
        } else {
            resized = imageops::resize(
                src,
                target.width as u32,
                target.height as u32,
                imageops::FilterType::Triangle,
            );
            &resized
        };
        img.pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect()
    }
}

pub fn solid_frame(size: FrameSize, rgb: [u8; 3]) -> RgbImage {
    ImageBuffer::from_pixel(size.width as u32, size.height as u32, Rgb(rgb))
}
