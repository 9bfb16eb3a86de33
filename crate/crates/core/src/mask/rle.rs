//! Uncompressed COCO-style run-length encoding.
//!
//! Cells are visited column-major (down each column, then across) and the
//! counts alternate zero-run, one-run, ... starting with a zero-run that may
//! have length 0.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{BinaryMask, FrameSize};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RleMask {
    pub size: FrameSize,
    pub counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct RleJson {
    size: [usize; 2],
    counts: Vec<u64>,
}

impl Serialize for RleMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RleJson {
            size: [self.size.height, self.size.width],
            counts: self.counts.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RleMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RleJson::deserialize(d)?;
        let size = FrameSize::new(raw.size[0], raw.size[1]).map_err(serde::de::Error::custom)?;
        Ok(RleMask {
            size,
            counts: raw.counts,
        })
    }
}

impl RleMask {
    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.counts.iter().sum();
        let want = self.size.area() as u64;
        if total != want {
            return Err(Error::MalformedRle(format!(
                "counts sum to {total}, expected {want} for {}x{}",
                self.size.height, self.size.width
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn encode_rle(mask: &BinaryMask) -> RleMask {
    let size = mask.size();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..size.width {
        for y in 0..size.height {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask { size, counts }
}

pub fn decode_rle(rle: &RleMask) -> Result<BinaryMask> {
    rle.validate()?;
    let size = rle.size;
    let mut mask = BinaryMask::zeros(size);
    let mut pos = 0usize;
    let mut value = false;
    for &c in &rle.counts {
        if value {
            for p in pos..pos + c as usize {
                mask.set(p % size.height, p / size.height, true);
            }
        }
        pos += c as usize;
        value = !value;
    }
    Ok(mask)
}
