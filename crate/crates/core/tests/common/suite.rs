//! Seeded oracle comparisons, callable from tests and the acceptance report.

#![allow(dead_code)]

use pixelrt_core::mask::{
    aggregate_iou, box_from_mask, box_iou, contour_accuracy_f, decode_rle, encode_rle, region_similarity_j, BinaryMask,
    FrameSize,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::masks::{random_mask, random_pair};
use super::oracle::{self, Grid};

pub fn to_mask(g: &Grid) -> BinaryMask {
    let size = FrameSize::new(g.len(), g[0].len()).unwrap();
    BinaryMask::from_fn(size, |y, x| g[y][x])
}

/// J, F, box IoU per pair and cIoU/gIoU over all pairs, compared exactly.
pub fn metric_suite(pairs: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut grids = Vec::new();
    let mut boxes = 0;
    for k in 0..pairs {
        let (a, b) = random_pair(&mut rng, 16, 16);
        let (ma, mb) = (to_mask(&a), to_mask(&b));
        let j = region_similarity_j(&ma, &mb).map_err(|e| e.to_string())?;
        if j != oracle::j(&a, &b) {
            return Err(format!("pair {k}: J {j} vs oracle {}", oracle::j(&a, &b)));
        }
        let f = contour_accuracy_f(&ma, &mb).map_err(|e| e.to_string())?;
        if f != oracle::f(&a, &b) {
            return Err(format!("pair {k}: F {f} vs oracle {}", oracle::f(&a, &b)));
        }
        match (box_from_mask(&ma), oracle::bbox(&a), box_from_mask(&mb), oracle::bbox(&b)) {
            (Ok(ba), Some(oa), Ok(bb), Some(ob)) => {
                if (ba.x1, ba.y1, ba.x2, ba.y2) != oa {
                    return Err(format!("pair {k}: box {ba:?} vs oracle {oa:?}"));
                }
                if box_iou(&ba, &bb) != oracle::box_iou(oa, ob) {
                    return Err(format!("pair {k}: box IoU {} vs oracle {}", box_iou(&ba, &bb), oracle::box_iou(oa, ob)));
                }
                boxes += 1;
            }
            (ra, oa, rb, ob) => {
                if ra.is_ok() != oa.is_some() || rb.is_ok() != ob.is_some() {
                    return Err(format!("pair {k}: box presence disagrees with the oracle"));
                }
            }
        }
        let (i, u) = oracle::inter_union(&a, &b);
        images.push((i as u64, u as u64));
        grids.push((a, b));
    }
    let got = aggregate_iou(&images).map_err(|e| e.to_string())?;
    let want = oracle::ciou_giou(&grids);
    if got != want {
        return Err(format!("cIoU/gIoU {got:?} vs oracle {want:?}"));
    }
    Ok(format!("{pairs} pairs ({boxes} with boxes) agree exactly"))
}

/// Random masks of assorted sizes through encode/decode and the oracle
/// run lengths.
pub fn rle_fuzz(n: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let h = 1 + k % 23;
        let w = 1 + (k / 23) % 19;
        let g = random_mask(&mut rng, h, w);
        let m = to_mask(&g);
        let rle = encode_rle(&m);
        if rle.counts != oracle::rle_counts(&g) {
            return Err(format!("mask {k}: counts {:?} vs oracle {:?}", rle.counts, oracle::rle_counts(&g)));
        }
        if decode_rle(&rle).map_err(|e| e.to_string())? != m {
            return Err(format!("mask {k} ({h}x{w}) did not round-trip"));
        }
    }
    Ok(format!("{n} masks round-trip bit-exactly"))
}
