//! Region similarity (J), contour accuracy (F), cumulative/mean IoU, and the
//! box-level correctness test used for referring expression comprehension.

use serde::{Deserialize, Serialize};

use super::{BinaryMask, BoundingBox, SpatioTemporalMask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub ciou: f64,
    pub giou: f64,
}

impl MetricReport {
    pub fn new(j: f64, f: f64, ciou: f64, giou: f64) -> Self {
        Self {
            j,
            f,
            jf: (j + f) / 2.0,
            ciou,
            giou,
        }
    }
}

/// Intersection over union; two empty masks score 1.
pub fn region_similarity_j(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_size(gt)?;
    let union = pred.union_area(gt);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(pred.intersection_area(gt) as f64 / union as f64)
}

/// Boundary-matching radius: `ceil(0.008 · diagonal)` pixels.
pub fn boundary_tolerance(mask: &BinaryMask) -> usize {
    (0.008 * mask.size().diagonal()).ceil() as usize
}

/// Foreground cells with at least one 4-neighbour inside the frame that is
/// background. The frame edge itself is not a boundary.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(mask.size(), |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        (y > 0 && !mask.get(y - 1, x))
            || (y + 1 < h && !mask.get(y + 1, x))
            || (x > 0 && !mask.get(y, x - 1))
            || (x + 1 < w && !mask.get(y, x + 1))
    })
}

fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let mut out = BinaryMask::zeros(mask.size());
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y as usize, x as usize) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && ny < h && nx >= 0 && nx < w {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
    }
    out
}

/// Boundary F-measure: a boundary cell of one mask is matched when a
/// boundary cell of the other lies within the tolerance radius.
pub fn contour_accuracy_f(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_size(gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let pb = boundary(pred);
    let gb = boundary(gt);
    let (np, ng) = (pb.area(), gb.area());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let r = boundary_tolerance(pred);
    let matched_p = pb.intersection_area(&dilate(&gb, r));
    let matched_g = gb.intersection_area(&dilate(&pb, r));
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// `(cIoU, gIoU)` from per-image `(intersection, union)` areas. Images where
/// both masks are empty count as IoU 1 for gIoU and add nothing to cIoU.
pub fn aggregate_iou(per_image: &[(u64, u64)]) -> Result<(f64, f64)> {
    if per_image.is_empty() {
        return Err(Error::UndefinedAggregate);
    }
    let mut sum_i = 0u64;
    let mut sum_u = 0u64;
    let mut giou = 0.0;
    for (k, &(i, u)) in per_image.iter().enumerate() {
        if i > u || (u == 0 && i != 0) {
            return Err(Error::Precondition(format!(
                "image {k}: intersection {i} exceeds union {u}"
            )));
        }
        if u == 0 {
            giou += 1.0;
        } else {
            giou += i as f64 / u as f64;
            sum_i += i;
            sum_u += u;
        }
    }
    let ciou = if sum_u == 0 {
        1.0
    } else {
        sum_i as f64 / sum_u as f64
    };
    Ok((ciou, giou / per_image.len() as f64))
}

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (inter, union) = box_overlap(a, b);
    inter as f64 / union as f64
}

fn box_overlap(a: &BoundingBox, b: &BoundingBox) -> (usize, usize) {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let inter = if ix1 <= ix2 && iy1 <= iy2 {
        (ix2 - ix1 + 1) * (iy2 - iy1 + 1)
    } else {
        0
    };
    (inter, a.area() + b.area() - inter)
}

/// Correct when box IoU is at least 0.5, compared exactly in integers.
pub fn rec_correct(pred: &BoundingBox, gt: &BoundingBox) -> bool {
    let (inter, union) = box_overlap(pred, gt);
    2 * inter >= union
}

/// Per-frame J and F averaged over every frame of the clip; frames where
/// the object is absent from a mask are scored as empty.
pub fn video_scores(pred: &SpatioTemporalMask, gt: &SpatioTemporalMask) -> Result<(f64, f64)> {
    if pred.clip_length() != gt.clip_length() {
        return Err(Error::Shape(format!(
            "prediction covers {} frames, ground truth {}",
            pred.clip_length(),
            gt.clip_length()
        )));
    }
    let n = gt.clip_length();
    if n == 0 {
        return Err(Error::NoFrame);
    }
    let mut j = 0.0;
    let mut f = 0.0;
    for t in 0..n {
        let p = pred.frame_or_empty(t);
        let g = gt.frame_or_empty(t);
        j += region_similarity_j(&p, &g)?;
        f += contour_accuracy_f(&p, &g)?;
    }
    Ok((j / n as f64, f / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::FrameSize;

    fn fs(h: usize, w: usize) -> FrameSize {
        FrameSize::new(h, w).unwrap()
    }

    fn from_cells(size: FrameSize, cells: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(size, |y, x| cells.contains(&(y, x)))
    }

    #[test]
    fn j_examples() {
        let s = fs(3, 3);
        let a = from_cells(s, &[(0, 0), (0, 1)]);
        let b = from_cells(s, &[(0, 1), (0, 2)]);
        assert_eq!(region_similarity_j(&a, &a).unwrap(), 1.0);
        assert!((region_similarity_j(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = from_cells(s, &[(2, 2)]);
        assert_eq!(region_similarity_j(&a, &c).unwrap(), 0.0);
        let e = BinaryMask::zeros(s);
        assert_eq!(region_similarity_j(&e, &e).unwrap(), 1.0);
        assert_eq!(region_similarity_j(&e, &a).unwrap(), 0.0);
        assert!(matches!(
            region_similarity_j(&a, &BinaryMask::zeros(fs(2, 3))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn f_examples() {
        let s = fs(32, 32);
        let sq = BinaryMask::from_fn(s, |y, x| (4..7).contains(&y) && (4..7).contains(&x));
        assert_eq!(contour_accuracy_f(&sq, &sq).unwrap(), 1.0);
        let far = BinaryMask::from_fn(s, |y, x| (20..23).contains(&y) && (20..23).contains(&x));
        assert_eq!(contour_accuracy_f(&sq, &far).unwrap(), 0.0);
        let e = BinaryMask::zeros(s);
        assert_eq!(contour_accuracy_f(&e, &e).unwrap(), 1.0);
        assert_eq!(contour_accuracy_f(&e, &sq).unwrap(), 0.0);
        assert_eq!(boundary_tolerance(&sq), 1);
    }

    #[test]
    fn aggregate_examples() {
        let (c, g) = aggregate_iou(&[(2, 4), (6, 6)]).unwrap();
        assert!((c - 0.8).abs() < 1e-15);
        assert!((g - 0.75).abs() < 1e-15);
        assert_eq!(aggregate_iou(&[(5, 5)]).unwrap(), (1.0, 1.0));
        assert!(matches!(aggregate_iou(&[]), Err(Error::UndefinedAggregate)));
        assert_eq!(aggregate_iou(&[(0, 0), (1, 2)]).unwrap(), (0.5, 0.75));
        assert!(aggregate_iou(&[(3, 2)]).is_err());
    }

    #[test]
    fn rec_examples() {
        let a = BoundingBox::new(0, 0, 3, 3).unwrap();
        assert!(rec_correct(&a, &a));
        // 4x4 box vs its left 4x2 half: IoU = 8/16 = 0.5 exactly.
        let half = BoundingBox::new(0, 0, 1, 3).unwrap();
        assert_eq!(box_iou(&a, &half), 0.5);
        assert!(rec_correct(&half, &a));
        let far = BoundingBox::new(10, 10, 12, 12).unwrap();
        assert!(!rec_correct(&a, &far));
        // Just below one half.
        let narrow = BoundingBox::new(0, 0, 0, 6).unwrap();
        let wide = BoundingBox::new(0, 0, 1, 6).unwrap();
        assert!(rec_correct(&narrow, &wide));
        let tiny = BoundingBox::new(0, 0, 0, 2).unwrap();
        assert!(!rec_correct(&tiny, &wide));
    }

    #[test]
    fn report_jf_is_mean() {
        let r = MetricReport::new(0.3, 0.8, 0.1, 0.2);
        assert_eq!(r.jf, (0.3 + 0.8) / 2.0);
    }
}
