//! Brute-force reference implementations used to check the metric code.
//! Masks are plain `Vec<Vec<bool>>` so nothing here leans on the crate.

#![allow(dead_code)]

pub type Grid = Vec<Vec<bool>>;

pub fn area(m: &Grid) -> usize {
    m.iter().flatten().filter(|&&v| v).count()
}

pub fn inter_union(a: &Grid, b: &Grid) -> (usize, usize) {
    let mut i = 0;
    let mut u = 0;
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            i += (x && y) as usize;
            u += (x || y) as usize;
        }
    }
    (i, u)
}

pub fn j(a: &Grid, b: &Grid) -> f64 {
    let (i, u) = inter_union(a, b);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Foreground pixels touching background through an in-frame edge.
pub fn boundary_points(m: &Grid) -> Vec<(i64, i64)> {
    let h = m.len() as i64;
    let w = m[0].len() as i64;
    let at = |y: i64, x: i64| y >= 0 && y < h && x >= 0 && x < w && m[y as usize][x as usize];
    let inside = |y: i64, x: i64| y >= 0 && y < h && x >= 0 && x < w;
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dy, dx)| inside(y + dy, x + dx) && !at(y + dy, x + dx));
            if edge {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// Boundary F from the full pairwise distance matrix: a point matches when
/// some point of the other boundary lies within Euclidean radius `r`.
pub fn f(pred: &Grid, gt: &Grid) -> f64 {
    let (ap, ag) = (area(pred), area(gt));
    if ap == 0 && ag == 0 {
        return 1.0;
    }
    if ap == 0 || ag == 0 {
        return 0.0;
    }
    let h = pred.len() as f64;
    let w = pred[0].len() as f64;
    let r = (0.008 * (h * h + w * w).sqrt()).ceil() as i64;
    let pb = boundary_points(pred);
    let gb = boundary_points(gt);
    if pb.is_empty() && gb.is_empty() {
        return 1.0;
    }
    if pb.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let dist: Vec<Vec<i64>> = pb
        .iter()
        .map(|p| gb.iter().map(|g| (p.0 - g.0).pow(2) + (p.1 - g.1).pow(2)).collect())
        .collect();
    let mp = dist.iter().filter(|row| row.iter().any(|&d| d <= r * r)).count();
    let mg = (0..gb.len()).filter(|&k| dist.iter().any(|row| row[k] <= r * r)).count();
    let precision = mp as f64 / pb.len() as f64;
    let recall = mg as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn ciou_giou(pairs: &[(Grid, Grid)]) -> (f64, f64) {
    let (mut si, mut su, mut g) = (0usize, 0usize, 0.0);
    for (a, b) in pairs {
        let (i, u) = inter_union(a, b);
        si += i;
        su += u;
        g += if u == 0 { 1.0 } else { i as f64 / u as f64 };
    }
    let c = if su == 0 { 1.0 } else { si as f64 / su as f64 };
    (c, g / pairs.len() as f64)
}

/// Inclusive `(x1, y1, x2, y2)` hull of the foreground.
pub fn bbox(m: &Grid) -> Option<(usize, usize, usize, usize)> {
    let pts: Vec<(usize, usize)> = (0..m.len())
        .flat_map(|y| (0..m[0].len()).map(move |x| (y, x)))
        .filter(|&(y, x)| m[y][x])
        .collect();
    if pts.is_empty() {
        return None;
    }
    Some((
        pts.iter().map(|p| p.1).min().unwrap(),
        pts.iter().map(|p| p.0).min().unwrap(),
        pts.iter().map(|p| p.1).max().unwrap(),
        pts.iter().map(|p| p.0).max().unwrap(),
    ))
}

/// Box IoU by painting both boxes onto a grid and counting cells.
pub fn box_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let w = a.2.max(b.2) + 1;
    let h = a.3.max(b.3) + 1;
    let paint = |bx: (usize, usize, usize, usize)| -> Grid {
        (0..h)
            .map(|y| (0..w).map(|x| x >= bx.0 && x <= bx.2 && y >= bx.1 && y <= bx.3).collect())
            .collect()
    };
    j(&paint(a), &paint(b))
}

/// Column-major run lengths starting with a background run.
pub fn rle_counts(m: &Grid) -> Vec<u64> {
    let mut counts = vec![0u64];
    let mut cur = false;
    for x in 0..m[0].len() {
        for row in m {
            if row[x] != cur {
                counts.push(0);
                cur = row[x];
            }
            *counts.last_mut().unwrap() += 1;
        }
    }
    counts
}
