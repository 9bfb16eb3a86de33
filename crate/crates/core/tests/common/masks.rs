//! Random mask pairs covering the interesting regimes: overlapping blobs,
//! shifted copies, salt noise and empty masks.

#![allow(dead_code)]

use rand::{Rng, RngCore};

use super::oracle::Grid;

fn blob(rng: &mut dyn RngCore, h: usize, w: usize) -> Grid {
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let ry = rng.random_range(0.5..(h as f64 / 2.0).max(1.0));
    let rx = rng.random_range(0.5..(w as f64 / 2.0).max(1.0));
    let ellipse = rng.random_bool(0.5);
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if ellipse {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    }
                })
                .collect()
        })
        .collect()
}

fn noise(rng: &mut dyn RngCore, h: usize, w: usize, p: f64) -> Grid {
    (0..h).map(|_| (0..w).map(|_| rng.random_bool(p)).collect()).collect()
}

fn shifted(m: &Grid, dy: i64, dx: i64) -> Grid {
    let h = m.len() as i64;
    let w = m[0].len() as i64;
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (sy, sx) = (y - dy, x - dx);
                    sy >= 0 && sy < h && sx >= 0 && sx < w && m[sy as usize][sx as usize]
                })
                .collect()
        })
        .collect()
}

fn flip_some(rng: &mut dyn RngCore, m: &mut Grid, p: f64) {
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            if rng.random_bool(p) {
                *v = !*v;
            }
        }
    }
}

pub fn random_mask(rng: &mut dyn RngCore, h: usize, w: usize) -> Grid {
    match rng.random_range(0..10) {
        0 => vec![vec![false; w]; h],
        1 => {
            let p = rng.random_range(0.05..0.95);
            noise(rng, h, w, p)
        }
        _ => blob(rng, h, w),
    }
}

pub fn random_pair(rng: &mut dyn RngCore, h: usize, w: usize) -> (Grid, Grid) {
    let a = random_mask(rng, h, w);
    let b = match rng.random_range(0..4) {
        0 => random_mask(rng, h, w),
        1 => a.clone(),
        _ => {
            let mut b = shifted(&a, rng.random_range(-3..=3), rng.random_range(-3..=3));
            if rng.random_bool(0.5) {
                flip_some(rng, &mut b, 0.05);
            }
            b
        }
    };
    (a, b)
}
