//! `fixtures/rle.json` at the repository root is the shared corpus any RLE
//! client decodes against: each case pairs the wire form with its pixels as
//! row-major `0`/`1` strings. Set `PIXELRT_BLESS=1` to regenerate.

mod common;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use common::masks::random_mask;
use common::oracle::{self, Grid};
use common::suite::to_mask;
use pixelrt_core::mask::{decode_rle, encode_rle, RleMask};

#[derive(Serialize, Deserialize)]
struct Case {
    name: String,
    rle: RleMask,
    rows: Vec<String>,
}

fn path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/rle.json")
}

fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Grid {
    (0..h).map(|y| (0..w).map(|x| f(y, x)).collect()).collect()
}

fn rows(g: &Grid) -> Vec<String> {
    g.iter().map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect()).collect()
}

fn parse_rows(rows: &[String]) -> Grid {
    rows.iter().map(|r| r.chars().map(|c| c == '1').collect()).collect()
}

fn cases() -> Vec<(String, Grid)> {
    let mut out = vec![
        ("single_off".to_string(), grid(1, 1, |_, _| false)),
        ("single_on".to_string(), grid(1, 1, |_, _| true)),
        ("empty_4x6".to_string(), grid(4, 6, |_, _| false)),
        ("full_4x6".to_string(), grid(4, 6, |_, _| true)),
        ("first_pixel".to_string(), grid(5, 3, |y, x| y == 0 && x == 0)),
        ("last_pixel".to_string(), grid(5, 3, |y, x| y == 4 && x == 2)),
        ("checker_5x7".to_string(), grid(5, 7, |y, x| (y + x) % 2 == 0)),
        ("row_1x9".to_string(), grid(1, 9, |_, x| x % 3 != 0)),
        ("column_9x1".to_string(), grid(9, 1, |y, _| y >= 4)),
        ("right_column".to_string(), grid(6, 6, |_, x| x == 5)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..20 {
        let h = rng.random_range(1..24);
        let w = rng.random_range(1..24);
        out.push((format!("random_{k:02}"), random_mask(&mut rng, h, w)));
    }
    out
}

#[test]
fn shared_fixtures_match_the_codec() {
    let p = path();
    if std::env::var_os("PIXELRT_BLESS").is_some() {
        let fixtures: Vec<Case> = cases()
            .into_iter()
            .map(|(name, g)| Case {
                rle: encode_rle(&to_mask(&g)),
                rows: rows(&g),
                name,
            })
            .collect();
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(&p, serde_json::to_string_pretty(&fixtures).unwrap() + "\n").unwrap();
    }
    let text = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    let fixtures: Vec<Case> = serde_json::from_str(&text).unwrap();
    assert_eq!(fixtures.len(), cases().len());
    for c in &fixtures {
        let g = parse_rows(&c.rows);
        assert_eq!(c.rle.counts, oracle::rle_counts(&g), "{}: counts", c.name);
        assert_eq!(encode_rle(&to_mask(&g)), c.rle, "{}: encode", c.name);
        assert_eq!(decode_rle(&c.rle).unwrap(), to_mask(&g), "{}: decode", c.name);
    }
}
