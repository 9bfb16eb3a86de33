mod common;

use common::masks::random_mask;
use common::oracle::{self, Grid};
use common::suite::{metric_suite, rle_fuzz, to_mask};
use pixelrt_core::mask::{aggregate_iou, box_iou, contour_accuracy_f, decode_rle, encode_rle, region_similarity_j, BoundingBox, RleMask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_brute_force_on_200_pairs() {
    metric_suite(200, 2024).unwrap();
}

#[test]
fn shifted_square_f_matches_distance_matrix() {
    let sq = |off: usize| -> Grid {
        (0..32).map(|y| (0..32).map(|x| (10..13).contains(&y) && (10 + off..13 + off).contains(&x)).collect()).collect()
    };
    let (a, b) = (sq(0), sq(1));
    let f = contour_accuracy_f(&to_mask(&a), &to_mask(&b)).unwrap();
    assert_eq!(f, oracle::f(&a, &b));
    assert_eq!(f, 1.0);
}

#[test]
fn aggregate_example() {
    let (c, g) = aggregate_iou(&[(2, 4), (6, 6)]).unwrap();
    assert!((c - 0.8).abs() < 1e-12);
    assert!((g - 0.75).abs() < 1e-12);
}

#[test]
fn rle_fuzz_10k() {
    rle_fuzz(10_000, 99).unwrap();
}

fn grid_strategy() -> impl Strategy<Value = Grid> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| prop::collection::vec(prop::collection::vec(any::<bool>(), w), h))
}

proptest! {
    #[test]
    fn rle_round_trip(g in grid_strategy()) {
        let m = to_mask(&g);
        let rle = encode_rle(&m);
        prop_assert_eq!(rle.area() as usize, m.area());
        let json = serde_json::to_string(&rle).unwrap();
        let back: RleMask = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(decode_rle(&back).unwrap(), m);
    }

    #[test]
    fn rle_rejects_wrong_totals(g in grid_strategy(), extra in 1u64..5) {
        let mut rle = encode_rle(&to_mask(&g));
        *rle.counts.last_mut().unwrap() += extra;
        prop_assert!(decode_rle(&rle).is_err());
    }

    #[test]
    fn j_and_f_are_bounded_and_symmetric(a in grid_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_mask(&mut rng, a.len(), a[0].len());
        let (ma, mb) = (to_mask(&a), to_mask(&b));
        let j = region_similarity_j(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, region_similarity_j(&mb, &ma).unwrap());
        let f = contour_accuracy_f(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(region_similarity_j(&ma, &ma).unwrap(), 1.0);
        prop_assert_eq!(contour_accuracy_f(&ma, &ma).unwrap(), 1.0);
    }

    #[test]
    fn box_iou_bounded(x1 in 0usize..10, y1 in 0usize..10, w in 0usize..6, h in 0usize..6,
                       x2 in 0usize..10, y2 in 0usize..10, w2 in 0usize..6, h2 in 0usize..6) {
        let a = BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap();
        let b = BoundingBox::new(x2, y2, x2 + w2, y2 + h2).unwrap();
        let v = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, oracle::box_iou((x1, y1, x1 + w, y1 + h), (x2, y2, x2 + w2, y2 + h2)));
    }
}
