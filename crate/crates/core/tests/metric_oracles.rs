mod common;

use common::{boundary_iou_oracle, contour_f_oracle, iou_oracle, metric_oracle_checks, random_mask, report};
use finemask::metrics::{boundary_iou, contour_f, iou, jf_score, BinaryMask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_agree_with_brute_force_oracles() {
    let checks = metric_oracle_checks();
    report(&checks);
    for c in &checks {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn single_pixel_and_full_canvas() {
    let dot = BinaryMask::new(3, 3, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap();
    let full = BinaryMask::new(3, 3, vec![1; 9]).unwrap();
    assert_eq!(iou(&dot, &full).unwrap(), 1.0 / 9.0);
    assert_eq!(boundary_iou(&dot, &full, 1).unwrap(), boundary_iou_oracle(&dot, &full, 1));
    assert_eq!(contour_f(&dot, &full, 1).unwrap(), contour_f_oracle(&dot, &full, 1));
}

#[test]
fn jf_of_identical_sequences_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq: Vec<BinaryMask> = (0..4).map(|_| random_mask(&mut rng, 12, 12)).collect();
    let s = jf_score(&seq, &seq).unwrap();
    assert_eq!((s.j, s.f), (1.0, 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), h in 1usize..14, w in 1usize..14, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut rng, h, w);
        let b = random_mask(&mut rng, h, w);
        for (x, y) in [(iou(&a, &b).unwrap(), iou(&b, &a).unwrap()), (boundary_iou(&a, &b, d).unwrap(), boundary_iou(&b, &a, d).unwrap()), (contour_f(&a, &b, d).unwrap(), contour_f(&b, &a, d).unwrap())] {
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(boundary_iou(&a, &a, d).unwrap(), 1.0);
        prop_assert_eq!(contour_f(&a, &a, d).unwrap(), 1.0);
        prop_assert_eq!(iou(&a, &b).unwrap(), iou_oracle(&a, &b));
    }
}
