use pass_core::bench::{dice, hd95, Mask};
use pass_core::prompts::topk_mask;
use pass_core::selfcheck::oracles::{brute_dice, brute_hd95, brute_topk_row};
use pass_core::shape::shape_descriptor;
use pass_core::tensor::{Graph, Tensor};
use pass_core::tta::{loss_class_ratio, loss_tent, MomentumSchedule};
use proptest::prelude::*;

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn dice_matches_counting_and_is_symmetric((a, b) in mask_pair()) {
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, brute_dice(&a, &b));
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hd95_matches_all_pairs_and_is_symmetric((a, b) in mask_pair()) {
        let h = hd95(&a, &b).unwrap();
        prop_assert_eq!(h, brute_hd95(&a, &b));
        prop_assert_eq!(h, hd95(&b, &a).unwrap());
        prop_assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn topk_matches_rank_oracle(
        row in prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.25, 0.5, 0.7, 1.0]), 1..20),
        k in 0.01f64..=1.0,
    ) {
        let keep = topk_mask(&row, 1, row.len(), k).unwrap();
        prop_assert_eq!(keep, brute_topk_row(&row, k));
    }

    #[test]
    fn momentum_decreases_to_its_floor(m0 in 0.1f64..1.0, omega in 0.0f64..0.99, c in 0.0f64..0.01) {
        let mut s = MomentumSchedule::new(m0, omega, c).unwrap();
        let floor = s.fixed_point();
        prop_assume!(m0 > floor);
        let mut prev = s.current;
        for _ in 0..50 {
            let m = s.step();
            // strictly decreasing until it lands on the floor in floating point
            prop_assert!(m < prev || (m - floor).abs() < 1e-15);
            prop_assert!(m >= floor - 1e-15);
            prev = m;
        }
    }

    #[test]
    fn unsupervised_losses_are_bounded(logits in prop::collection::vec(-30.0f64..30.0, 8), tau in 0.01f64..0.99) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 2, 2], logits).unwrap());
        let t = loss_tent(&mut g, x);
        let e = g.data(t)[0];
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&e));
        let r = loss_class_ratio(&mut g, x, &[tau, tau]).unwrap();
        prop_assert!(g.data(r)[0] >= 0.0);
    }

    #[test]
    fn translation_keeps_normalized_moments(
        (h0, w0) in (2usize..10, 2usize..10),
        (dy, dx) in (0usize..10, 0usize..10),
        seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut a = Mask::empty(24, 24);
        let mut b = Mask::empty(24, 24);
        for y in 0..h0 {
            for x in 0..w0 {
                if rand::Rng::random_bool(&mut rng, 0.6) {
                    a.set(y + 2, x + 2, true);
                    b.set(y + 2 + dy, x + 2 + dx, true);
                }
            }
        }
        let (da, db) = (shape_descriptor(&a), shape_descriptor(&b));
        prop_assert_eq!(da.empty, db.empty);
        for i in 3..6 {
            prop_assert!((da.values[i] - db.values[i]).abs() < 1e-12);
        }
    }
}
