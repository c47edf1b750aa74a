mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: CASES, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn otsu_matches_brute_force(h in histogram()) {
        prop_otsu(&h)?;
    }

    #[test]
    fn tolerance_is_monotone((p, l, n) in ordinal_case()) {
        prop_tolerance_monotone(&p, &l, n)?;
    }

    #[test]
    fn mse_stays_in_unit_interval((p, l, n) in ordinal_case()) {
        prop_mse_unit(&p, &l, n)?;
    }

    #[test]
    fn bias_is_permutation_equivariant((c, w, perm) in bias_case()) {
        prop_bias_permutation(&c, &w, &perm)?;
    }

    #[test]
    fn bias_matches_oracle((c, w, _perm) in bias_case()) {
        prop_bias_oracle(&c, &w)?;
    }

    #[test]
    fn raising_threshold_never_adds_flags((c, w, _perm) in bias_case(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        prop_flag_monotone(&c, &w, a, b)?;
    }

    #[test]
    fn z_of_uniform_k(k in 2usize..=64) {
        prop_z_uniform(k)?;
    }

    #[test]
    fn loss_gradient_matches_finite_differences((t, tl, s, sl, a) in loss_case()) {
        prop_loss_gradient(&t, tl, &s, sl, a)?;
    }

    #[test]
    fn distribution_weights_are_normalized(h in color_histogram(), k in 1usize..=20) {
        prop_distribution_normalized(&h, k)?;
    }

    #[test]
    fn distribution_ignores_count_scaling(h in color_histogram(), k in 1usize..=20, f in 2u64..50) {
        prop_distribution_scaling(&h, k, f)?;
    }

    #[test]
    fn dominant_pixels_ignore_pixel_order((w, h, px, m, perm) in masked_image()) {
        prop_dominant_permutation(w, h, &px, &m, &perm)?;
    }
}
