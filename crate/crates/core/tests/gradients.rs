mod common;

use common::TOL;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv3d_gradient_matches_finite_differences(seed in any::<u64>()) {
        let err = common::conv_check(seed);
        prop_assert!(err <= TOL, "relative error {err:e}");
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences(seed in any::<u64>()) {
        let err = common::pool_check(seed);
        prop_assert!(err <= TOL, "relative error {err:e}");
    }

    #[test]
    fn leaky_relu_gradient_matches_finite_differences(seed in any::<u64>()) {
        let err = common::leaky_check(seed);
        prop_assert!(err <= TOL, "relative error {err:e}");
    }

    #[test]
    fn network_gradient_matches_finite_differences(seed in any::<u64>()) {
        let err = common::network_check(seed);
        prop_assume!(err.is_some());
        let err = err.unwrap();
        prop_assert!(err <= TOL, "relative error {err:e}");
    }

    #[test]
    fn nll_gradient_matches_finite_differences(seed in any::<u64>()) {
        let err = common::nll_check(seed);
        prop_assert!(err <= TOL, "relative error {err:e}");
    }

    #[test]
    fn nll_gradient_has_closed_form(seed in any::<u64>()) {
        let dev = common::nll_closed_form_deviation(seed);
        prop_assert!(dev <= 1e-12, "deviation {dev:e}");
    }
}
