use proptest::prelude::*;
use rand::Rng;
use rdmi::rng::StreamKey;
use rdmi::varinfl::{continuous_inflation, full_variance, missing_variance, relative_variance_increase, GroupCounts};

fn g(n1: f64, n2: f64, n3: f64, p1: f64, p2: f64) -> GroupCounts {
    GroupCounts { n1, n2, n3, p1, p2 }
}

/// The increase written from the two variance expressions directly, with
/// v = p (1 - p):
/// full    = (n1 v1 + (n2 + n3) v2) / n^2
/// missing = (n1 v1 + (n2 + n3)^2 v2 / n2) / n^2
fn from_variances(c: &GroupCounts) -> f64 {
    let (v1, v2) = (c.p1 * (1.0 - c.p1), c.p2 * (1.0 - c.p2));
    let n = c.n1 + c.n2 + c.n3;
    let full = (c.n1 * v1 + (c.n2 + c.n3) * v2) / (n * n);
    let missing = (c.n1 * v1 + (c.n2 + c.n3).powi(2) * v2 / c.n2) / (n * n);
    (missing - full) / full
}

#[test]
fn identity_holds_on_a_random_grid() {
    let mut rng = StreamKey::root(6).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let c = g(
            rng.random_range(0.0..2000.0f64).round(),
            rng.random_range(1.0..500.0f64).round(),
            rng.random_range(0.0..500.0f64).round(),
            rng.random_range(0.01..0.99),
            rng.random_range(0.01..0.99),
        );
        let r = relative_variance_increase(&c).unwrap();
        let oracle = from_variances(&c);
        let lib = (missing_variance(&c).unwrap() - full_variance(&c).unwrap()) / full_variance(&c).unwrap();
        let err = ((r - oracle).abs() / oracle.abs().max(1.0)).max((r - lib).abs() / lib.abs().max(1.0));
        worst = worst.max(err);
    }
    assert!(worst <= 1e-12, "worst relative error {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn equal_rates_reduce_to_the_continuous_formula(
        n1 in 0u32..5000, n2 in 1u32..2000, n3 in 0u32..2000, p in 0.001f64..0.999,
    ) {
        let (n1, n2, n3) = (f64::from(n1), f64::from(n2), f64::from(n3));
        let r = relative_variance_increase(&g(n1, n2, n3, p, p)).unwrap();
        prop_assert_eq!(r, continuous_inflation(n1 + n2 + n3, n2, n3));
    }

    #[test]
    fn more_missing_means_more_inflation(
        total in 10u32..3000, n3 in 0u32..500, extra in 1u32..100, p1 in 0.01f64..0.99, p2 in 0.01f64..0.99,
    ) {
        // n1 + n2 fixed; n3 grows.
        let n1 = f64::from(total / 2);
        let n2 = f64::from(total - total / 2).max(1.0);
        let a = relative_variance_increase(&g(n1, n2, f64::from(n3), p1, p2)).unwrap();
        let b = relative_variance_increase(&g(n1, n2, f64::from(n3 + extra), p1, p2)).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn more_retrieved_dropouts_mean_less_inflation(
        n1 in 0u32..3000, n2 in 1u32..500, n3 in 1u32..500, extra in 1u32..100, p1 in 0.01f64..0.99, p2 in 0.01f64..0.99,
    ) {
        let (n1, n3) = (f64::from(n1), f64::from(n3));
        let a = relative_variance_increase(&g(n1, f64::from(n2), n3, p1, p2)).unwrap();
        let b = relative_variance_increase(&g(n1, f64::from(n2 + extra), n3, p1, p2)).unwrap();
        prop_assert!(b < a);
    }
}
