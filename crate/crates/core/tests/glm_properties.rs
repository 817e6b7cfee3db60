use proptest::prelude::*;
use rdmi::glm::{augment, expit, fit_logistic, DesignMatrix, FitOptions, FitResult, GlmError};

type Row = (Vec<f64>, bool, f64);

/// Score of the weighted log-likelihood, computed directly.
fn score(rows: &[Row], beta: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; beta.len()];
    for (x, y, w) in rows {
        let p = expit(x.iter().zip(beta).map(|(a, b)| a * b).sum());
        for (sk, xk) in s.iter_mut().zip(x) {
            *sk += w * (f64::from(u8::from(*y)) - p) * xk;
        }
    }
    s
}

fn design(rows: &[Row]) -> DesignMatrix {
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
    let y: Vec<bool> = rows.iter().map(|r| r.1).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.2).collect();
    DesignMatrix::from_rows(&x, &y, &w).unwrap()
}

/// Rows with an intercept, two binary covariates and one small count, like
/// the imputation designs.
fn rows_strategy() -> impl Strategy<Value = Vec<Row>> {
    prop::collection::vec(
        (any::<bool>(), any::<bool>(), 0u8..3, any::<bool>(), 1u8..4),
        30..120,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(a, b, t, y, w)| (vec![1.0, f64::from(u8::from(a)), f64::from(u8::from(b)), f64::from(t)], y, f64::from(w)))
            .collect()
    })
}

fn fit(rows: &[Row]) -> Result<FitResult, GlmError> {
    fit_logistic(&augment(&design(rows)), &FitOptions::default())
}

/// Unaugmented fit, `None` when the data are (nearly) separated.
fn plain_fit(rows: &[Row]) -> Option<FitResult> {
    fit_logistic(&design(rows), &FitOptions::default()).ok().filter(|f| f.max_abs_coef < 10.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn converged_fits_have_small_score(rows in rows_strategy()) {
        let dm = augment(&design(&rows));
        let f = fit_logistic(&dm, &FitOptions::default()).unwrap();
        let aug: Vec<Row> = (0..dm.nrows()).map(|i| (dm.row(i).to_vec(), dm.outcome(i), dm.weight(i))).collect();
        let s = score(&aug, &f.coef);
        let worst = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(worst / dm.total_weight() < 1e-8, "score {worst}");
    }

    #[test]
    fn power_of_four_weight_scaling_is_exact(rows in rows_strategy(), e in -2i32..3) {
        let c = 4f64.powi(e);
        // Augmentation adds a fixed prior weight, so scaling is a property
        // of the plain fit.
        let scaled: Vec<Row> = rows.iter().map(|(x, y, w)| (x.clone(), *y, w * c)).collect();
        let a = plain_fit(&rows);
        prop_assume!(a.is_some());
        let (a, b) = (a.unwrap(), plain_fit(&scaled).unwrap());
        prop_assert_eq!(&a.coef, &b.coef);
        for (va, vb) in a.cov.iter().zip(b.cov.iter()) {
            prop_assert_eq!(*va / c, *vb);
        }
    }

    #[test]
    fn arbitrary_weight_scaling(rows in rows_strategy(), c in 0.01f64..100.0) {
        let scaled: Vec<Row> = rows.iter().map(|(x, y, w)| (x.clone(), *y, w * c)).collect();
        let a = plain_fit(&rows);
        prop_assume!(a.is_some());
        let (a, b) = (a.unwrap(), plain_fit(&scaled).unwrap());
        for (p, q) in a.coef.iter().zip(&b.coef) {
            prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()), "{p} vs {q}");
        }
        for (va, vb) in a.cov.iter().zip(b.cov.iter()) {
            prop_assert!((va / c - vb).abs() <= 1e-8 * (va / c).abs().max(1e-12));
        }
    }

    #[test]
    fn row_order_does_not_matter(rows in rows_strategy(), seed in any::<u64>()) {
        let mut shuffled = rows.clone();
        // Fisher-Yates with a tiny LCG; the permutation only needs to vary.
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (a, b) = (fit(&rows).unwrap(), fit(&shuffled).unwrap());
        prop_assert_eq!(a.coef, b.coef);
        prop_assert_eq!(a.cov, b.cov);
    }

    #[test]
    fn unit_weights_match_duplicated_rows(rows in rows_strategy()) {
        // A row of weight w is the same as w copies of weight one.
        let expanded: Vec<Row> = rows
            .iter()
            .flat_map(|(x, y, w)| std::iter::repeat_n((x.clone(), *y, 1.0), *w as usize))
            .collect();
        let a = fit_logistic(&design(&rows), &FitOptions::default());
        let b = fit_logistic(&design(&expanded), &FitOptions::default());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                for (p, q) in a.coef.iter().zip(&b.coef) {
                    prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
                }
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }
}

/// Datasets with a separating hyperplane: some covariate pattern predicts
/// the outcome perfectly.
fn separated_strategy() -> impl Strategy<Value = Vec<Row>> {
    (rows_strategy(), 0usize..4, any::<bool>(), any::<bool>()).prop_map(|(mut rows, col, quasi, flip)| {
        for r in rows.iter_mut() {
            let x = r.0[col];
            // Complete separation on `x > 0`, or quasi-complete: only the
            // positive side is pure.
            if x > 0.0 {
                r.1 = !flip;
            } else if !quasi {
                r.1 = flip;
            }
        }
        rows
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn augmentation_keeps_separated_fits_finite(rows in separated_strategy()) {
        let f = fit(&rows).unwrap();
        prop_assert!(f.converged);
        prop_assert!(f.coef.iter().all(|b| b.is_finite()));
        prop_assert!(f.cov.iter().all(|v| v.is_finite()));
        prop_assert!(f.max_abs_coef < 30.0, "{:?}", f.coef);
    }
}

#[test]
fn separated_fit_without_augmentation_runs_away() {
    let rows: Vec<Row> = (0..40)
        .map(|i| (vec![1.0, f64::from(i % 2)], i % 2 == 1, 1.0))
        .collect();
    match fit_logistic(&design(&rows), &FitOptions::default()) {
        Err(_) => {}
        Ok(f) => assert!(f.max_abs_coef > 15.0, "{:?}", f.coef),
    }
    assert!(fit(&rows).unwrap().max_abs_coef < 15.0);
}
