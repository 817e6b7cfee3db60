//! Analysis model on each completed dataset and Rubin's-rules pooling.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::dgm::{TrialDataset, VISITS};
use crate::glm::{fit_logistic, DesignMatrix, FitOptions, GlmError};
use crate::impute::CompletedDataset;
use crate::scenario::Arm;

/// Coefficients beyond this size mean the analysis data are (quasi-)separated.
pub const SEPARATION_LIMIT: f64 = 15.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("analysis fit failed: {0}")]
    Fit(#[from] GlmError),
    #[error("analysis model separated (|coef| = {0:.1})")]
    Separated(f64),
    #[error("need at least two imputations, got {0}")]
    TooFewImputations(usize),
    #[error("non-finite estimate or variance")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub point: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub total_var: f64,
    pub se: f64,
    /// Infinite when the imputations agree exactly.
    pub df: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub m_used: usize,
}

/// Above this df the Student-t quantile comes from its Cornish-Fisher
/// expansion in `1/df`; statrs' inverse CDF drifts for very large df.
const LARGE_DF: f64 = 1e4;

fn t_quantile(df: f64, p: f64) -> f64 {
    if df <= LARGE_DF {
        return StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(p);
    }
    let z = Normal::standard().inverse_cdf(p);
    if df.is_infinite() {
        return z;
    }
    let z2 = z * z;
    let g1 = z * (z2 + 1.0) / 4.0;
    let g2 = z * ((5.0 * z2 + 16.0) * z2 + 3.0) / 96.0;
    let g3 = z * (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) / 384.0;
    z + (g1 + (g2 + g3 / df) / df) / df
}

fn t_two_sided_p(df: f64, z: f64) -> f64 {
    let tail = if df.is_infinite() {
        Normal::standard().cdf(-z.abs())
    } else {
        StudentsT::new(0.0, 1.0, df).expect("df > 0").cdf(-z.abs())
    };
    (2.0 * tail).min(1.0)
}

impl PooledEstimate {
    /// Wald inference from a single analysis (no imputation).
    pub fn single(point: f64, variance: f64) -> PooledEstimate {
        Self::assemble(point, variance, 0.0, 1, f64::INFINITY)
    }

    fn assemble(point: f64, within: f64, between: f64, m: usize, df: f64) -> PooledEstimate {
        let total = within + (1.0 + 1.0 / m as f64) * between;
        let se = total.sqrt();
        let half = t_quantile(df, 0.975) * se;
        PooledEstimate {
            point,
            within_var: within,
            between_var: between,
            total_var: total,
            se,
            df,
            ci_low: point - half,
            ci_high: point + half,
            p_value: t_two_sided_p(df, point / se),
            m_used: m,
        }
    }

    pub fn halfwidth(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    /// Significant in favour of Active at one-sided 2.5%.
    pub fn favours_active(&self) -> bool {
        self.ci_low > 0.0
    }
}

/// Fits `logit P(Y3 = 1) = b0 + b1 [arm = Active] + b2 Y0` and returns
/// `(b1, Var b1)`.
pub fn analyze(data: &TrialDataset, cd: &CompletedDataset) -> Result<(f64, f64), PoolError> {
    analyze_outcomes(data.patients.iter().map(|p| p.arm).zip(cd.outcomes.iter().map(|y| (y[0], y[VISITS]))))
}

/// Same model on `(arm, (y0, y3))` pairs. The data are collapsed to the
/// eight arm by baseline by outcome cells before fitting.
pub fn analyze_outcomes(rows: impl IntoIterator<Item = (Arm, (u8, u8))>) -> Result<(f64, f64), PoolError> {
    let mut cells = [0.0f64; 8];
    for (arm, (y0, y3)) in rows {
        cells[usize::from(arm == Arm::Active) * 4 + usize::from(y0) * 2 + usize::from(y3)] += 1.0;
    }
    analyze_cells(&cells)
}

/// `cells[a*4 + y0*2 + y3]` counts with `a = 1` for Active.
pub fn analyze_cells(cells: &[f64; 8]) -> Result<(f64, f64), PoolError> {
    let mut dm = DesignMatrix::new(3);
    for (c, &w) in cells.iter().enumerate() {
        if w > 0.0 {
            let (a, y0, y3) = (c / 4, (c / 2) % 2, c % 2);
            dm.push(&[1.0, a as f64, y0 as f64], y3 == 1, w);
        }
    }
    let fit = fit_logistic(&dm, &FitOptions::default())?;
    if fit.max_abs_coef > SEPARATION_LIMIT {
        return Err(PoolError::Separated(fit.max_abs_coef));
    }
    let (b, v) = (fit.coef[1], fit.cov[(1, 1)]);
    if !b.is_finite() || !v.is_finite() || v <= 0.0 {
        return Err(PoolError::NonFinite);
    }
    Ok((b, v))
}

/// Combines per-imputation `(estimate, variance)` pairs by Rubin's rules
/// with the classic degrees of freedom.
pub fn rubin_pool(estimates: &[(f64, f64)]) -> Result<PooledEstimate, PoolError> {
    let m = estimates.len();
    if m < 2 {
        return Err(PoolError::TooFewImputations(m));
    }
    if estimates.iter().any(|(q, u)| !q.is_finite() || !u.is_finite()) {
        return Err(PoolError::NonFinite);
    }
    let mf = m as f64;
    // Centred on the first estimate so that identical estimates give B = 0
    // exactly.
    let q0 = estimates[0].0;
    let shift = estimates.iter().map(|e| e.0 - q0).sum::<f64>() / mf;
    let point = q0 + shift;
    let within = estimates.iter().map(|e| e.1).sum::<f64>() / mf;
    let between = estimates.iter().map(|e| (e.0 - q0 - shift).powi(2)).sum::<f64>() / (mf - 1.0);
    let inflated = (1.0 + 1.0 / mf) * between;
    let df = if inflated > 0.0 { (mf - 1.0) * (1.0 + within / inflated).powi(2) } else { f64::INFINITY };
    Ok(PooledEstimate::assemble(point, within, between, m, df))
}
