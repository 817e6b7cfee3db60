//! Variance inflation of a policy response proportion when part of the
//! post-IE outcomes is missing and imputed from retrieved dropouts.
//!
//! Group 1 completes on treatment (response `p1`); group 2 has an IE and is
//! observed at the endpoint, group 3 has an IE and is missing (both respond
//! with `p2`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarInflError {
    #[error("group sizes must be finite and non-negative")]
    InvalidCounts,
    #[error("response probabilities must lie strictly between 0 and 1")]
    InvalidProbability,
    #[error("no patients")]
    EmptyTrial,
    #[error("n2 must be positive: missing IE outcomes need retrieved dropouts to borrow from")]
    NoRetrievedDropouts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl GroupCounts {
    pub fn total(&self) -> f64 {
        self.n1 + self.n2 + self.n3
    }

    fn check(&self) -> Result<(), VarInflError> {
        if ![self.n1, self.n2, self.n3].iter().all(|n| n.is_finite() && *n >= 0.0) {
            return Err(VarInflError::InvalidCounts);
        }
        if ![self.p1, self.p2].iter().all(|p| *p > 0.0 && *p < 1.0) {
            return Err(VarInflError::InvalidProbability);
        }
        if self.total() == 0.0 {
            return Err(VarInflError::EmptyTrial);
        }
        Ok(())
    }

    fn check_retrieved(&self) -> Result<(), VarInflError> {
        self.check()?;
        if self.n2 == 0.0 {
            return Err(VarInflError::NoRetrievedDropouts);
        }
        Ok(())
    }
}

/// Expected policy response, `(n1 p1 + (n2 + n3) p2) / n`.
pub fn policy_proportion(g: &GroupCounts) -> Result<f64, VarInflError> {
    g.check()?;
    Ok((g.n1 * g.p1 + (g.n2 + g.n3) * g.p2) / g.total())
}

/// Variance of the estimated policy proportion with every outcome observed.
pub fn full_variance(g: &GroupCounts) -> Result<f64, VarInflError> {
    g.check()?;
    let n = g.total();
    Ok((g.n1 * g.p1 * (1.0 - g.p1) + (g.n2 + g.n3) * g.p2 * (1.0 - g.p2)) / (n * n))
}

/// Variance when group 3 is missing and its response is estimated from
/// group 2 alone.
pub fn missing_variance(g: &GroupCounts) -> Result<f64, VarInflError> {
    g.check_retrieved()?;
    let n = g.total();
    let off = g.n2 + g.n3;
    Ok((g.n1 * g.p1 * (1.0 - g.p1) + off * off * g.p2 * (1.0 - g.p2) / g.n2) / (n * n))
}

/// `n3 v2 (1 + n3/n2) / (n1 v1 + v2 (n2 + n3))` with `v = p(1-p)`.
///
/// Written with `v1/v2` so that `p1 == p2` gives
/// [`continuous_inflation`] bit for bit.
pub fn relative_variance_increase(g: &GroupCounts) -> Result<f64, VarInflError> {
    g.check_retrieved()?;
    let v1 = g.p1 * (1.0 - g.p1);
    let v2 = g.p2 * (1.0 - g.p2);
    Ok(g.n3 * (1.0 + g.n3 / g.n2) / (g.n1 * (v1 / v2) + g.n2 + g.n3))
}

/// Relative variance increase for a continuous endpoint,
/// `(n3 / n)(1 + n3 / n2)`.
pub fn continuous_inflation(n: f64, n2: f64, n3: f64) -> f64 {
    n3 * (1.0 + n3 / n2) / n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub pi_policy: f64,
    pub var_full: f64,
    pub var_missing: f64,
    pub absolute_increase: f64,
    pub relative_increase: f64,
}

pub fn report(g: &GroupCounts) -> Result<VarianceReport, VarInflError> {
    let var_full = full_variance(g)?;
    let var_missing = missing_variance(g)?;
    Ok(VarianceReport {
        pi_policy: policy_proportion(g)?,
        var_full,
        var_missing,
        absolute_increase: var_missing - var_full,
        relative_increase: relative_variance_increase(g)?,
    })
}
