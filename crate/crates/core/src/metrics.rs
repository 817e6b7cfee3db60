//! Performance measures over replicates, with Monte Carlo standard errors,
//! and the true estimand from a large oracle trial.

use serde::{Deserialize, Serialize};

use crate::dgm::{policy_cells, DgmError};
use crate::impute::MiModel;
use crate::pool::{analyze_cells, PooledEstimate};
use crate::rng::{tag, StreamKey};
use crate::scenario::ScenarioSpec;

/// Default oracle trial size per arm.
pub const ORACLE_N: usize = 5_000_000;

/// Outcome of one model on one replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub replicate: u64,
    pub model: MiModel,
    /// The pooled estimate, or why the cell was excluded.
    pub outcome: Result<PooledEstimate, String>,
}

impl RepResult {
    pub fn estimate(&self) -> Option<&PooledEstimate> {
        self.outcome.as_ref().ok()
    }

    /// Significant in favour of Active at one-sided 2.5%.
    pub fn significant_directional(&self) -> bool {
        self.estimate().is_some_and(PooledEstimate::favours_active)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueEffect {
    pub theta: f64,
    /// Standard error of the oracle fit, i.e. its Monte Carlo error.
    pub mcse: f64,
    pub oracle_n: usize,
}

/// Key of the oracle trial's streams.
pub fn oracle_key(master_seed: u64) -> StreamKey {
    StreamKey::root(master_seed).child(tag::ORACLE)
}

/// Only these parameters change the policy outcome distribution, so specs
/// that agree on them share an oracle.
pub fn oracle_digest(spec: &ScenarioSpec) -> u64 {
    let mut s = spec.clone();
    s.name.clear();
    s.n_per_arm = 0;
    s.withdrawal_rate = 0.0;
    s.n_sims = 0;
    s.n_imputations = 0;
    s.digest()
}

/// True conditional log odds ratio of the policy outcome at the final
/// visit, from a trial of `oracle_n` patients per arm without missing data.
pub fn true_log_or(spec: &ScenarioSpec, oracle_n: usize) -> Result<TrueEffect, DgmError> {
    let cells = policy_cells(spec, oracle_n, oracle_key(spec.master_seed))?;
    let (theta, var) = analyze_cells(&cells).expect("oracle trial is large enough to fit");
    Ok(TrueEffect { theta, mcse: var.sqrt(), oracle_n })
}

/// Performance of one model in one scenario. Percentages are in percent;
/// `None` marks a measure that is undefined for the cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub model: MiModel,
    pub n_sims: usize,
    pub n_fitted: usize,
    pub fitted_pct: f64,
    pub theta_true: f64,
    pub mean_estimate: Option<f64>,
    pub bias: Option<f64>,
    pub bias_mcse: Option<f64>,
    pub bias_pct: Option<f64>,
    pub bias_pct_mcse: Option<f64>,
    pub empirical_se: Option<f64>,
    pub empirical_se_mcse: Option<f64>,
    pub mean_model_se: Option<f64>,
    pub modse_rel_err_pct: Option<f64>,
    pub modse_rel_err_mcse: Option<f64>,
    pub coverage_pct: Option<f64>,
    pub coverage_mcse: Option<f64>,
    pub mean_halfwidth: Option<f64>,
    /// Against FULL over the replicates both models fitted.
    pub halfwidth_change_pct: Option<f64>,
    pub coverage_change_pct: Option<f64>,
    /// Coverage difference against FULL in percentage points.
    pub coverage_diff_pp: Option<f64>,
    /// Power, or the false positive rate in a null scenario.
    pub rejection_pct: Option<f64>,
    pub rejection_mcse: Option<f64>,
    pub null: bool,
}

impl SummaryRow {
    pub fn rejection_label(&self) -> &'static str {
        if self.null {
            "false_positive"
        } else {
            "power"
        }
    }
}

fn mean(x: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = x.len() as f64;
    x.sum::<f64>() / n
}

fn sd(x: &[f64]) -> f64 {
    let m = mean(x.iter().copied());
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

fn proportion(hits: usize, n: usize) -> (f64, f64) {
    let p = hits as f64 / n as f64;
    (100.0 * p, 100.0 * (p * (1.0 - p) / n as f64).sqrt())
}

/// Summarises one model's replicate results against the FULL results of
/// the same scenario.
pub fn summarize(
    scenario: &ScenarioSpec,
    results: &[RepResult],
    full: &[RepResult],
    truth: &TrueEffect,
) -> SummaryRow {
    let mut sorted: Vec<&RepResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.replicate);
    let fitted: Vec<(u64, &PooledEstimate)> =
        sorted.iter().filter_map(|r| r.estimate().map(|e| (r.replicate, e))).collect();
    let n = fitted.len();
    let theta = truth.theta;
    let model = results.first().map_or(MiModel::Full, |r| r.model);
    let mut row = SummaryRow {
        scenario: scenario.name.clone(),
        model,
        n_sims: scenario.n_sims,
        n_fitted: n,
        fitted_pct: 100.0 * n as f64 / scenario.n_sims.max(1) as f64,
        theta_true: theta,
        mean_estimate: None,
        bias: None,
        bias_mcse: None,
        bias_pct: None,
        bias_pct_mcse: None,
        empirical_se: None,
        empirical_se_mcse: None,
        mean_model_se: None,
        modse_rel_err_pct: None,
        modse_rel_err_mcse: None,
        coverage_pct: None,
        coverage_mcse: None,
        mean_halfwidth: None,
        halfwidth_change_pct: None,
        coverage_change_pct: None,
        coverage_diff_pp: None,
        rejection_pct: None,
        rejection_mcse: None,
        null: scenario.null,
    };
    if n == 0 {
        return row;
    }
    let points: Vec<f64> = fitted.iter().map(|(_, e)| e.point).collect();
    let ses: Vec<f64> = fitted.iter().map(|(_, e)| e.se).collect();
    let mean_point = mean(points.iter().copied());
    row.mean_estimate = Some(mean_point);
    row.bias = Some(mean_point - theta);
    row.mean_halfwidth = Some(mean(fitted.iter().map(|(_, e)| e.halfwidth())));
    let covered = fitted.iter().filter(|(_, e)| e.covers(theta)).count();
    let (c, c_se) = proportion(covered, n);
    row.coverage_pct = Some(c);
    row.coverage_mcse = Some(c_se);
    let (r, r_se) = proportion(fitted.iter().filter(|(_, e)| e.favours_active()).count(), n);
    row.rejection_pct = Some(r);
    row.rejection_mcse = Some(r_se);
    let mod_se = mean(ses.iter().copied());
    row.mean_model_se = Some(mod_se);

    if n >= 2 {
        let emp = sd(&points);
        let nf = n as f64;
        row.bias_mcse = Some(emp / nf.sqrt());
        row.empirical_se = Some(emp);
        row.empirical_se_mcse = Some(emp / (2.0 * (nf - 1.0)).sqrt());
        if emp > 0.0 {
            let ratio = mod_se / emp;
            row.modse_rel_err_pct = Some(100.0 * (ratio - 1.0));
            let se_var = sd(&ses).powi(2);
            let rel = se_var / (nf * mod_se * mod_se) + 1.0 / (2.0 * (nf - 1.0));
            row.modse_rel_err_mcse = Some(100.0 * ratio * rel.sqrt());
        }
        if !scenario.null && theta != 0.0 {
            row.bias_pct = Some(100.0 * (mean_point - theta) / theta);
            row.bias_pct_mcse = Some(100.0 * emp / nf.sqrt() / theta.abs());
        }
    }

    // Changes against FULL use only replicates where both were fitted.
    let full_by_rep: std::collections::HashMap<u64, &PooledEstimate> =
        full.iter().filter_map(|r| r.estimate().map(|e| (r.replicate, e))).collect();
    let matched: Vec<(&PooledEstimate, &PooledEstimate)> =
        fitted.iter().filter_map(|(rep, e)| full_by_rep.get(rep).map(|f| (*e, *f))).collect();
    if !matched.is_empty() {
        let m = matched.len();
        let hw = mean(matched.iter().map(|(e, _)| e.halfwidth()));
        let hw_full = mean(matched.iter().map(|(_, f)| f.halfwidth()));
        row.halfwidth_change_pct = Some(100.0 * (hw / hw_full - 1.0));
        let cov = matched.iter().filter(|(e, _)| e.covers(theta)).count() as f64 / m as f64;
        let cov_full = matched.iter().filter(|(_, f)| f.covers(theta)).count() as f64 / m as f64;
        if cov_full > 0.0 {
            row.coverage_change_pct = Some(100.0 * (cov / cov_full - 1.0));
        }
        row.coverage_diff_pp = Some(100.0 * (cov - cov_full));
    }
    row
}
