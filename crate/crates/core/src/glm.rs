//! Weighted binary logistic regression by Newton/IRLS, pseudo-observation
//! augmentation against perfect prediction, and approximate posterior draws
//! of the coefficients.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("IRLS did not converge in {iterations} iterations")]
    NonConverged { iterations: usize },
    #[error("normal-equations matrix is singular")]
    RankDeficient,
    #[error("covariance matrix has no Cholesky factor")]
    CholeskyFailure,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
}

/// Rows of covariates (first column is the intercept), 0/1 outcomes and
/// non-negative case weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    ncols: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(ncols: usize) -> Self {
        DesignMatrix { ncols, x: Vec::new(), y: Vec::new(), w: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>], y: &[bool], w: &[f64]) -> Result<Self, GlmError> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.len() != y.len() || rows.len() != w.len() {
            return Err(GlmError::InvalidDesign(format!(
                "{} rows, {} outcomes, {} weights",
                rows.len(),
                y.len(),
                w.len()
            )));
        }
        let mut dm = DesignMatrix::new(ncols);
        for ((r, &yi), &wi) in rows.iter().zip(y).zip(w) {
            if r.len() != ncols {
                return Err(GlmError::DimensionMismatch { expected: ncols, got: r.len() });
            }
            if !r.iter().all(|v| v.is_finite()) || !wi.is_finite() || wi < 0.0 {
                return Err(GlmError::InvalidDesign("non-finite entry or negative weight".into()));
            }
            dm.push(r, yi, wi);
        }
        Ok(dm)
    }

    /// Appends a row; callers guarantee `row.len() == ncols`.
    pub fn push(&mut self, row: &[f64], y: bool, weight: f64) {
        debug_assert_eq!(row.len(), self.ncols);
        self.x.extend_from_slice(row);
        self.y.push(if y { 1.0 } else { 0.0 });
        self.w.push(weight);
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn outcome(&self, i: usize) -> bool {
        self.y[i] == 1.0
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.w[i]
    }

    pub fn total_weight(&self) -> f64 {
        self.w.iter().sum()
    }

    /// Merges rows with identical covariates and outcome, summing weights.
    /// Rows come out in a canonical order, so the result does not depend on
    /// the input row order.
    pub fn collapse(&self) -> DesignMatrix {
        let mut idx: Vec<usize> = (0..self.nrows()).filter(|&i| self.w[i] > 0.0).collect();
        let key_cmp = |a: &usize, b: &usize| -> Ordering {
            self.row(*a)
                .iter()
                .zip(self.row(*b))
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
                .then(self.y[*a].total_cmp(&self.y[*b]))
        };
        idx.sort_by(key_cmp);
        // Weights of merged rows are summed in sorted-weight order so that
        // the total does not depend on the input order either.
        let mut out = DesignMatrix::new(self.ncols);
        let mut start = 0;
        while start < idx.len() {
            let mut end = start + 1;
            while end < idx.len() && key_cmp(&idx[start], &idx[end]).is_eq() {
                end += 1;
            }
            let mut ws: Vec<f64> = idx[start..end].iter().map(|&i| self.w[i]).collect();
            ws.sort_by(f64::total_cmp);
            let i = idx[start];
            out.push(self.row(i), self.outcome(i), ws.iter().sum());
            start = end;
        }
        out
    }

    fn weighted_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.ncols;
        let total = self.total_weight();
        let mut mean = vec![0.0; k];
        for i in 0..self.nrows() {
            for (m, x) in mean.iter_mut().zip(self.row(i)) {
                *m += self.w[i] * x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        let mut var = vec![0.0; k];
        for i in 0..self.nrows() {
            for ((v, x), m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                *v += self.w[i] * (x - m) * (x - m);
            }
        }
        let sd = var.into_iter().map(|v| (v / total).sqrt()).collect();
        (mean, sd)
    }
}

/// Adds pseudo-observations that keep maximum-likelihood estimates finite
/// under complete or quasi-complete separation.
///
/// For every non-intercept column four rows are added: all covariates at
/// their weighted mean except the focal one, which sits one weighted SD
/// above or below its mean, each position once with outcome 1 and once with
/// outcome 0. An intercept-only design gets two rows at the mean instead.
/// The pseudo-rows share a total weight of `K` for `K` columns, one
/// observation's worth per parameter. The data rows come back collapsed.
pub fn augment(dm: &DesignMatrix) -> DesignMatrix {
    let k = dm.ncols();
    // Moments of the collapsed rows do not depend on the input row order.
    let mut out = dm.collapse();
    if out.nrows() == 0 {
        return out;
    }
    let (mean, sd) = out.weighted_moments();
    let mut centre = mean.clone();
    centre[0] = 1.0;
    let n_pseudo = if k == 1 { 2 } else { 4 * (k - 1) };
    let w = k as f64 / n_pseudo as f64;
    if k == 1 {
        out.push(&centre, true, w);
        out.push(&centre, false, w);
        return out;
    }
    let mut row = centre.clone();
    for col in 1..k {
        for shift in [sd[col], -sd[col]] {
            row[col] = mean[col] + shift;
            out.push(&row, true, w);
            out.push(&row, false, w);
        }
        row[col] = centre[col];
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    /// Convergence threshold on the weight-normalised score and on the
    /// relative coefficient change.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { tol: 1e-8, max_iter: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub coef: Vec<f64>,
    /// Inverse observed information at the estimate.
    pub cov: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_coef: f64,
}

impl FitResult {
    pub fn se(&self, k: usize) -> f64 {
        self.cov[(k, k)].sqrt()
    }
}

/// Logistic function, clamped to `[eps, 1 - eps]`.
pub fn expit(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

pub fn predict_prob(beta: &[f64], x: &[f64]) -> Result<f64, GlmError> {
    if beta.len() != x.len() {
        return Err(GlmError::DimensionMismatch { expected: beta.len(), got: x.len() });
    }
    Ok(expit(dot(beta, x)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Evaluation {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn evaluate(dm: &DesignMatrix, beta: &[f64]) -> Evaluation {
    let k = dm.ncols();
    let mut score = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    let mut loglik = 0.0;
    for i in 0..dm.nrows() {
        let x = dm.row(i);
        let w = dm.w[i];
        let eta = dot(beta, x);
        let p = expit(eta);
        let y = dm.y[i];
        // log(1 + e^eta) without overflow
        let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        loglik += w * (y * eta - softplus);
        let r = w * (y - p);
        let v = w * p * (1.0 - p);
        for a in 0..k {
            score[a] += r * x[a];
            for b in 0..=a {
                info[(a, b)] += v * x[a] * x[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    Evaluation { loglik, score, info }
}

/// Cholesky of `m + lambda * s * I` for `lambda` in `{0, 1e-12, ..., 1e-6}`,
/// where `s` is the mean diagonal entry.
fn cholesky_with_ridge(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let k = m.nrows();
    let scale = (m.trace() / k as f64).abs().max(f64::MIN_POSITIVE);
    std::iter::once(0.0)
        .chain((6..=12).rev().map(|e| 10f64.powi(-e)))
        .find_map(|lambda| {
            let mut a = m.clone();
            for i in 0..k {
                a[(i, i)] += lambda * scale;
            }
            a.cholesky()
        })
}

/// Maximises the weighted Bernoulli log-likelihood.
///
/// Newton steps with step halving; stops once the score divided by the
/// total weight, or the relative change in coefficients, drops below
/// `opts.tol`. Rows are collapsed first, so the result is invariant to row
/// order.
pub fn fit_logistic(dm: &DesignMatrix, opts: &FitOptions) -> Result<FitResult, GlmError> {
    let dm = dm.collapse();
    let k = dm.ncols();
    if k == 0 {
        return Err(GlmError::InvalidDesign("design has no columns".into()));
    }
    let total = dm.total_weight();
    if dm.nrows() == 0 || total <= 0.0 {
        return Err(GlmError::InvalidDesign("no rows with positive weight".into()));
    }
    let mut beta = vec![0.0; k];
    let mut eval = evaluate(&dm, &beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        // A small score still earns one more (quadratically convergent)
        // Newton step before stopping.
        let small_score = eval.score.amax() / total < opts.tol;
        iterations += 1;
        let chol = cholesky_with_ridge(&eval.info).ok_or(GlmError::RankDeficient)?;
        let step = chol.solve(&eval.score);
        let mut scale = 1.0;
        let mut trial;
        let mut trial_eval;
        loop {
            trial = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect::<Vec<_>>();
            trial_eval = evaluate(&dm, &trial);
            if trial_eval.loglik >= eval.loglik - 1e-12 * eval.loglik.abs() || scale < 1e-6 {
                break;
            }
            scale *= 0.5;
        }
        let change = trial.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let size = trial.iter().map(|b| b.abs()).fold(1.0, f64::max);
        beta = trial;
        eval = trial_eval;
        if small_score || change / size < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GlmError::NonConverged { iterations });
    }
    let chol = cholesky_with_ridge(&eval.info).ok_or(GlmError::RankDeficient)?;
    let cov = chol.inverse();
    let max_abs_coef = beta.iter().map(|b| b.abs()).fold(0.0, f64::max);
    Ok(FitResult { coef: beta, cov, converged, iterations, max_abs_coef })
}

/// Lower-triangular `L` with `L L^T = m` for a positive semi-definite `m`.
/// Pivots below a relative tolerance are treated as zero, so a zero matrix
/// factors to zero. Returns `None` when `m` is not PSD.
pub fn psd_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let eps = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)] - (0..j).map(|c| l[(j, c)] * l[(j, c)]).sum::<f64>();
        if d < -eps {
            return None;
        }
        if d <= eps {
            for i in j + 1..n {
                let r = m[(i, j)] - (0..j).map(|c| l[(i, c)] * l[(j, c)]).sum::<f64>();
                if r.abs() > 1e-8 * scale.max(f64::MIN_POSITIVE) {
                    return None;
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let r = m[(i, j)] - (0..j).map(|c| l[(i, c)] * l[(j, c)]).sum::<f64>();
            l[(i, j)] = r / ljj;
        }
    }
    Some(l)
}

/// Draws `beta* = beta_hat + L z` with `L L^T = V` and `z` standard normal.
/// A covariance that does not factor gets a diagonal jitter of up to 1e-6
/// of its mean diagonal before giving up.
pub fn draw_params<R: Rng + ?Sized>(fit: &FitResult, rng: &mut R) -> Result<Vec<f64>, GlmError> {
    if !fit.converged {
        return Err(GlmError::CholeskyFailure);
    }
    let k = fit.coef.len();
    let scale = (fit.cov.trace() / k as f64).abs();
    let l = std::iter::once(0.0)
        .chain((6..=12).rev().map(|e| 10f64.powi(-e)))
        .find_map(|lambda| {
            let mut a = fit.cov.clone();
            for i in 0..k {
                a[(i, i)] += lambda * scale;
            }
            psd_cholesky(&a)
        })
        .ok_or(GlmError::CholeskyFailure)?;
    let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    Ok((0..k).map(|i| fit.coef[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use approx::assert_relative_eq;

    /// `n0` rows at x=0 with `s0` successes and `n1` rows at x=1 with `s1`.
    fn two_groups(n0: usize, s0: usize, n1: usize, s1: usize) -> DesignMatrix {
        let mut dm = DesignMatrix::new(2);
        for i in 0..n0 {
            dm.push(&[1.0, 0.0], i < s0, 1.0);
        }
        for i in 0..n1 {
            dm.push(&[1.0, 1.0], i < s1, 1.0);
        }
        dm
    }

    fn separated() -> DesignMatrix {
        let mut dm = DesignMatrix::new(2);
        dm.push(&[1.0, -1.0], false, 1.0);
        dm.push(&[1.0, -0.5], false, 1.0);
        dm.push(&[1.0, 0.5], true, 1.0);
        dm.push(&[1.0, 1.0], true, 1.0);
        dm
    }

    #[test]
    fn saturated_two_by_two() {
        let fit = fit_logistic(&two_groups(100, 30, 100, 45), &FitOptions::default()).unwrap();
        let intercept = (30.0f64 / 70.0).ln();
        let slope = ((45.0f64 / 55.0) / (30.0 / 70.0)).ln();
        assert!((fit.coef[0] - intercept).abs() < 1e-8);
        assert!((fit.coef[1] - slope).abs() < 1e-8);
        assert!((slope - 0.6466).abs() < 1e-4);
        // Wald variance of a log odds ratio
        let var = 1.0 / 30.0 + 1.0 / 70.0 + 1.0 / 45.0 + 1.0 / 55.0;
        assert_relative_eq!(fit.cov[(1, 1)], var, max_relative = 1e-8);
    }

    #[test]
    fn equal_groups_have_zero_slope() {
        let fit = fit_logistic(&two_groups(80, 20, 120, 30), &FitOptions::default()).unwrap();
        assert!(fit.coef[1].abs() < 1e-10);
    }

    #[test]
    fn separation_without_augmentation_diverges() {
        match fit_logistic(&separated(), &FitOptions::default()) {
            Err(GlmError::NonConverged { .. }) => {}
            Ok(fit) => assert!(fit.max_abs_coef > 10.0, "{fit:?}"),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn separation_with_augmentation_is_finite() {
        let fit = fit_logistic(&augment(&separated()), &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.max_abs_coef < 10.0);
        assert!(fit.cov.clone().cholesky().is_some());
    }

    #[test]
    fn augmentation_counts_and_weights() {
        let dm = two_groups(10, 3, 10, 6);
        let aug = augment(&dm);
        let data_rows = dm.collapse().nrows();
        assert_eq!(aug.nrows(), data_rows + 4);
        assert_eq!(aug.total_weight(), dm.total_weight() + 2.0);
        let pseudo: f64 = (data_rows..aug.nrows()).map(|i| aug.weight(i)).sum();
        assert!((pseudo - 2.0).abs() < 1e-15);
        // a second pass adds another batch of weight
        assert!((augment(&aug).total_weight() - aug.total_weight() - 2.0).abs() < 1e-12);

        let mut wide = DesignMatrix::new(4);
        wide.push(&[1.0, 0.0, 1.0, 2.0], true, 1.0);
        wide.push(&[1.0, 1.0, 0.0, 3.0], false, 2.0);
        let aug = augment(&wide);
        assert_eq!(aug.nrows(), 2 + 12);
        let pseudo: f64 = (2..aug.nrows()).map(|i| aug.weight(i)).sum();
        assert!((pseudo - 4.0).abs() < 1e-15);
        assert!((2..aug.nrows()).all(|i| aug.row(i)[0] == 1.0));

        let mut intercept_only = DesignMatrix::new(1);
        intercept_only.push(&[1.0], true, 1.0);
        let aug = augment(&intercept_only);
        assert_eq!(aug.nrows(), 3);
        assert!((aug.weight(1) + aug.weight(2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predict_prob_identities() {
        assert_eq!(predict_prob(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert!((predict_prob(&[3f64.ln()], &[1.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(predict_prob(&[1.0], &[1.0, 2.0]), Err(GlmError::DimensionMismatch { .. })));
        let p = predict_prob(&[1000.0], &[1.0]).unwrap();
        assert!(p < 1.0 && p > 0.5);
        let p = predict_prob(&[-1000.0], &[1.0]).unwrap();
        assert!(p > 0.0 && p < 0.5);
    }

    #[test]
    fn row_loglik_gradient_matches_finite_differences() {
        let x = [1.0, 0.3, -1.2];
        let beta = [0.2, -0.7, 0.4];
        for y in [0.0, 1.0] {
            let ll = |b: &[f64]| {
                let p = predict_prob(b, &x).unwrap();
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            };
            let p = predict_prob(&beta, &x).unwrap();
            for k in 0..3 {
                let h = 1e-6;
                let mut up = beta;
                let mut dn = beta;
                up[k] += h;
                dn[k] -= h;
                let fd = (ll(&up) - ll(&dn)) / (2.0 * h);
                let analytic = (y - p) * x[k];
                assert!((fd - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3), "{fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn zero_covariance_draw_is_the_estimate() {
        let fit = FitResult {
            coef: vec![0.5, -1.0],
            cov: DMatrix::zeros(2, 2),
            converged: true,
            iterations: 1,
            max_abs_coef: 1.0,
        };
        let draw = draw_params(&fit, &mut StreamKey::root(3).rng()).unwrap();
        assert_eq!(draw, fit.coef);
    }

    #[test]
    fn draws_are_reproducible_and_match_the_covariance() {
        let fit = fit_logistic(&two_groups(60, 20, 60, 35), &FitOptions::default()).unwrap();
        let key = StreamKey::root(11);
        assert_eq!(draw_params(&fit, &mut key.rng()).unwrap(), draw_params(&fit, &mut key.rng()).unwrap());

        let mut rng = key.rng();
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| draw_params(&fit, &mut rng).unwrap()).collect();
        for a in 0..2 {
            let mean = draws.iter().map(|d| d[a]).sum::<f64>() / n as f64;
            assert!((mean - fit.coef[a]).abs() < 3.0 * (fit.cov[(a, a)] / n as f64).sqrt());
            for b in 0..2 {
                let mb = draws.iter().map(|d| d[b]).sum::<f64>() / n as f64;
                let c = draws.iter().map(|d| (d[a] - mean) * (d[b] - mb)).sum::<f64>() / (n - 1) as f64;
                let target = fit.cov[(a, b)];
                let scale = (fit.cov[(a, a)] * fit.cov[(b, b)]).sqrt();
                assert!((c - target).abs() < 0.1 * scale, "cov[{a},{b}] {c} vs {target}");
            }
        }
    }

    #[test]
    fn psd_cholesky_handles_rank_deficiency() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_cholesky(&m).unwrap();
        assert!((&l * l.transpose() - &m).amax() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_cholesky(&bad).is_none());
    }

    #[test]
    fn collapse_merges_duplicates() {
        let dm = two_groups(10, 3, 5, 5);
        let c = dm.collapse();
        assert_eq!(c.nrows(), 3);
        assert_eq!(c.total_weight(), 15.0);
    }

    #[test]
    fn invalid_designs() {
        assert!(DesignMatrix::from_rows(&[vec![1.0, f64::NAN]], &[true], &[1.0]).is_err());
        assert!(DesignMatrix::from_rows(&[vec![1.0]], &[true, false], &[1.0]).is_err());
        assert!(DesignMatrix::from_rows(&[vec![1.0]], &[true], &[-1.0]).is_err());
        assert!(fit_logistic(&DesignMatrix::new(2), &FitOptions::default()).is_err());
    }
}
