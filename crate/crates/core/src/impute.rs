//! Sequential monotone multiple imputation of the policy outcome under the
//! five retrieved-dropout models.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgm::{TrialDataset, VISITS};
use crate::glm::{augment, draw_params, fit_logistic, predict_prob, DesignMatrix, FitOptions, FitResult, GlmError};
use crate::rng::StreamKey;
use crate::scenario::Arm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MiModel {
    /// No imputation: analyse the counterfactual-complete policy data.
    #[serde(rename = "FULL")]
    Full,
    #[serde(rename = "CICS")]
    Cics,
    #[serde(rename = "POOLED_OICS")]
    PooledOics,
    #[serde(rename = "OICS")]
    Oics,
    #[serde(rename = "OITS")]
    Oits,
    #[serde(rename = "PICS")]
    Pics,
}

impl MiModel {
    pub const ALL: [MiModel; 6] =
        [MiModel::Full, MiModel::Cics, MiModel::PooledOics, MiModel::Oics, MiModel::Oits, MiModel::Pics];

    pub fn label(self) -> &'static str {
        match self {
            MiModel::Full => "FULL",
            MiModel::Cics => "CICS",
            MiModel::PooledOics => "POOLED_OICS",
            MiModel::Oics => "OICS",
            MiModel::Oits => "OITS",
            MiModel::Pics => "PICS",
        }
    }

    /// Only POOLED_OICS fits across arms.
    pub fn is_pooled(self) -> bool {
        self == MiModel::PooledOics
    }

    pub fn slices(self) -> &'static [Slice] {
        if self.is_pooled() {
            &[Slice::Pooled]
        } else {
            &[Slice::Arm(Arm::Active), Slice::Arm(Arm::Control)]
        }
    }

    pub(crate) fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for MiModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MiModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', ' '], "_");
        MiModel::ALL
            .into_iter()
            .find(|m| m.label() == norm)
            .ok_or_else(|| format!("unknown model `{s}` (expected one of FULL, CICS, POOLED_OICS, OICS, OITS, PICS)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slice {
    Arm(Arm),
    Pooled,
}

impl Slice {
    fn contains(self, arm: Arm) -> bool {
        match self {
            Slice::Arm(a) => a == arm,
            Slice::Pooled => true,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Slice::Arm(a) => a.tag(),
            Slice::Pooled => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    Intercept,
    /// `D_j`
    OffTreatment,
    /// Visits since the IE, 0 while on treatment.
    TimeSinceIe,
    /// IE at the given visit.
    Pattern(usize),
    /// Outcome at an earlier visit.
    Outcome(usize),
}

impl Column {
    /// Indicator columns whose levels must be supported by observed rows.
    /// Time since the IE is a continuous covariate and is simply dropped
    /// when constant, like an earlier outcome.
    fn is_structural(self) -> bool {
        matches!(self, Column::OffTreatment | Column::Pattern(_))
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Intercept => f.write_str("intercept"),
            Column::OffTreatment => f.write_str("D"),
            Column::TimeSinceIe => f.write_str("time"),
            Column::Pattern(k) => write!(f, "disc@{k}"),
            Column::Outcome(k) => write!(f, "Y{k}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImputeError {
    #[error("visit {visit}: no observed row supports {column}")]
    EmptyCell { visit: usize, column: String },
    #[error("visit {visit}: {source}")]
    Fit { visit: usize, source: GlmError },
    #[error("missing data is not monotone for patient {id}")]
    NonMonotone { id: u32 },
}

impl ImputeError {
    /// Short machine-readable reason, used in replicate logs.
    pub fn reason(&self) -> &'static str {
        match self {
            ImputeError::EmptyCell { .. } => "empty_cell",
            ImputeError::Fit { source: GlmError::NonConverged { .. }, .. } => "non_converged",
            ImputeError::Fit { source: GlmError::RankDeficient, .. } => "rank_deficient",
            ImputeError::Fit { source: GlmError::CholeskyFailure, .. } => "cholesky_failure",
            ImputeError::Fit { .. } => "invalid_design",
            ImputeError::NonMonotone { .. } => "non_monotone",
        }
    }
}

/// Regression design for one visit and slice: rows with an observed outcome
/// to fit on, and covariates of the rows to fill.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub visit: usize,
    pub columns: Vec<Column>,
    pub fit: DesignMatrix,
    pub impute_rows: Vec<Vec<f64>>,
    /// Indices into `TrialDataset::patients`, aligned with `impute_rows`.
    pub impute_ids: Vec<usize>,
}

fn columns(model: MiModel, visit: usize) -> Vec<Column> {
    let mut cols = vec![Column::Intercept];
    match model {
        MiModel::Full | MiModel::Cics => {}
        MiModel::PooledOics | MiModel::Oics => cols.push(Column::OffTreatment),
        MiModel::Oits => cols.extend([Column::TimeSinceIe, Column::OffTreatment]),
        MiModel::Pics => cols.extend((1..=visit).map(Column::Pattern)),
    }
    cols.extend((0..visit).map(Column::Outcome));
    cols
}

/// Builds the regression design of `model` at `visit` within `slice`.
///
/// `current` holds each patient's outcomes with every visit before `visit`
/// already filled; entries at missing visits are ignored.
pub fn build_design(
    model: MiModel,
    data: &TrialDataset,
    current: &[[u8; 4]],
    visit: usize,
    slice: Slice,
) -> Design {
    assert!((1..=VISITS).contains(&visit), "visit {visit} out of range");
    let cols = columns(model, visit);
    let mut fit = DesignMatrix::new(cols.len());
    let mut impute_rows = Vec::new();
    let mut impute_ids = Vec::new();
    for (i, p) in data.patients.iter().enumerate() {
        if !slice.contains(p.arm) {
            continue;
        }
        let row: Vec<f64> = cols
            .iter()
            .map(|c| match *c {
                Column::Intercept => 1.0,
                Column::OffTreatment => f64::from(p.ie_indicator(visit)),
                Column::TimeSinceIe => f64::from(p.time_since_ie(visit)),
                Column::Pattern(k) => f64::from(p.ie_visit == Some(k as u8)),
                Column::Outcome(k) => f64::from(current[i][k]),
            })
            .collect();
        if p.observed(visit) {
            fit.push(&row, p.policy(visit) == 1, 1.0);
        } else {
            impute_rows.push(row);
            impute_ids.push(i);
        }
    }
    Design { visit, columns: cols, fit, impute_rows, impute_ids }
}

impl Design {
    /// Drops columns that are constant over the fit rows. An IE or pattern
    /// indicator that is constant there while an imputed row needs another
    /// level has no data to estimate it from.
    pub fn prune(self) -> Result<Design, ImputeError> {
        let Design { visit, columns, fit, impute_rows, impute_ids } = self;
        let mut keep = vec![0];
        for (c, col) in columns.iter().enumerate().skip(1) {
            let first = (0..fit.nrows()).map(|i| fit.row(i)[c]).next();
            let constant = first.is_none_or(|v| (0..fit.nrows()).all(|i| fit.row(i)[c] == v));
            if !constant {
                keep.push(c);
                continue;
            }
            if col.is_structural() && impute_rows.iter().any(|r| Some(r[c]) != first) {
                return Err(ImputeError::EmptyCell { visit, column: col.to_string() });
            }
        }
        if keep.len() == columns.len() {
            return Ok(Design { visit, columns, fit, impute_rows, impute_ids });
        }
        let select = |row: &[f64]| keep.iter().map(|&c| row[c]).collect::<Vec<f64>>();
        let mut pruned = DesignMatrix::new(keep.len());
        for i in 0..fit.nrows() {
            pruned.push(&select(fit.row(i)), fit.outcome(i), fit.weight(i));
        }
        Ok(Design {
            visit,
            columns: keep.iter().map(|&c| columns[c]).collect(),
            fit: pruned,
            impute_rows: impute_rows.iter().map(|r| select(r)).collect(),
            impute_ids,
        })
    }
}

/// One completed copy of a trial's policy outcomes, aligned with
/// `TrialDataset::patients`. Index 0 of each row is the baseline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompletedDataset {
    /// 1-based imputation index.
    pub imputation: usize,
    pub outcomes: Vec<[u8; 4]>,
}

impl CompletedDataset {
    /// Writes rows in the dataset dump layout with a trailing `imputation`
    /// column; `y_policy` holds the completed value.
    pub fn write_csv<W: std::io::Write>(&self, data: &TrialDataset, out: W, header: bool) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record([
                "sim", "arm", "id", "visit", "y_on", "y_off", "d", "pattern", "y_policy", "observed", "imputation",
            ])?;
        }
        let sim = data.provenance.replicate.to_string();
        let m = self.imputation.to_string();
        for (p, y) in data.patients.iter().zip(&self.outcomes) {
            for visit in 0..=VISITS {
                let y_off = if visit == 0 { String::new() } else { p.y_off[visit - 1].to_string() };
                w.write_record([
                    sim.as_str(),
                    p.arm.label(),
                    &p.id.to_string(),
                    &visit.to_string(),
                    &p.y_on[visit].to_string(),
                    &y_off,
                    &p.ie_indicator(visit).to_string(),
                    &p.pattern().label(),
                    &y[visit].to_string(),
                    &u8::from(p.observed(visit)).to_string(),
                    &m,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Counterfactual-complete policy outcomes.
pub fn full_outcomes(data: &TrialDataset) -> Vec<[u8; 4]> {
    data.patients.iter().map(|p| [p.y_on[0], p.policy(1), p.policy(2), p.policy(3)]).collect()
}

fn check_monotone(data: &TrialDataset) -> Result<(), ImputeError> {
    match data.patients.iter().find(|p| p.withdrawal_visit.is_some_and(|w| w == 0)) {
        Some(p) => Err(ImputeError::NonMonotone { id: p.id }),
        None => Ok(()),
    }
}

struct VisitModel {
    design: Design,
    fit: Option<FitResult>,
}

/// Produces `m` completed datasets under `model`.
///
/// Visits are imputed in order, each from a logistic regression on the
/// rows observed at that visit with pseudo-observation augmentation.
/// Observed rows never depend on earlier imputations, so each visit and
/// slice is fitted once; every imputation draws its own coefficients and
/// outcomes from the stream `key / m / visit / slice`.
pub fn impute_sequential(
    data: &TrialDataset,
    model: MiModel,
    m: usize,
    key: StreamKey,
) -> Result<Vec<CompletedDataset>, ImputeError> {
    let full = full_outcomes(data);
    if model == MiModel::Full {
        return Ok(vec![CompletedDataset { imputation: 1, outcomes: full }]);
    }
    check_monotone(data)?;
    // Observed values only; missing cells are overwritten before use.
    let base: Vec<[u8; 4]> = data
        .patients
        .iter()
        .zip(&full)
        .map(|(p, y)| {
            let mut row = *y;
            for (v, cell) in row.iter_mut().enumerate() {
                if !p.observed(v) {
                    *cell = 0;
                }
            }
            row
        })
        .collect();

    let mut plan: Vec<Vec<VisitModel>> = Vec::with_capacity(VISITS);
    for visit in 1..=VISITS {
        let mut per_slice = Vec::new();
        for &slice in model.slices() {
            let design = build_design(model, data, &base, visit, slice).prune()?;
            let fit = if design.impute_ids.is_empty() {
                None
            } else {
                let aug = augment(&design.fit);
                Some(fit_logistic(&aug, &FitOptions::default()).map_err(|source| ImputeError::Fit { visit, source })?)
            };
            per_slice.push(VisitModel { design, fit });
        }
        plan.push(per_slice);
    }

    (1..=m)
        .map(|imp| {
            let mut outcomes = base.clone();
            let imp_key = key.child(imp as u64);
            for (v, per_slice) in plan.iter().enumerate() {
                let visit = v + 1;
                for (&slice, vm) in model.slices().iter().zip(per_slice) {
                    let Some(fit) = &vm.fit else { continue };
                    let mut rng = imp_key.child(visit as u64).child(slice.tag()).rng();
                    let beta = draw_params(fit, &mut rng).map_err(|source| ImputeError::Fit { visit, source })?;
                    for (row, &i) in vm.design.impute_rows.iter().zip(&vm.design.impute_ids) {
                        // Earlier visits may have been imputed in this pass.
                        let x = refresh(&vm.design.columns, row, &outcomes[i]);
                        let p = predict_prob(&beta, &x).map_err(|source| ImputeError::Fit { visit, source })?;
                        outcomes[i][visit] = u8::from(rng.random::<f64>() < p);
                    }
                }
            }
            Ok(CompletedDataset { imputation: imp, outcomes })
        })
        .collect()
}

fn refresh(columns: &[Column], row: &[f64], outcomes: &[u8; 4]) -> Vec<f64> {
    columns
        .iter()
        .zip(row)
        .map(|(c, &x)| match *c {
            Column::Outcome(k) => f64::from(outcomes[k]),
            _ => x,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgm::{simulate_trial, PatientRecord, Provenance};
    use crate::scenario::preset;

    fn key() -> StreamKey {
        StreamKey::root(99).child(crate::rng::tag::IMPUTE)
    }

    fn patient(id: u32, arm: Arm, ie: Option<u8>, wd: Option<u8>, y: u8) -> PatientRecord {
        PatientRecord { id, arm, y_on: [y, y, 1 - y, y], y_off: [1 - y, y, y], ie_visit: ie, withdrawal_visit: wd }
    }

    fn dataset(patients: Vec<PatientRecord>) -> TrialDataset {
        let n = patients.len() / 2;
        TrialDataset { patients, n_per_arm: n, provenance: Provenance { scenario_digest: 0, replicate: 0, master_seed: 0 } }
    }

    #[test]
    fn model_labels_round_trip() {
        for m in MiModel::ALL {
            assert_eq!(m.label().parse::<MiModel>().unwrap(), m);
        }
        assert_eq!("pooled-oics".parse::<MiModel>().unwrap(), MiModel::PooledOics);
        assert!("MAR".parse::<MiModel>().is_err());
    }

    #[test]
    fn design_columns_by_model() {
        let data = simulate_trial(&preset("base-disc30a20c-w70").unwrap(), 0).unwrap();
        let cur = full_outcomes(&data);
        let cols = |model, visit| build_design(model, &data, &cur, visit, Slice::Arm(Arm::Active)).columns;
        use Column::*;
        assert_eq!(cols(MiModel::Cics, 1), [Intercept, Outcome(0)]);
        assert_eq!(cols(MiModel::Cics, 3), [Intercept, Outcome(0), Outcome(1), Outcome(2)]);
        assert_eq!(cols(MiModel::Oics, 2), [Intercept, OffTreatment, Outcome(0), Outcome(1)]);
        assert_eq!(cols(MiModel::Oits, 1), [Intercept, TimeSinceIe, OffTreatment, Outcome(0)]);
        assert_eq!(cols(MiModel::Pics, 2), [Intercept, Pattern(1), Pattern(2), Outcome(0), Outcome(1)]);
        let pooled = build_design(MiModel::PooledOics, &data, &cur, 3, Slice::Pooled);
        assert_eq!(pooled.fit.nrows() + pooled.impute_rows.len(), 2 * data.n_per_arm);
        assert!(!pooled.columns.iter().any(|c| matches!(c, Column::Pattern(_))));
    }

    #[test]
    fn oits_time_covariate() {
        let data = dataset(vec![
            patient(0, Arm::Active, Some(1), None, 1),
            patient(1, Arm::Active, None, None, 0),
            patient(2, Arm::Active, Some(2), Some(3), 1),
            patient(3, Arm::Control, None, None, 1),
        ]);
        let d = build_design(MiModel::Oits, &data, &full_outcomes(&data), 3, Slice::Arm(Arm::Active));
        let t = d.columns.iter().position(|c| *c == Column::TimeSinceIe).unwrap();
        assert_eq!(d.fit.row(0)[t], 2.0);
        assert_eq!(d.fit.row(1)[t], 0.0);
        assert_eq!(d.impute_rows[0][t], 1.0);
        assert_eq!(d.impute_ids, [2]);
    }

    #[test]
    fn unsupported_pattern_is_empty_cell() {
        // the only visit-1 discontinuer is missing at visit 1
        let data = dataset(vec![
            patient(0, Arm::Active, Some(1), Some(1), 1),
            patient(1, Arm::Active, None, None, 0),
            patient(2, Arm::Active, None, None, 1),
            patient(3, Arm::Control, None, None, 1),
            patient(4, Arm::Control, None, None, 0),
            patient(5, Arm::Control, None, None, 1),
        ]);
        let err = impute_sequential(&data, MiModel::Pics, 2, key()).unwrap_err();
        assert_eq!(err, ImputeError::EmptyCell { visit: 1, column: "disc@1".into() });
        assert_eq!(err.reason(), "empty_cell");
        // CICS needs no pattern support
        assert!(impute_sequential(&data, MiModel::Cics, 2, key()).is_ok());
    }

    #[test]
    fn constant_time_column_is_dropped() {
        // every visit-1 discontinuer is missing at visit 2, so time is 0 in all fit rows
        let data = dataset(vec![
            patient(0, Arm::Active, Some(1), Some(2), 1),
            patient(1, Arm::Active, Some(2), None, 0),
            patient(2, Arm::Active, None, None, 1),
            patient(3, Arm::Active, None, None, 0),
            patient(4, Arm::Control, None, None, 1),
            patient(5, Arm::Control, None, None, 0),
        ]);
        let d = build_design(MiModel::Oits, &data, &full_outcomes(&data), 2, Slice::Arm(Arm::Active));
        let pruned = d.prune().unwrap();
        assert!(!pruned.columns.contains(&Column::TimeSinceIe));
        assert!(pruned.columns.contains(&Column::OffTreatment));
        assert!(impute_sequential(&data, MiModel::Oits, 2, key()).is_ok());
    }

    #[test]
    fn nothing_missing_gives_identical_copies() {
        let mut spec = preset("base-disc30a20c-w70").unwrap();
        spec.withdrawal_rate = 0.0;
        let data = simulate_trial(&spec, 3).unwrap();
        let full = full_outcomes(&data);
        for model in MiModel::ALL {
            let out = impute_sequential(&data, model, 4, key()).unwrap();
            assert_eq!(out.len(), if model == MiModel::Full { 1 } else { 4 });
            assert!(out.iter().all(|c| c.outcomes == full));
        }
    }

    #[test]
    fn cics_equals_oics_when_nobody_discontinues() {
        // missing data without IEs leaves D_j constant at 0
        let mut patients = Vec::new();
        for i in 0..40u32 {
            let arm = if i < 20 { Arm::Active } else { Arm::Control };
            let wd = (i % 5 == 0).then_some(2 + (i % 2) as u8);
            patients.push(patient(i, arm, None, wd, (i % 3 == 0) as u8));
        }
        let data = dataset(patients);
        let a = impute_sequential(&data, MiModel::Cics, 5, key()).unwrap();
        let b = impute_sequential(&data, MiModel::Oics, 5, key()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observed_values_are_never_altered() {
        let spec = preset("base-disc30a20c-w70").unwrap();
        for r in 0..5 {
            let data = simulate_trial(&spec, r).unwrap();
            let full = full_outcomes(&data);
            for model in &MiModel::ALL[1..] {
                // non-estimable cells have nothing to check
                let Ok(out) = impute_sequential(&data, *model, 3, key().child(model.tag())) else { continue };
                for c in &out {
                    for ((p, y), truth) in data.patients.iter().zip(&c.outcomes).zip(&full) {
                        for v in 0..=VISITS {
                            if p.observed(v) {
                                assert_eq!(y[v], truth[v]);
                            }
                            assert!(y[v] <= 1);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn imputations_differ_and_are_reproducible() {
        let data = simulate_trial(&preset("base-disc30a20c-w70").unwrap(), 1).unwrap();
        let a = impute_sequential(&data, MiModel::Oics, 3, key()).unwrap();
        let b = impute_sequential(&data, MiModel::Oics, 3, key()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].outcomes, a[1].outcomes);
        // first imputations agree regardless of how many are requested
        let c = impute_sequential(&data, MiModel::Oics, 1, key()).unwrap();
        assert_eq!(a[0], c[0]);
    }

    #[test]
    fn other_arm_order_does_not_matter() {
        let data = simulate_trial(&preset("base-disc30a20c-w70").unwrap(), 2).unwrap();
        let mut shuffled = data.clone();
        shuffled.patients[data.n_per_arm..].reverse();
        for model in [MiModel::Cics, MiModel::Oits, MiModel::Pics] {
            let a = impute_sequential(&data, model, 2, key()).unwrap();
            let b = impute_sequential(&shuffled, model, 2, key()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.outcomes[..data.n_per_arm], y.outcomes[..data.n_per_arm]);
            }
        }
    }

    #[test]
    fn csv_dump_has_imputation_column() {
        let data = simulate_trial(&preset("base-disc10a10c-w50-n50").unwrap(), 0).unwrap();
        let out = impute_sequential(&data, MiModel::Cics, 1, key()).unwrap();
        let mut buf = Vec::new();
        out[0].write_csv(&data, &mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sim,arm,id,visit,y_on,y_off,d,pattern,y_policy,observed,imputation\n"));
        assert_eq!(text.lines().count(), 1 + 100 * 4);
    }
}
