use serde::Serialize;

use rdmi::dgm::VISITS;
use rdmi::impute::MiModel;
use rdmi::study::{run_scenario, Workers};
use rdmi::varinfl::{relative_variance_increase, GroupCounts};
use rdmi::{preset, simulate_trial, Arm};

/// Size of the oracle trial in the browser; large enough for a demo.
pub const DEMO_ORACLE_N: usize = 200_000;
pub const MAX_SIMS: usize = 200;

pub fn preset_names() -> String {
    serde_json::to_string(&rdmi::preset_names()).unwrap()
}

#[derive(Serialize, Debug, PartialEq)]
pub struct VisitCounts {
    pub visit: usize,
    pub on_treatment: usize,
    /// Off treatment and still observed (retrieved dropouts).
    pub retrieved: usize,
    pub missing: usize,
    /// Observed policy response rate, in percent.
    pub observed_response_pct: f64,
}

#[derive(Serialize, Debug)]
pub struct ArmProfile {
    pub arm: &'static str,
    pub visits: Vec<VisitCounts>,
}

pub fn trial_profile(name: &str, replicate: u64) -> Result<String, String> {
    let spec = preset(name).map_err(|e| e.to_string())?;
    let data = simulate_trial(&spec, replicate).map_err(|e| e.to_string())?;
    let arms: Vec<ArmProfile> = Arm::BOTH
        .iter()
        .map(|&arm| ArmProfile {
            arm: arm.label(),
            visits: (1..=VISITS)
                .map(|j| {
                    let mut c = VisitCounts { visit: j, on_treatment: 0, retrieved: 0, missing: 0, observed_response_pct: 0.0 };
                    let mut responders = 0;
                    for p in data.arm(arm) {
                        match p.observed_policy(j) {
                            None => c.missing += 1,
                            Some(y) => {
                                responders += usize::from(y);
                                if p.ie_indicator(j) == 1 {
                                    c.retrieved += 1;
                                } else {
                                    c.on_treatment += 1;
                                }
                            }
                        }
                    }
                    let seen = c.on_treatment + c.retrieved;
                    if seen > 0 {
                        c.observed_response_pct = 100.0 * responders as f64 / seen as f64;
                    }
                    c
                })
                .collect(),
        })
        .collect();
    serde_json::to_string(&arms).map_err(|e| e.to_string())
}

#[derive(Serialize, Debug, PartialEq)]
pub struct CurvePoint {
    pub missing_share: f64,
    pub relative_increase: f64,
}

/// `missing_share` runs over (0, 1): the fraction of IE patients whose
/// outcome is missing. The last point is left out since nobody would be
/// left to impute from.
pub fn variance_inflation_curve(n: f64, ie_share: f64, p1: f64, p2: f64, points: usize) -> Result<String, String> {
    if !(ie_share > 0.0 && ie_share < 1.0) {
        return Err("ie_share must lie in (0, 1)".into());
    }
    if !(2..=1000).contains(&points) {
        return Err("points must lie in 2..=1000".into());
    }
    let ie = n * ie_share;
    let curve = (0..points)
        .map(|i| {
            let missing_share = i as f64 / points as f64;
            let n3 = ie * missing_share;
            let g = GroupCounts { n1: n - ie, n2: ie - n3, n3, p1, p2 };
            relative_variance_increase(&g)
                .map(|r| CurvePoint { missing_share, relative_increase: r })
                .map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    serde_json::to_string(&curve).map_err(|e| e.to_string())
}

#[derive(Serialize, Debug)]
pub struct StudyRow {
    pub model: MiModel,
    pub fitted_pct: f64,
    pub mean_estimate: Option<f64>,
    pub bias_pct: Option<f64>,
    pub empirical_se: Option<f64>,
    pub mean_model_se: Option<f64>,
    pub coverage_pct: Option<f64>,
}

#[derive(Serialize, Debug)]
pub struct StudyResult {
    pub scenario: String,
    pub theta_true: f64,
    pub rows: Vec<StudyRow>,
}

pub fn mini_study(name: &str, sims: usize, imputations: usize) -> Result<String, String> {
    if !(2..=MAX_SIMS).contains(&sims) {
        return Err(format!("sims must lie in 2..={MAX_SIMS}"));
    }
    let mut spec = preset(name).map_err(|e| e.to_string())?;
    spec.n_sims = sims;
    spec.n_imputations = imputations;
    let workers = Workers::new(1).map_err(|e| e.to_string())?;
    let out = run_scenario(&spec, &MiModel::ALL, DEMO_ORACLE_N, &workers).map_err(|e| e.to_string())?;
    let result = StudyResult {
        scenario: spec.name,
        theta_true: out.truth.theta,
        rows: out
            .summaries
            .into_iter()
            .map(|r| StudyRow {
                model: r.model,
                fitted_pct: r.fitted_pct,
                mean_estimate: r.mean_estimate,
                bias_pct: r.bias_pct,
                empirical_se: r.empirical_se,
                mean_model_se: r.mean_model_se,
                coverage_pct: r.coverage_pct,
            })
            .collect(),
    };
    serde_json::to_string(&result).map_err(|e| e.to_string())
}
