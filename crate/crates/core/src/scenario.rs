//! Simulation scenarios: response-rate schedules, discontinuation splits,
//! withdrawal rates and run settings, plus the built-in preset grid.
//!
//! Scenarios are read from a flat TOML document:
//!
//! ```toml
//! name = "my-scenario"          # optional
//! n_per_arm = 250
//! withdrawal_rate = 0.5
//! # rho = 0.5, omega = 0.75, null = false, n_sims = 1000,
//! # n_imputations = 25, master_seed = 12345, copula = "exchangeable"
//! response.active.on = [0.3, 0.35, 0.4, 0.45]   # baseline, visits 1..3
//! response.active.off = [0.35, 0.25, 0.15]      # visits 1..3
//! response.control.on = [0.3, 0.3, 0.3, 0.3]
//! response.control.off = [0.3, 0.225, 0.15]
//! disc.active = [0.15, 0.09, 0.06]              # new IEs per visit, fraction of N
//! disc.control = [0.10, 0.06, 0.04]
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_OMEGA: f64 = 0.75;
pub const DEFAULT_IMPUTATIONS: usize = 25;
pub const DEFAULT_SIMS: usize = 1000;
pub const DEFAULT_SEED: u64 = 12345;
pub const DEFAULT_N_PER_ARM: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Active,
    Control,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Active, Arm::Control];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Active => "A",
            Arm::Control => "C",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Arm::Active => 0,
            Arm::Control => 1,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Marginal response probabilities for one arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSchedule {
    /// On-treatment rates at baseline and visits 1..3.
    pub on: [f64; 4],
    /// Off-treatment rates at visits 1..3. There is no baseline entry: an IE
    /// cannot happen before the first post-baseline visit.
    pub off: [f64; 3],
}

impl ResponseSchedule {
    pub fn on_rate(&self, visit: usize) -> f64 {
        self.on[visit]
    }

    /// `visit` is 1-based.
    pub fn off_rate(&self, visit: usize) -> f64 {
        self.off[visit - 1]
    }
}

/// Per-visit share of each arm selected to discontinue treatment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscontinuationSchedule {
    pub active: [f64; 3],
    pub control: [f64; 3],
}

/// Rounds half up; the small offset absorbs representation error such as
/// `0.7 * 20 = 13.999999999999998`.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

pub(crate) fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

impl DiscontinuationSchedule {
    pub fn arm(&self, arm: Arm) -> &[f64; 3] {
        match arm {
            Arm::Active => &self.active,
            Arm::Control => &self.control,
        }
    }

    /// Headline discontinuation rate by the final visit.
    pub fn total(&self, arm: Arm) -> f64 {
        self.arm(arm).iter().sum()
    }

    /// Number of new IEs at visits 1..3 for an arm of `n` patients.
    ///
    /// Cumulative targets are rounded and then differenced, so the realised
    /// total always equals `round(total * n)`.
    pub fn ie_counts(&self, arm: Arm, n: usize) -> [usize; 3] {
        let mut cum = 0.0;
        let mut prev = 0;
        let mut out = [0; 3];
        for (slot, share) in out.iter_mut().zip(self.arm(arm)) {
            cum += share;
            let target = round_half_up(cum * n as f64).min(n);
            *slot = target.saturating_sub(prev);
            prev = prev.max(target);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopulaStructure {
    /// One exchangeable correlation across all seven latent coordinates
    /// (baseline, three on-treatment and three off-treatment visits).
    #[default]
    Exchangeable,
    /// Exchangeable within the on-treatment block and within the
    /// off-treatment block, independent between blocks.
    SeparateBlocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub n_per_arm: usize,
    pub response_active: ResponseSchedule,
    pub response_control: ResponseSchedule,
    pub disc: DiscontinuationSchedule,
    pub withdrawal_rate: f64,
    pub rho: f64,
    pub omega: f64,
    pub null: bool,
    pub n_sims: usize,
    pub n_imputations: usize,
    pub master_seed: u64,
    pub copula: CopulaStructure,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("unknown preset `{0}` (see `preset --list`)")]
    UnknownPreset(String),
}

impl ScenarioSpec {
    pub fn response(&self, arm: Arm) -> &ResponseSchedule {
        match arm {
            Arm::Active => &self.response_active,
            Arm::Control => &self.response_control,
        }
    }

    /// Headline discontinuation rates in whole percent, e.g. `(30, 20)`.
    pub fn disc_pct(&self) -> (u32, u32) {
        let pct = |arm| (self.disc.total(arm) * 100.0).round() as u32;
        (pct(Arm::Active), pct(Arm::Control))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Invariant(msg));
        if self.n_per_arm == 0 {
            return fail("n_per_arm must be positive".into());
        }
        if self.n_sims == 0 {
            return fail("n_sims must be positive".into());
        }
        if self.n_imputations < 2 {
            return fail(format!("n_imputations must be at least 2 (got {})", self.n_imputations));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1) (got {})", self.rho));
        }
        if !(0.0..=1.0).contains(&self.withdrawal_rate) {
            return fail(format!("withdrawal_rate must lie in [0, 1] (got {})", self.withdrawal_rate));
        }
        if !self.omega.is_finite() {
            return fail("omega must be finite".into());
        }
        for arm in Arm::BOTH {
            let key = arm_key(arm);
            let r = self.response(arm);
            for (i, p) in r.on.iter().enumerate() {
                if !(*p > 0.0 && *p < 1.0) {
                    return fail(format!("response.{key}.on[{i}] must lie in (0, 1) (got {p})"));
                }
            }
            for (i, p) in r.off.iter().enumerate() {
                if !(*p > 0.0 && *p < 1.0) {
                    return fail(format!("response.{key}.off[{i}] must lie in (0, 1) (got {p})"));
                }
            }
            let shares = self.disc.arm(arm);
            if let Some(s) = shares.iter().find(|s| s.is_nan() || **s < 0.0) {
                return fail(format!("disc.{key} entries must be non-negative (got {s})"));
            }
            if self.disc.total(arm) > 1.0 + 1e-12 {
                return fail(format!("disc.{key} must sum to at most 1 (got {})", self.disc.total(arm)));
            }
        }
        if self.null && self.response_active != self.response_control {
            return fail("null scenarios require identical Active and Control response schedules".into());
        }
        Ok(())
    }

    /// Serialises to the documented TOML layout; `load_scenario` reads it back unchanged.
    pub fn to_toml(&self) -> String {
        let doc = ScenarioDoc::from(self);
        toml::to_string(&doc).expect("scenario document serialises")
    }

    /// Stable 64-bit digest of the serialised scenario (FNV-1a).
    pub fn digest(&self) -> u64 {
        self.to_toml().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

fn arm_key(arm: Arm) -> &'static str {
    match arm {
        Arm::Active => "active",
        Arm::Control => "control",
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    n_per_arm: usize,
    #[serde(default = "default_sims")]
    n_sims: usize,
    #[serde(default = "default_imputations")]
    n_imputations: usize,
    #[serde(default = "default_seed")]
    master_seed: u64,
    #[serde(default = "default_rho")]
    rho: f64,
    #[serde(default = "default_omega")]
    omega: f64,
    withdrawal_rate: f64,
    #[serde(default)]
    null: bool,
    #[serde(default)]
    copula: CopulaStructure,
    response: ResponseDoc,
    disc: DiscontinuationSchedule,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseDoc {
    active: ResponseSchedule,
    control: ResponseSchedule,
}

fn default_sims() -> usize {
    DEFAULT_SIMS
}
fn default_imputations() -> usize {
    DEFAULT_IMPUTATIONS
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}
fn default_omega() -> f64 {
    DEFAULT_OMEGA
}

impl From<&ScenarioSpec> for ScenarioDoc {
    fn from(s: &ScenarioSpec) -> Self {
        ScenarioDoc {
            name: Some(s.name.clone()),
            n_per_arm: s.n_per_arm,
            n_sims: s.n_sims,
            n_imputations: s.n_imputations,
            master_seed: s.master_seed,
            rho: s.rho,
            omega: s.omega,
            withdrawal_rate: s.withdrawal_rate,
            null: s.null,
            copula: s.copula,
            response: ResponseDoc { active: s.response_active, control: s.response_control },
            disc: s.disc,
        }
    }
}

/// Parses and validates a scenario document, applying defaults.
///
/// With `null = true` the Active response schedule is replaced by the
/// Control schedule before validation.
pub fn load_scenario(config_text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let doc: ScenarioDoc =
        toml::from_str(config_text).map_err(|e| ScenarioError::Schema(e.to_string().trim_end().to_owned()))?;
    let response_active = if doc.null { doc.response.control } else { doc.response.active };
    let spec = ScenarioSpec {
        name: doc.name.unwrap_or_else(|| "custom".to_owned()),
        n_per_arm: doc.n_per_arm,
        response_active,
        response_control: doc.response.control,
        disc: doc.disc,
        withdrawal_rate: doc.withdrawal_rate,
        rho: doc.rho,
        omega: doc.omega,
        null: doc.null,
        n_sims: doc.n_sims,
        n_imputations: doc.n_imputations,
        master_seed: doc.master_seed,
        copula: doc.copula,
    };
    spec.validate()?;
    Ok(spec)
}

// --- presets ---------------------------------------------------------------

const BASE_ACTIVE: ResponseSchedule =
    ResponseSchedule { on: [0.3, 0.35, 0.4, 0.45], off: [0.35, 0.25, 0.15] };
const BASE_CONTROL: ResponseSchedule =
    ResponseSchedule { on: [0.3, 0.3, 0.3, 0.3], off: [0.3, 0.225, 0.15] };

const HIGH_ACTIVE: ResponseSchedule =
    ResponseSchedule { on: [0.8, 0.85, 0.875, 0.9], off: [0.8, 0.6, 0.4] };
const HIGH_CONTROL: ResponseSchedule =
    ResponseSchedule { on: [0.8, 0.8, 0.8, 0.8], off: [0.7, 0.55, 0.4] };
const MEDIUM_ACTIVE: ResponseSchedule =
    ResponseSchedule { on: [0.5, 0.55, 0.6, 0.7], off: [0.5, 0.4, 0.25] };
const MEDIUM_CONTROL: ResponseSchedule =
    ResponseSchedule { on: [0.5, 0.5, 0.5, 0.5], off: [0.45, 0.375, 0.25] };
const LOW_ACTIVE: ResponseSchedule =
    ResponseSchedule { on: [0.1, 0.125, 0.15, 0.2], off: [0.1, 0.08, 0.05] };
const LOW_CONTROL: ResponseSchedule =
    ResponseSchedule { on: [0.1, 0.1, 0.1, 0.1], off: [0.09, 0.075, 0.05] };

/// Per-visit split of a headline discontinuation rate: earlier visits take
/// the larger share (half, three tenths, one fifth).
fn disc_split(pct: u32) -> Option<[f64; 3]> {
    match pct {
        10 => Some([0.05, 0.03, 0.02]),
        20 => Some([0.10, 0.06, 0.04]),
        30 => Some([0.15, 0.09, 0.06]),
        _ => None,
    }
}

/// Discontinuation pairs (Active %, Control %) of the first simulation study.
pub const DISC_GRID: [(u32, u32); 4] = [(10, 10), (20, 20), (30, 30), (30, 20)];
pub const WITHDRAWAL_GRID: [u32; 5] = [30, 40, 50, 60, 70];
/// Per-arm sample sizes with presets. 250 is the default and is not spelled
/// out in preset names.
pub const SAMPLE_SIZES: [usize; 5] = [50, 100, 250, 500, 2000];
pub const STRESS_LEVELS: [&str; 3] = ["high", "medium", "low"];

fn base_spec(name: &str, disc: DiscontinuationSchedule, withdrawal_pct: u32, n: usize, null: bool) -> ScenarioSpec {
    ScenarioSpec {
        name: name.to_owned(),
        n_per_arm: n,
        response_active: if null { BASE_CONTROL } else { BASE_ACTIVE },
        response_control: BASE_CONTROL,
        disc,
        withdrawal_rate: f64::from(withdrawal_pct) / 100.0,
        rho: DEFAULT_RHO,
        omega: DEFAULT_OMEGA,
        null,
        n_sims: DEFAULT_SIMS,
        n_imputations: DEFAULT_IMPUTATIONS,
        master_seed: DEFAULT_SEED,
        copula: CopulaStructure::Exchangeable,
    }
}

fn parse_withdrawal(s: &str) -> Option<u32> {
    let w: u32 = s.strip_prefix('w')?.parse().ok()?;
    WITHDRAWAL_GRID.contains(&w).then_some(w)
}

/// Looks up a built-in scenario.
///
/// Names follow `base-disc{A}a{C}c-w{W}[-n{N}][-null]` for the response
/// rates of the main study and `stress-{high|medium|low}-w{W}[-null]` for
/// the alternative response-rate sets (30% Active / 20% Control
/// discontinuation). `A/C` is one of 10/10, 20/20, 30/30, 30/20; `W` is a
/// withdrawal percentage in 30..70 by 10; `N` is one of 50, 100, 500, 2000.
pub fn preset(name: &str) -> Result<ScenarioSpec, ScenarioError> {
    parse_preset(name).ok_or_else(|| ScenarioError::UnknownPreset(name.to_owned()))
}

fn parse_preset(name: &str) -> Option<ScenarioSpec> {
    let mut parts: Vec<&str> = name.split('-').collect();
    let null = parts.last() == Some(&"null");
    if null {
        parts.pop();
    }
    match parts.as_slice() {
        ["base", disc, w, rest @ ..] => {
            let (a, c) = disc.strip_prefix("disc")?.strip_suffix('c')?.split_once('a')?;
            let (a, c): (u32, u32) = (a.parse().ok()?, c.parse().ok()?);
            if !DISC_GRID.contains(&(a, c)) {
                return None;
            }
            let w = parse_withdrawal(w)?;
            let n = match rest {
                [] => DEFAULT_N_PER_ARM,
                [n] => {
                    let n: usize = n.strip_prefix('n')?.parse().ok()?;
                    (n != DEFAULT_N_PER_ARM && SAMPLE_SIZES.contains(&n)).then_some(n)?
                }
                _ => return None,
            };
            let disc = DiscontinuationSchedule { active: disc_split(a)?, control: disc_split(c)? };
            Some(base_spec(name, disc, w, n, null))
        }
        ["stress", level, w] => {
            let (active, control) = match *level {
                "high" => (HIGH_ACTIVE, HIGH_CONTROL),
                "medium" => (MEDIUM_ACTIVE, MEDIUM_CONTROL),
                "low" => (LOW_ACTIVE, LOW_CONTROL),
                _ => return None,
            };
            let w = parse_withdrawal(w)?;
            let disc = DiscontinuationSchedule { active: disc_split(30)?, control: disc_split(20)? };
            let mut spec = base_spec(name, disc, w, DEFAULT_N_PER_ARM, null);
            spec.response_active = if null { control } else { active };
            spec.response_control = control;
            Some(spec)
        }
        _ => None,
    }
}

/// Every preset name, in a stable order.
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for null in [false, true] {
        let suffix = if null { "-null" } else { "" };
        for n in SAMPLE_SIZES {
            let n_part = if n == DEFAULT_N_PER_ARM { String::new() } else { format!("-n{n}") };
            for (a, c) in DISC_GRID {
                for w in WITHDRAWAL_GRID {
                    names.push(format!("base-disc{a}a{c}c-w{w}{n_part}{suffix}"));
                }
            }
        }
        for level in STRESS_LEVELS {
            for w in WITHDRAWAL_GRID {
                names.push(format!("stress-{level}-w{w}{suffix}"));
            }
        }
    }
    names
}

/// Named preset collections for whole simulation studies.
pub fn preset_grid(name: &str) -> Option<Vec<String>> {
    let (base, null) = match name.strip_suffix("-null") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let suffix = if null { "-null" } else { "" };
    let names = match base {
        // Discontinuation x withdrawal at N = 250.
        "study1" => DISC_GRID
            .iter()
            .flat_map(|(a, c)| WITHDRAWAL_GRID.iter().map(move |w| format!("base-disc{a}a{c}c-w{w}{suffix}")))
            .collect(),
        // Sample size x withdrawal (30..50) at 30/20 discontinuation.
        "study2" => [50usize, 100, 500]
            .iter()
            .flat_map(|n| [30, 40, 50].into_iter().map(move |w| format!("base-disc30a20c-w{w}-n{n}{suffix}")))
            .collect(),
        "stress" => STRESS_LEVELS
            .iter()
            .flat_map(|l| WITHDRAWAL_GRID.iter().map(move |w| format!("stress-{l}-w{w}{suffix}")))
            .collect(),
        _ => return None,
    };
    Some(names)
}
