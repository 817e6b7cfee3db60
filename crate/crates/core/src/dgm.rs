//! Trial simulation: Gaussian-copula counterfactual outcomes, ranked
//! intercurrent-event (IE) selection and MCAR withdrawal among patients who
//! are off treatment.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::rng::{tag, StreamKey};
use crate::scenario::{floor_count, Arm, CopulaStructure, ScenarioSpec};

pub const VISITS: usize = 3;
const LATENT_DIM: usize = 7;
/// Patients per copula stream; the oracle trial fans blocks out over threads.
const BLOCK: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum DgmError {
    #[error("replicate index {index} out of range (n_sims = {n_sims})")]
    ReplicateOutOfRange { index: u64, n_sims: usize },
    #[error("infeasible discontinuation schedule for {arm}: {needed} IEs requested from {available} patients")]
    InfeasibleSchedule { arm: Arm, needed: usize, available: usize },
}

/// IE pattern: the visit at which treatment was discontinued, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Never,
    DiscontinuedAt(u8),
}

impl Pattern {
    pub fn label(self) -> String {
        match self {
            Pattern::Never => "never".to_owned(),
            Pattern::DiscontinuedAt(v) => format!("disc{v}"),
        }
    }
}

/// Both counterfactual outcome paths for one patient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counterfactuals {
    /// On-treatment outcomes at baseline and visits 1..3.
    pub y_on: [u8; 4],
    /// Off-treatment outcomes at visits 1..3.
    pub y_off: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub id: u32,
    pub arm: Arm,
    pub y_on: [u8; 4],
    pub y_off: [u8; 3],
    /// Visit of the IE, `D(t)`.
    pub ie_visit: Option<u8>,
    /// First visit with a missing outcome. Missingness is monotone, so every
    /// later visit is missing too.
    pub withdrawal_visit: Option<u8>,
}

impl PatientRecord {
    /// `D_j`: 1 once the IE has happened at or before `visit`.
    pub fn ie_indicator(&self, visit: usize) -> u8 {
        u8::from(self.ie_visit.is_some_and(|d| usize::from(d) <= visit))
    }

    pub fn pattern(&self) -> Pattern {
        self.ie_visit.map_or(Pattern::Never, Pattern::DiscontinuedAt)
    }

    /// Visits elapsed since the IE at `visit` (0 while on treatment).
    pub fn time_since_ie(&self, visit: usize) -> u8 {
        match self.ie_visit {
            Some(d) if usize::from(d) <= visit => visit as u8 - d,
            _ => 0,
        }
    }

    /// Treatment-policy outcome: on-treatment before the IE, off-treatment from it.
    pub fn policy(&self, visit: usize) -> u8 {
        if self.ie_indicator(visit) == 1 {
            self.y_off[visit - 1]
        } else {
            self.y_on[visit]
        }
    }

    pub fn observed(&self, visit: usize) -> bool {
        self.withdrawal_visit.is_none_or(|w| visit < usize::from(w))
    }

    pub fn observed_policy(&self, visit: usize) -> Option<u8> {
        self.observed(visit).then(|| self.policy(visit))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub scenario_digest: u64,
    pub replicate: u64,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialDataset {
    /// Active patients first, then Control.
    pub patients: Vec<PatientRecord>,
    pub n_per_arm: usize,
    pub provenance: Provenance,
}

impl TrialDataset {
    pub fn arm(&self, arm: Arm) -> impl Iterator<Item = &PatientRecord> {
        self.patients.iter().filter(move |p| p.arm == arm)
    }

    pub fn missing_count(&self) -> usize {
        self.patients.iter().filter(|p| p.withdrawal_visit.is_some()).count()
    }

    /// Writes one row per patient and visit:
    /// `sim,arm,id,visit,y_on,y_off,d,pattern,y_policy,observed`.
    pub fn write_csv<W: Write>(&self, out: W, header: bool) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record(["sim", "arm", "id", "visit", "y_on", "y_off", "d", "pattern", "y_policy", "observed"])?;
        }
        for p in &self.patients {
            for visit in 0..=VISITS {
                let y_off = if visit == 0 { String::new() } else { p.y_off[visit - 1].to_string() };
                w.write_record([
                    self.provenance.replicate.to_string(),
                    p.arm.label().to_owned(),
                    p.id.to_string(),
                    visit.to_string(),
                    p.y_on[visit].to_string(),
                    y_off,
                    p.ie_indicator(visit).to_string(),
                    p.pattern().label(),
                    p.policy(visit).to_string(),
                    u8::from(p.observed(visit)).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Cholesky factor of the 7x7 latent correlation matrix, coordinates ordered
/// (on0, on1, on2, on3, off1, off2, off3).
fn latent_factor(rho: f64, structure: CopulaStructure) -> [[f64; LATENT_DIM]; LATENT_DIM] {
    let corr = DMatrix::from_fn(LATENT_DIM, LATENT_DIM, |i, j| {
        if i == j {
            1.0
        } else {
            match structure {
                CopulaStructure::Exchangeable => rho,
                CopulaStructure::SeparateBlocks if (i < 4) == (j < 4) => rho,
                CopulaStructure::SeparateBlocks => 0.0,
            }
        }
    });
    let l = corr.cholesky().expect("exchangeable correlation with rho in [0,1) is positive definite").l();
    let mut out = [[0.0; LATENT_DIM]; LATENT_DIM];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate().take(i + 1) {
            *v = l[(i, j)];
        }
    }
    out
}

fn thresholds(spec: &ScenarioSpec, arm: Arm) -> [f64; LATENT_DIM] {
    let std_normal = Normal::standard();
    let r = spec.response(arm);
    let mut t = [0.0; LATENT_DIM];
    for v in 0..4 {
        t[v] = std_normal.inverse_cdf(r.on[v]);
    }
    for v in 0..3 {
        t[4 + v] = std_normal.inverse_cdf(r.off[v]);
    }
    t
}

fn draw_block(
    factor: &[[f64; LATENT_DIM]; LATENT_DIM],
    cut: &[f64; LATENT_DIM],
    len: usize,
    key: StreamKey,
) -> Vec<Counterfactuals> {
    let mut rng = key.rng();
    let mut e = [0.0; LATENT_DIM];
    (0..len)
        .map(|_| {
            for x in e.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            let mut bits = [0u8; LATENT_DIM];
            for (i, row) in factor.iter().enumerate() {
                let z: f64 = row[..=i].iter().zip(&e).map(|(l, x)| l * x).sum();
                // Phi(z) <= p  <=>  z <= Phi^-1(p)
                bits[i] = u8::from(z <= cut[i]);
            }
            Counterfactuals {
                y_on: [bits[0], bits[1], bits[2], bits[3]],
                y_off: [bits[4], bits[5], bits[6]],
            }
        })
        .collect()
}

/// Draws `n` patients' counterfactual outcome paths for one arm.
///
/// Each patient gets a standard normal vector with the scenario's latent
/// correlation; coordinate `k` becomes a response when its normal CDF value
/// falls at or below the visit's response rate.
pub fn gen_counterfactuals(spec: &ScenarioSpec, arm: Arm, n: usize, key: StreamKey) -> Vec<Counterfactuals> {
    let factor = latent_factor(spec.rho, spec.copula);
    let cut = thresholds(spec, arm);
    let blocks = n.div_ceil(BLOCK);
    let run = |b: usize| {
        let len = BLOCK.min(n - b * BLOCK);
        draw_block(&factor, &cut, len, key.child(b as u64))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<Counterfactuals>> = if blocks > 1 {
        use rayon::prelude::*;
        (0..blocks).into_par_iter().map(run).collect()
    } else {
        (0..blocks).map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<Counterfactuals>> = (0..blocks).map(run).collect();
    parts.concat()
}

/// Indices of the `k` smallest scores, ties broken by index.
fn lowest_k(candidates: &mut [(f64, usize)], k: usize) -> &[(f64, usize)] {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k > 0 && k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
    }
    &candidates[..k.min(candidates.len())]
}

/// Assigns IE visits for one arm.
///
/// Each patient draws `v ~ U(0,1)` once. At visit `j` every patient still on
/// treatment is scored `kappa = logit(v) - omega * y_on[j-1]` and the
/// `targets[j-1]` lowest scores discontinue at `j`.
pub fn select_ies(
    outcomes: &[Counterfactuals],
    targets: [usize; 3],
    omega: f64,
    key: StreamKey,
) -> Result<Vec<Option<u8>>, (usize, usize)> {
    let n = outcomes.len();
    let needed: usize = targets.iter().sum();
    if needed > n {
        return Err((needed, n));
    }
    let mut rng = key.rng();
    let logit_v: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(Open01);
            (v / (1.0 - v)).ln()
        })
        .collect();
    let mut ie = vec![None; n];
    let mut scores = Vec::with_capacity(n);
    for visit in 1..=VISITS {
        scores.clear();
        scores.extend(
            (0..n)
                .filter(|&i| ie[i].is_none())
                .map(|i| (logit_v[i] - omega * f64::from(outcomes[i].y_on[visit - 1]), i)),
        );
        for &(_, i) in lowest_k(&mut scores, targets[visit - 1]) {
            ie[i] = Some(visit as u8);
        }
    }
    Ok(ie)
}

/// Assigns study withdrawals for one arm.
///
/// By visit `j` the arm has `floor(rate * IEs so far)` withdrawals in total.
/// New withdrawals at `j` are the off-treatment patients still in the study
/// with the lowest `u ~ U(0,1)`, drawn afresh for every patient at every
/// visit. A withdrawn patient is missing from that visit on.
pub fn select_withdrawals(ie_visits: &[Option<u8>], withdrawal_rate: f64, key: StreamKey) -> Vec<Option<u8>> {
    let n = ie_visits.len();
    let mut rng = key.rng();
    let mut withdrawn: Vec<Option<u8>> = vec![None; n];
    let mut total = 0usize;
    let mut scores = Vec::with_capacity(n);
    for visit in 1..=VISITS {
        let u: Vec<f64> = (0..n).map(|_| rng.sample(Open01)).collect();
        let off_so_far = ie_visits.iter().filter(|d| d.is_some_and(|d| usize::from(d) <= visit)).count();
        let target = floor_count(withdrawal_rate * off_so_far as f64);
        let new = target.saturating_sub(total);
        scores.clear();
        scores.extend(
            (0..n)
                .filter(|&i| withdrawn[i].is_none() && ie_visits[i].is_some_and(|d| usize::from(d) <= visit))
                .map(|i| (u[i], i)),
        );
        for &(_, i) in lowest_k(&mut scores, new) {
            withdrawn[i] = Some(visit as u8);
        }
        total = total.max(target);
    }
    withdrawn
}

/// Generates both arms of a trial with `n` patients per arm under `key`.
pub(crate) fn simulate_arms(spec: &ScenarioSpec, n: usize, key: StreamKey) -> Result<Vec<PatientRecord>, DgmError> {
    let mut patients = Vec::with_capacity(2 * n);
    for arm in Arm::BOTH {
        let arm_key = key.child(arm.tag());
        let cf = gen_counterfactuals(spec, arm, n, arm_key.child(tag::COPULA));
        let targets = spec.disc.ie_counts(arm, n);
        let ie = select_ies(&cf, targets, spec.omega, arm_key.child(tag::IE_SELECTION))
            .map_err(|(needed, available)| DgmError::InfeasibleSchedule { arm, needed, available })?;
        let wd = select_withdrawals(&ie, spec.withdrawal_rate, arm_key.child(tag::WITHDRAWAL));
        let offset = patients.len() as u32;
        patients.extend(cf.iter().zip(ie).zip(wd).enumerate().map(|(i, ((c, ie_visit), withdrawal_visit))| {
            PatientRecord {
                id: offset + i as u32,
                arm,
                y_on: c.y_on,
                y_off: c.y_off,
                ie_visit,
                withdrawal_visit,
            }
        }));
    }
    Ok(patients)
}

/// Counts of `(arm, Y0, policy Y3)` over a trial with `n` patients per arm
/// and no missing data, indexed `a*4 + y0*2 + y3` with `a = 1` for Active.
/// Used for the large oracle trial, where patient records are not needed.
pub fn policy_cells(spec: &ScenarioSpec, n: usize, key: StreamKey) -> Result<[f64; 8], DgmError> {
    let mut cells = [0.0; 8];
    for arm in Arm::BOTH {
        let arm_key = key.child(arm.tag());
        let cf = gen_counterfactuals(spec, arm, n, arm_key.child(tag::COPULA));
        let targets = spec.disc.ie_counts(arm, n);
        let ie = select_ies(&cf, targets, spec.omega, arm_key.child(tag::IE_SELECTION))
            .map_err(|(needed, available)| DgmError::InfeasibleSchedule { arm, needed, available })?;
        let a = usize::from(arm == Arm::Active);
        for (c, d) in cf.iter().zip(ie) {
            let y3 = if d.is_some() { c.y_off[VISITS - 1] } else { c.y_on[VISITS] };
            cells[a * 4 + usize::from(c.y_on[0]) * 2 + usize::from(y3)] += 1.0;
        }
    }
    Ok(cells)
}

/// Key of the data-generating streams for one replicate.
pub fn replicate_key(master_seed: u64, replicate: u64) -> StreamKey {
    StreamKey::root(master_seed).child(replicate)
}

/// Simulates replicate `replicate` of a scenario. The result is a pure
/// function of `(spec, replicate)`.
pub fn simulate_trial(spec: &ScenarioSpec, replicate: u64) -> Result<TrialDataset, DgmError> {
    if replicate >= spec.n_sims as u64 {
        return Err(DgmError::ReplicateOutOfRange { index: replicate, n_sims: spec.n_sims });
    }
    let patients = simulate_arms(spec, spec.n_per_arm, replicate_key(spec.master_seed, replicate))?;
    Ok(TrialDataset {
        patients,
        n_per_arm: spec.n_per_arm,
        provenance: Provenance { scenario_digest: spec.digest(), replicate, master_seed: spec.master_seed },
    })
}
