//! Runs scenarios over replicates in parallel, journals per-replicate
//! results so interrupted runs can resume, and writes summary tables.
//!
//! Output directory layout:
//!
//! - `manifest.json`: resolved scenarios, models, seeds and true effects
//! - `replicates.csv`: one row per scenario, replicate and model
//! - `summary.csv`: every performance measure per scenario and model
//! - `convergence.csv`: fitted replicates per model, as `n (pct%)`
//! - `false_positive.csv`: null scenarios only, rejection rate per model
//! - `modse.csv`: relative error of the model-based SE per model
//! - `performance.csv`: long format `measure,value,mcse` for plotting

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgm::{replicate_key, simulate_trial, DgmError, TrialDataset};
use crate::impute::{impute_sequential, MiModel};
use crate::metrics::{oracle_digest, summarize, true_log_or, RepResult, SummaryRow, TrueEffect};
use crate::pool::{analyze, rubin_pool, PoolError, PooledEstimate};
use crate::rng::{tag, StreamKey};
use crate::scenario::{ScenarioError, ScenarioSpec};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("no imputation models requested")]
    NoModels,
    #[error("no scenarios requested")]
    NoScenarios,
    #[error("scenario name `{0}` appears twice")]
    DuplicateScenario(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("scenario `{scenario}`: {source}")]
    Dgm { scenario: String, source: DgmError },
    #[error("cannot resume: {0}")]
    ResumeMismatch(String),
    #[error("replicate journal line {line}: {msg}")]
    CorruptJournal { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Workers(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StudyError + '_ {
    move |source| StudyError::Io { path: path.to_owned(), source }
}

/// Deduplicates, adds FULL (the comparator for halfwidth and coverage) and
/// puts models in canonical order.
pub fn normalize_models(models: &[MiModel]) -> Result<Vec<MiModel>, StudyError> {
    if models.is_empty() {
        return Err(StudyError::NoModels);
    }
    Ok(MiModel::ALL.into_iter().filter(|m| *m == MiModel::Full || models.contains(m)).collect())
}

fn pool_reason(e: &PoolError) -> &'static str {
    match e {
        PoolError::Separated(_) => "analysis_separated",
        PoolError::Fit(_) | PoolError::NonFinite => "analysis_failed",
        PoolError::TooFewImputations(_) => "too_few_imputations",
    }
}

/// Pooled estimate of one model on one simulated trial.
pub fn evaluate_model(
    data: &TrialDataset,
    model: MiModel,
    n_imputations: usize,
    key: StreamKey,
) -> Result<PooledEstimate, String> {
    let completed = impute_sequential(data, model, n_imputations, key).map_err(|e| e.reason().to_owned())?;
    let estimates = completed
        .iter()
        .map(|cd| analyze(data, cd))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| pool_reason(&e).to_owned())?;
    if model == MiModel::Full {
        let (point, var) = estimates[0];
        Ok(PooledEstimate::single(point, var))
    } else {
        rubin_pool(&estimates).map_err(|e| pool_reason(&e).to_owned())
    }
}

/// Imputation streams of one replicate and model.
pub fn impute_key(master_seed: u64, replicate: u64, model: MiModel) -> StreamKey {
    replicate_key(master_seed, replicate).child(tag::IMPUTE).child(model.tag())
}

/// Simulates one replicate and evaluates every model on it.
pub fn run_replicate(spec: &ScenarioSpec, replicate: u64, models: &[MiModel]) -> Result<Vec<RepResult>, DgmError> {
    let data = simulate_trial(spec, replicate)?;
    Ok(models
        .iter()
        .map(|&model| RepResult {
            replicate,
            model,
            outcome: evaluate_model(&data, model, spec.n_imputations, impute_key(spec.master_seed, replicate, model)),
        })
        .collect())
}

/// Worker pool; without the `parallel` feature everything runs inline.
pub struct Workers {
    #[cfg(feature = "parallel")]
    pool: rayon::ThreadPool,
}

impl Workers {
    /// `0` picks one worker per available core.
    pub fn new(count: usize) -> Result<Workers, StudyError> {
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build()
                .map_err(|e| StudyError::Workers(e.to_string()))?;
            Ok(Workers { pool })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = count;
            Ok(Workers {})
        }
    }

    pub fn count(&self) -> usize {
        #[cfg(feature = "parallel")]
        return self.pool.current_num_threads();
        #[cfg(not(feature = "parallel"))]
        return 1;
    }

    fn map<T: Send, R: Send>(&self, items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            self.pool.install(|| items.into_par_iter().map(f).collect())
        }
        #[cfg(not(feature = "parallel"))]
        {
            items.into_iter().map(f).collect()
        }
    }
}

/// Results for `replicates`, in replicate then model order.
pub fn run_replicates(
    spec: &ScenarioSpec,
    models: &[MiModel],
    replicates: &[u64],
    workers: &Workers,
) -> Result<Vec<RepResult>, DgmError> {
    let per_rep = workers.map(replicates.to_vec(), |r| run_replicate(spec, r, models));
    let mut out = Vec::with_capacity(replicates.len() * models.len());
    for rows in per_rep {
        out.extend(rows?);
    }
    Ok(out)
}

/// One summary row per model; `results` may be in any order.
pub fn summarize_scenario(
    spec: &ScenarioSpec,
    models: &[MiModel],
    results: &[RepResult],
    truth: &TrueEffect,
) -> Vec<SummaryRow> {
    let full: Vec<RepResult> = results.iter().filter(|r| r.model == MiModel::Full).cloned().collect();
    models
        .iter()
        .map(|&m| {
            let own: Vec<RepResult> = results.iter().filter(|r| r.model == m).cloned().collect();
            let mut row = summarize(spec, &own, &full, truth);
            row.model = m;
            row
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestScenario {
    pub name: String,
    pub digest: String,
    pub spec: ScenarioSpec,
    pub theta_true: Option<TrueEffect>,
}

/// Echo of a run's resolved inputs. The worker count is deliberately not
/// recorded so that outputs do not depend on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub models: Vec<MiModel>,
    pub oracle_n: usize,
    pub scenarios: Vec<ManifestScenario>,
}

impl RunManifest {
    pub fn new(specs: &[ScenarioSpec], models: &[MiModel], oracle_n: usize) -> Result<RunManifest, StudyError> {
        if specs.is_empty() {
            return Err(StudyError::NoScenarios);
        }
        let models = normalize_models(models)?;
        let mut seen = HashSet::new();
        for s in specs {
            s.validate()?;
            if !seen.insert(s.name.as_str()) {
                return Err(StudyError::DuplicateScenario(s.name.clone()));
            }
        }
        Ok(RunManifest {
            version: env!("CARGO_PKG_VERSION").to_owned(),
            models,
            oracle_n,
            scenarios: specs
                .iter()
                .map(|s| ManifestScenario {
                    name: s.name.clone(),
                    digest: format!("{:016x}", s.digest()),
                    spec: s.clone(),
                    theta_true: None,
                })
                .collect(),
        })
    }

    /// Whether `other` describes the same work, ignoring computed effects.
    fn same_work(&self, other: &RunManifest) -> bool {
        let key = |m: &RunManifest| {
            (m.models.clone(), m.oracle_n, m.scenarios.iter().map(|s| s.digest.clone()).collect::<Vec<_>>())
        };
        key(self) == key(other)
    }
}

pub const REPLICATE_HEADER: [&str; 15] = [
    "scenario",
    "replicate",
    "model",
    "status",
    "reason",
    "point",
    "se",
    "ci_low",
    "ci_high",
    "df",
    "within_var",
    "between_var",
    "total_var",
    "p_value",
    "m_used",
];

fn replicate_record(scenario: &str, r: &RepResult) -> Vec<String> {
    let mut rec = vec![scenario.to_owned(), r.replicate.to_string(), r.model.to_string()];
    match &r.outcome {
        Ok(e) => {
            rec.extend(["fitted".to_owned(), String::new()]);
            rec.extend(
                [e.point, e.se, e.ci_low, e.ci_high, e.df, e.within_var, e.between_var, e.total_var, e.p_value]
                    .iter()
                    .map(f64::to_string),
            );
            rec.push(e.m_used.to_string());
        }
        Err(reason) => {
            rec.extend(["excluded".to_owned(), reason.clone()]);
            rec.extend(std::iter::repeat_n(String::new(), 10));
        }
    }
    rec
}

fn parse_replicate_record(rec: &csv::StringRecord, line: usize) -> Result<(String, RepResult), StudyError> {
    let bad = |msg: String| StudyError::CorruptJournal { line, msg };
    if rec.len() != REPLICATE_HEADER.len() {
        return Err(bad(format!("expected {} fields, found {}", REPLICATE_HEADER.len(), rec.len())));
    }
    let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", REPLICATE_HEADER[i])));
    let replicate = rec[1].parse::<u64>().map_err(|e| bad(format!("replicate: {e}")))?;
    let model = rec[2].parse::<MiModel>().map_err(bad)?;
    let outcome = match &rec[3] {
        "fitted" => Ok(PooledEstimate {
            point: num(5)?,
            se: num(6)?,
            ci_low: num(7)?,
            ci_high: num(8)?,
            df: num(9)?,
            within_var: num(10)?,
            between_var: num(11)?,
            total_var: num(12)?,
            p_value: num(13)?,
            m_used: rec[14].parse().map_err(|e| bad(format!("m_used: {e}")))?,
        }),
        "excluded" => Err(rec[4].to_owned()),
        other => return Err(bad(format!("unknown status `{other}`"))),
    };
    Ok((rec[0].to_owned(), RepResult { replicate, model, outcome }))
}

/// Reads a replicate journal, keeping only complete replicates (every
/// model present), which may be missing after an interruption.
pub fn read_journal(path: &Path, models: &[MiModel]) -> Result<HashMap<String, Vec<RepResult>>, StudyError> {
    let mut by_scenario: HashMap<String, BTreeMap<u64, Vec<RepResult>>> = HashMap::new();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    for (i, rec) in reader.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            // a torn final line from an interrupted write
            Err(e) if matches!(e.kind(), csv::ErrorKind::UnequalLengths { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let Ok((scenario, result)) = parse_replicate_record(&rec, i + 2) else { continue };
        by_scenario.entry(scenario).or_default().entry(result.replicate).or_default().push(result);
    }
    Ok(by_scenario
        .into_iter()
        .map(|(s, reps)| {
            let complete = reps
                .into_values()
                .filter_map(|mut rows| {
                    rows.sort_by_key(|r| r.model);
                    rows.dedup_by_key(|r| r.model);
                    (rows.iter().map(|r| r.model).collect::<Vec<_>>() == models).then_some(rows)
                })
                .flatten()
                .collect();
            (s, complete)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutcome {
    pub spec: ScenarioSpec,
    pub truth: TrueEffect,
    /// Sorted by replicate, then model.
    pub results: Vec<RepResult>,
    pub summaries: Vec<SummaryRow>,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub models: Vec<MiModel>,
    pub workers: usize,
    pub oracle_n: usize,
    pub resume: bool,
    /// Replicates per journal flush.
    pub chunk: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            models: MiModel::ALL.to_vec(),
            workers: 0,
            oracle_n: crate::metrics::ORACLE_N,
            resume: false,
            chunk: 64,
        }
    }
}

/// Progress callback: scenario name, replicates done, replicates total.
pub type Progress<'a> = &'a (dyn Fn(&str, usize, usize) + Sync);

/// Evaluates one scenario in memory.
pub fn run_scenario(
    spec: &ScenarioSpec,
    models: &[MiModel],
    oracle_n: usize,
    workers: &Workers,
) -> Result<ScenarioOutcome, StudyError> {
    spec.validate()?;
    let models = normalize_models(models)?;
    let dgm = |source| StudyError::Dgm { scenario: spec.name.clone(), source };
    let truth = true_log_or(spec, oracle_n).map_err(dgm)?;
    let reps: Vec<u64> = (0..spec.n_sims as u64).collect();
    let results = run_replicates(spec, &models, &reps, workers).map_err(dgm)?;
    let summaries = summarize_scenario(spec, &models, &results, &truth);
    Ok(ScenarioOutcome { spec: spec.clone(), truth, results, summaries })
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), StudyError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Runs every scenario, journaling to `out_dir`, and writes the tables.
pub fn run_study(
    specs: &[ScenarioSpec],
    opts: &RunOptions,
    out_dir: &Path,
    progress: Progress<'_>,
) -> Result<Vec<ScenarioOutcome>, StudyError> {
    let mut manifest = RunManifest::new(specs, &opts.models, opts.oracle_n)?;
    let models = manifest.models.clone();
    let workers = Workers::new(opts.workers)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let manifest_path = out_dir.join("manifest.json");
    let journal_path = out_dir.join("replicates.csv");

    let mut done: HashMap<String, Vec<RepResult>> = HashMap::new();
    if opts.resume && manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let previous: RunManifest = serde_json::from_str(&text)?;
        if !manifest.same_work(&previous) {
            return Err(StudyError::ResumeMismatch(format!(
                "{} was written for different scenarios, models or oracle size",
                manifest_path.display()
            )));
        }
        manifest = previous;
        if journal_path.exists() {
            done = read_journal(&journal_path, &models)?;
        }
    }
    // Rewrite the journal with only complete replicates, then append.
    {
        let file = File::create(&journal_path).map_err(io_err(&journal_path))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(REPLICATE_HEADER)?;
        for spec in specs {
            for r in done.get(&spec.name).into_iter().flatten() {
                w.write_record(replicate_record(&spec.name, r))?;
            }
        }
        w.flush().map_err(io_err(&journal_path))?;
    }
    write_manifest(&manifest_path, &manifest)?;

    let mut oracles: HashMap<u64, TrueEffect> = HashMap::new();
    let mut outcomes = Vec::with_capacity(specs.len());
    for (si, spec) in specs.iter().enumerate() {
        let dgm = |source| StudyError::Dgm { scenario: spec.name.clone(), source };
        let truth = match manifest.scenarios[si].theta_true {
            Some(t) => t,
            None => {
                let key = oracle_digest(spec);
                let t = match oracles.get(&key) {
                    Some(t) => *t,
                    None => true_log_or(spec, opts.oracle_n).map_err(dgm)?,
                };
                manifest.scenarios[si].theta_true = Some(t);
                write_manifest(&manifest_path, &manifest)?;
                t
            }
        };
        oracles.insert(oracle_digest(spec), truth);

        let mut results = done.remove(&spec.name).unwrap_or_default();
        let have: HashSet<u64> = results.iter().map(|r| r.replicate).collect();
        let todo: Vec<u64> = (0..spec.n_sims as u64).filter(|r| !have.contains(r)).collect();
        let total = spec.n_sims;
        let mut finished = total - todo.len();
        progress(&spec.name, finished, total);
        for chunk in todo.chunks(opts.chunk.max(1)) {
            let rows = run_replicates(spec, &models, chunk, &workers).map_err(dgm)?;
            let file = OpenOptions::new().append(true).open(&journal_path).map_err(io_err(&journal_path))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
            for r in &rows {
                w.write_record(replicate_record(&spec.name, r))?;
            }
            w.flush().map_err(io_err(&journal_path))?;
            results.extend(rows);
            finished += chunk.len();
            progress(&spec.name, finished, total);
        }
        results.sort_by_key(|r| (r.replicate, r.model));
        let summaries = summarize_scenario(spec, &models, &results, &truth);
        outcomes.push(ScenarioOutcome { spec: spec.clone(), truth, results, summaries });
    }

    // Final sorted journal, independent of completion order.
    {
        let file = File::create(&journal_path).map_err(io_err(&journal_path))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(REPLICATE_HEADER)?;
        for o in &outcomes {
            for r in &o.results {
                w.write_record(replicate_record(&o.spec.name, r))?;
            }
        }
        w.flush().map_err(io_err(&journal_path))?;
    }
    emit_tables(out_dir, &outcomes, &models)?;
    Ok(outcomes)
}

fn scenario_columns(spec: &ScenarioSpec) -> [String; 5] {
    let (a, c) = spec.disc_pct();
    [
        spec.name.clone(),
        a.to_string(),
        c.to_string(),
        format!("{}", (spec.withdrawal_rate * 100.0).round()),
        spec.n_per_arm.to_string(),
    ]
}

const SCENARIO_HEADER: [&str; 5] = ["scenario", "disc_active", "disc_control", "withdrawal_pct", "n_per_arm"];

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(String::new, |v| format!("{v:.digits$}"))
}

fn wide_table(
    path: &Path,
    outcomes: &[&ScenarioOutcome],
    models: &[MiModel],
    cell: impl Fn(&SummaryRow) -> String,
) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SCENARIO_HEADER.iter().copied().chain(models.iter().map(|m| m.label())))?;
    for o in outcomes {
        let mut rec: Vec<String> = scenario_columns(&o.spec).into();
        rec.extend(o.summaries.iter().map(&cell));
        w.write_record(rec)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the summary tables for a finished run.
pub fn emit_tables(out_dir: &Path, outcomes: &[ScenarioOutcome], models: &[MiModel]) -> Result<(), StudyError> {
    let all: Vec<&ScenarioOutcome> = outcomes.iter().collect();

    let path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for o in outcomes {
        for row in &o.summaries {
            w.serialize(row)?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    wide_table(&out_dir.join("convergence.csv"), &all, models, |r| {
        format!("{} ({:.1}%)", r.n_fitted, r.fitted_pct)
    })?;
    let nulls: Vec<&ScenarioOutcome> = outcomes.iter().filter(|o| o.spec.null).collect();
    if !nulls.is_empty() {
        wide_table(&out_dir.join("false_positive.csv"), &nulls, models, |r| fmt_opt(r.rejection_pct, 2))?;
    }
    wide_table(&out_dir.join("modse.csv"), &all, models, |r| fmt_opt(r.modse_rel_err_pct, 2))?;

    let path = out_dir.join("performance.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SCENARIO_HEADER.iter().copied().chain(["null", "model", "measure", "value", "mcse"]))?;
    for o in outcomes {
        for r in &o.summaries {
            let measures: [(&str, Option<f64>, Option<f64>); 8] = [
                ("fitted_pct", Some(r.fitted_pct), None),
                ("bias_pct", r.bias_pct, r.bias_pct_mcse),
                ("halfwidth_change_pct", r.halfwidth_change_pct, None),
                ("coverage_pct", r.coverage_pct, r.coverage_mcse),
                ("coverage_change_pct", r.coverage_change_pct, None),
                (r.rejection_label(), r.rejection_pct, r.rejection_mcse),
                ("modse_rel_err_pct", r.modse_rel_err_pct, r.modse_rel_err_mcse),
                ("empirical_se", r.empirical_se, r.empirical_se_mcse),
            ];
            for (name, value, mcse) in measures {
                let Some(value) = value else { continue };
                let mut rec: Vec<String> = scenario_columns(&o.spec).into();
                rec.extend([
                    o.spec.null.to_string(),
                    r.model.to_string(),
                    name.to_owned(),
                    value.to_string(),
                    mcse.map_or_else(String::new, |m| m.to_string()),
                ]);
                w.write_record(rec)?;
            }
        }
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

/// Writes a trial in the dataset dump layout.
pub fn dump_dataset(data: &TrialDataset, path: &Path) -> Result<(), StudyError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    data.write_csv(&mut out, true)?;
    out.flush().map_err(io_err(path))
}
