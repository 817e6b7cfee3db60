//! Simulation engine for retrieved-dropout multiple imputation of a binary
//! endpoint under a treatment-policy estimand.
//!
//! A scenario ([`scenario`]) drives a copula data-generating model
//! ([`dgm`]) with treatment discontinuations and study withdrawals. Missing
//! policy outcomes are multiply imputed under one of five models
//! ([`impute`], built on the logistic solver in [`glm`]), analysed and
//! pooled by Rubin's rules ([`pool`]), and summarised against the true
//! effect ([`metrics`]). [`study`] runs whole grids; [`varinfl`] is the
//! closed-form variance-inflation calculator.

pub mod dgm;
pub mod glm;
pub mod impute;
pub mod metrics;
pub mod pool;
pub mod rng;
pub mod scenario;
pub mod study;
pub mod varinfl;

pub use dgm::{simulate_trial, PatientRecord, TrialDataset};
pub use impute::{impute_sequential, CompletedDataset, MiModel};
pub use metrics::{summarize, true_log_or, RepResult, SummaryRow, TrueEffect};
pub use pool::{analyze, rubin_pool, PooledEstimate};
pub use scenario::{load_scenario, preset, preset_grid, preset_names, Arm, ScenarioSpec};
pub use study::{run_scenario, run_study, RunOptions};
