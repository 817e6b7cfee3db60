use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rdmi::impute::{impute_sequential, MiModel};
use rdmi::metrics::{true_log_or, ORACLE_N};
use rdmi::study::{dump_dataset, impute_key, run_study, RunOptions, ScenarioOutcome};
use rdmi::varinfl::{report, GroupCounts};
use rdmi::{load_scenario, preset, preset_grid, preset_names, simulate_trial, ScenarioSpec};

/// Simulation studies of retrieved-dropout multiple imputation for binary
/// endpoints under a treatment-policy estimand.
#[derive(Parser)]
#[command(name = "rdmi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios and write summary tables.
    Run(RunArgs),
    /// List the built-in scenarios or print one as TOML.
    Preset {
        #[arg(long, conflicts_with = "name")]
        list: bool,
        /// List the scenarios of a named grid (study1, study2, stress, with optional -null).
        #[arg(long, conflicts_with_all = ["name", "list"])]
        grid: Option<String>,
        name: Option<String>,
    },
    /// Variance inflation of a policy response proportion from imputing
    /// missing post-IE outcomes.
    Varinfl {
        /// Completers on treatment.
        #[arg(long)]
        n1: f64,
        /// Retrieved dropouts (IE, observed).
        #[arg(long)]
        n2: f64,
        /// IE and missing.
        #[arg(long)]
        n3: f64,
        /// Response rate on treatment.
        #[arg(long)]
        p1: f64,
        /// Response rate after the IE.
        #[arg(long)]
        p2: f64,
    },
    /// Compute the true policy log odds ratio of a scenario.
    Oracle {
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long, default_value_t = ORACLE_N)]
        oracle_n: usize,
    },
    /// Simulate one replicate and dump it, optionally with imputations.
    Simulate {
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        /// Imputation model; dumps every completed dataset instead of the raw trial.
        #[arg(long)]
        impute: Option<MiModel>,
        #[arg(long)]
        imputations: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ScenarioSource {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

impl ScenarioSource {
    fn load(&self) -> Result<ScenarioSpec> {
        match (&self.config, &self.preset) {
            (Some(path), _) => read_config(path),
            (_, Some(name)) => Ok(preset(name)?),
            _ => unreachable!("clap enforces one source"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file; repeatable.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Built-in scenario; repeatable.
    #[arg(long)]
    preset: Vec<String>,
    /// Built-in grid: study1, study2 or stress, each with an optional -null suffix.
    #[arg(long)]
    grid: Vec<String>,
    /// Replicates per scenario (overrides the scenarios' n_sims).
    #[arg(long)]
    sims: Option<usize>,
    /// Imputations per model (overrides n_imputations).
    #[arg(long)]
    imputations: Option<usize>,
    /// Master seed (overrides master_seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "RDMI_WORKERS", default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value = "rdmi-out")]
    out: PathBuf,
    /// Comma-separated models; FULL is always added.
    #[arg(long, value_delimiter = ',', default_value = "FULL,CICS,POOLED_OICS,OICS,OITS,PICS")]
    models: Vec<MiModel>,
    /// Continue an interrupted run in the same output directory.
    #[arg(long)]
    resume: bool,
    /// Patients per arm of the trial used for the true effect.
    #[arg(long, default_value_t = ORACLE_N)]
    oracle_n: usize,
    /// No progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn read_config(path: &Path) -> Result<ScenarioSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut spec = load_scenario(&text).with_context(|| format!("in {}", path.display()))?;
    if spec.name == "custom" {
        if let Some(stem) = path.file_stem() {
            spec.name = stem.to_string_lossy().into_owned();
        }
    }
    Ok(spec)
}

fn collect_specs(args: &RunArgs) -> Result<Vec<ScenarioSpec>> {
    let mut specs = Vec::new();
    for path in &args.config {
        specs.push(read_config(path)?);
    }
    for name in &args.preset {
        specs.push(preset(name)?);
    }
    for g in &args.grid {
        let Some(names) = preset_grid(g) else {
            bail!("unknown grid `{g}` (expected study1, study2 or stress, optionally with -null)");
        };
        for name in names {
            specs.push(preset(&name)?);
        }
    }
    if specs.is_empty() {
        bail!("no scenarios: pass --config, --preset or --grid");
    }
    for s in &mut specs {
        if let Some(n) = args.sims {
            s.n_sims = n;
        }
        if let Some(m) = args.imputations {
            s.n_imputations = m;
        }
        if let Some(seed) = args.seed {
            s.master_seed = seed;
        }
        s.validate().with_context(|| format!("scenario `{}`", s.name))?;
    }
    Ok(specs)
}

fn print_summary(out: &mut impl Write, outcomes: &[ScenarioOutcome]) -> io::Result<()> {
    let dash = |x: Option<f64>| x.map_or_else(|| "-".to_owned(), |v| format!("{v:.2}"));
    for o in outcomes {
        writeln!(out, "{} (theta_true {:.4})", o.spec.name, o.truth.theta)?;
        writeln!(
            out,
            "  {:<12} {:>7} {:>8} {:>8} {:>9} {:>8} {:>8}",
            "model", "fitted%", "bias%", "modse%", "coverage", "reject%", "hw_chg%"
        )?;
        for r in &o.summaries {
            writeln!(
                out,
                "  {:<12} {:>7.1} {:>8} {:>8} {:>9} {:>8} {:>8}",
                r.model.label(),
                r.fitted_pct,
                dash(r.bias_pct),
                dash(r.modse_rel_err_pct),
                dash(r.coverage_pct),
                dash(r.rejection_pct),
                dash(r.halfwidth_change_pct),
            )?;
        }
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let specs = collect_specs(&args)?;
    let opts = RunOptions {
        models: args.models.clone(),
        workers: args.workers,
        oracle_n: args.oracle_n,
        resume: args.resume,
        ..RunOptions::default()
    };
    let last = Mutex::new(String::new());
    let quiet = args.quiet;
    let progress = move |name: &str, done: usize, total: usize| {
        if quiet {
            return;
        }
        let line = format!("{name}: {done}/{total}");
        let mut last = last.lock().unwrap();
        if *last != line {
            eprintln!("{line}");
            *last = line;
        }
    };
    let outcomes = run_study(&specs, &opts, &args.out, &progress)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    print_summary(&mut out, &outcomes)?;
    writeln!(out, "tables written to {}", args.out.display())?;
    out.flush()?;
    Ok(())
}

fn simulate(
    spec: ScenarioSpec,
    replicate: u64,
    model: Option<MiModel>,
    imputations: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let data = simulate_trial(&spec, replicate)?;
    let Some(model) = model else {
        return match out {
            Some(path) => Ok(dump_dataset(&data, &path)?),
            None => {
                let stdout = io::stdout();
                data.write_csv(stdout.lock(), true)?;
                Ok(())
            }
        };
    };
    let m = imputations.unwrap_or(spec.n_imputations);
    let completed = impute_sequential(&data, model, m, impute_key(spec.master_seed, replicate, model))
        .with_context(|| format!("{model} is not estimable on replicate {replicate}"))?;
    let sink: Box<dyn Write> = match &out {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(io::stdout()),
    };
    let mut sink = BufWriter::new(sink);
    for (i, cd) in completed.iter().enumerate() {
        cd.write_csv(&data, &mut sink, i == 0)?;
    }
    sink.flush()?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Preset { list, grid, name } => {
            if let Some(g) = grid {
                let Some(names) = preset_grid(&g) else { bail!("unknown grid `{g}`") };
                println!("{}", names.join("\n"));
            } else if let Some(name) = name {
                print!("{}", preset(&name)?.to_toml());
            } else if list {
                println!("{}", preset_names().join("\n"));
            } else {
                bail!("pass --list, --grid NAME or a preset name");
            }
            Ok(())
        }
        Command::Varinfl { n1, n2, n3, p1, p2 } => {
            let r = report(&GroupCounts { n1, n2, n3, p1, p2 })?;
            println!("pi_policy         {:.6}", r.pi_policy);
            println!("var_full          {:.6e}", r.var_full);
            println!("var_missing       {:.6e}", r.var_missing);
            println!("absolute_increase {:.6e}", r.absolute_increase);
            println!("relative_increase {:.6}", r.relative_increase);
            Ok(())
        }
        Command::Oracle { source, oracle_n } => {
            let spec = source.load()?;
            let t = true_log_or(&spec, oracle_n)?;
            println!("{} theta_true {:.6} mcse {:.6} oracle_n {}", spec.name, t.theta, t.mcse, t.oracle_n);
            Ok(())
        }
        Command::Simulate { source, replicate, impute, imputations, out } => {
            simulate(source.load()?, replicate, impute, imputations, out)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
