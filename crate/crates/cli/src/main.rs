//! `magic`: estimate from a CSV file, run simulation studies, and check the
//! population identities by exact enumeration.
//!
//! Exit status: 0 success, 1 data or configuration error, 2 numerical
//! failure, 3 too many failed replications, 4 oracle check failed.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magic_iv::baselines::{self, BaselineResult};
use magic_iv::cue::{CueOptions, RidgePolicy};
use magic_iv::data::read_header;
use magic_iv::diagnostics::f_stat;
use magic_iv::interactions::InteractionPlan;
use magic_iv::oracle::{self, run_check, OracleCheck};
use magic_iv::simulate::{gen_dataset, run_monte_carlo, InteractionCoding, McMethod, Scenario, ScenarioConfig};
use magic_iv::{fit, load_csv, Error, FitOptions};
use serde::Serialize;
use serde_json::json;

use config::Settings;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "magic",
    version,
    about = "Causal effects from interactions of candidate instruments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the causal effect from a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study and print its summary table.
    Simulate(SimulateArgs),
    /// Verify identification and orthogonality on an enumerated population.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct CueFlags {
    /// Highest interaction order.
    #[arg(long = "q")]
    q: Option<usize>,
    /// Lower end of the search interval for beta.
    #[arg(long, allow_hyphen_values = true)]
    lower: Option<f64>,
    /// Upper end of the search interval for beta.
    #[arg(long, allow_hyphen_values = true)]
    upper: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Golden-section tolerance on beta.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    ci_level: Option<f64>,
    /// `ladder` (regularize a singular weight matrix) or `off`.
    #[arg(long)]
    ridge: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    /// CSV file with a header row.
    input: Option<PathBuf>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    exposure: Option<String>,
    /// Comma-separated instrument columns; default: every other column.
    #[arg(long)]
    instruments: Option<String>,
    /// Instrument pair for the ratio baseline, e.g. `z1,z2`.
    #[arg(long)]
    ratio_pair: Option<String>,
    #[command(flatten)]
    cue: CueFlags,
    /// `key = value` or JSON settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the result JSON here instead of standard output.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// I, II, III, IV or custom.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Interaction strength; pairwise coefficients are c / sqrt(n).
    #[arg(long)]
    c: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add outcome interactions that violate the additive linear model.
    #[arg(long)]
    misspecify: bool,
    /// Draw the violation coefficients once per seed.
    #[arg(long)]
    freeze_misspecification: bool,
    /// `centered` or `raw` pairwise products in the design.
    #[arg(long)]
    interaction_coding: Option<String>,
    /// Comma-separated: magic, tsls, efficient.
    #[arg(long)]
    methods: Option<String>,
    /// Worker threads (0 = all cores). Does not change results.
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    cue: CueFlags,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the first replication's data as CSV (columns y, d, z1..zp) and stop.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Write the summary JSON here; the table then goes to standard output.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Number of instruments (at most 12).
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long = "q", default_value_t = 2)]
    q: usize,
    /// Use the dependent-instrument counterexample; failure is expected.
    #[arg(long)]
    dependent: bool,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Comma-separated beta values for the orthogonality check.
    #[arg(long, default_value = "-2,-1,0,1,2", allow_hyphen_values = true)]
    beta_grid: String,
}

enum Failure {
    Lib(Error),
    Exit(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate(a),
        Command::OracleCheck(a) => oracle_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Exit(code)) => ExitCode::from(code),
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::TooManyExcluded { .. } => ExitCode::from(3),
                e if e.is_data_error() => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

const CUE_DEFAULTS: [(&str, &str); 7] = [
    ("q", "2"),
    ("lower", "-10"),
    ("upper", "10"),
    ("grid_points", "512"),
    ("tol", "1e-9"),
    ("ci_level", "0.95"),
    ("ridge", "ladder"),
];

fn apply_cue_flags(s: &mut Settings, f: &CueFlags) -> Result<(), Error> {
    s.set_opt("q", f.q)?;
    s.set_opt("lower", f.lower)?;
    s.set_opt("upper", f.upper)?;
    s.set_opt("grid_points", f.grid_points)?;
    s.set_opt("tol", f.tol)?;
    s.set_opt("ci_level", f.ci_level)?;
    s.set_opt("ridge", f.ridge.clone())
}

fn cue_options(s: &Settings) -> Result<CueOptions, Error> {
    Ok(CueOptions {
        bounds: (s.get("lower")?, s.get("upper")?),
        grid_points: s.get("grid_points")?,
        tol: s.get("tol")?,
        ci_level: s.get("ci_level")?,
        ridge: s.get::<RidgePolicy>("ridge")?,
    })
}

fn settings(defaults: &[(&str, &str)], config: Option<&Path>) -> Result<Settings, Error> {
    let mut s = Settings::from_defaults(defaults);
    if let Some(path) = config {
        s.merge_file(path)?;
    }
    Ok(s)
}

fn emit(value: &impl Serialize, output: Option<&Path>) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    match output {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// estimate

#[derive(Serialize)]
struct EstimateFields {
    beta_hat: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
    ci_level: f64,
    j_stat: Option<f64>,
    j_df: Option<usize>,
    j_pvalue: Option<f64>,
    q_min: f64,
    r: usize,
    n: usize,
    p: usize,
    q: usize,
    boundary_flag: bool,
    ridge_used: bool,
    f_stat: Option<f64>,
    plan: InteractionPlan,
}

#[derive(Serialize)]
#[serde(untagged)]
enum BaselineEntry {
    Ok(BaselineResult),
    Failed { method: &'static str, error: String },
}

fn baseline(method: &'static str, r: magic_iv::Result<BaselineResult>) -> BaselineEntry {
    match r {
        Ok(b) => BaselineEntry::Ok(b),
        Err(e) => BaselineEntry::Failed {
            method,
            error: e.to_string(),
        },
    }
}

fn estimate(a: EstimateArgs) -> Result<(), Failure> {
    let mut defaults = vec![
        ("input", ""),
        ("outcome", "y"),
        ("exposure", "d"),
        ("instruments", ""),
        ("ratio_pair", ""),
    ];
    defaults.extend_from_slice(&CUE_DEFAULTS);
    let mut s = settings(&defaults, a.config.as_deref())?;
    s.set_opt("input", a.input.as_ref().map(|p| p.display().to_string()))?;
    s.set_opt("outcome", a.outcome)?;
    s.set_opt("exposure", a.exposure)?;
    s.set_opt("instruments", a.instruments)?;
    s.set_opt("ratio_pair", a.ratio_pair)?;
    apply_cue_flags(&mut s, &a.cue)?;

    let input = s.raw("input").to_string();
    if input.is_empty() {
        return Err(Error::Config("estimate needs an input CSV".into()).into());
    }
    let (outcome, exposure) = (s.raw("outcome").to_string(), s.raw("exposure").to_string());
    let mut instruments = s.list("instruments");
    if instruments.is_empty() {
        instruments = read_header(&input)?
            .into_iter()
            .filter(|h| *h != outcome && *h != exposure)
            .collect();
        // record the binding actually used
        s.set("instruments", instruments.join(","))?;
    }
    let ds = load_csv(&input, &outcome, &exposure, &instruments)?;
    let opts = FitOptions {
        q: s.get("q")?,
        cue: cue_options(&s)?,
    };
    let est = fit(&ds, &opts)?;
    let cue = &est.cue;
    let f = f_stat(&ds, &est.plan).map(|r| r.f_value).ok();

    let pair = match s.list("ratio_pair").as_slice() {
        [] => Ok((0, 1)),
        [j, k] => {
            let pos = |name: &String| {
                instruments
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))
            };
            Ok((pos(j)?, pos(k)?))
        }
        _ => Err(Error::Config("ratio_pair takes two instrument names".into())),
    }?;
    let baselines = vec![
        baseline("tsls", baselines::tsls(&ds)),
        baseline("ratio_pair", baselines::ratio_pair(&ds, pair.0, pair.1)),
        baseline("efficient_fixed_r", baselines::efficient_fixed_r(&ds, &est.plan, None)),
    ];
    let (g2, g3) = est.growth();
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "result": EstimateFields {
            beta_hat: cue.beta_hat,
            se: cue.se,
            ci_low: cue.ci_low,
            ci_high: cue.ci_high,
            ci_level: cue.ci_level,
            j_stat: cue.j_stat,
            j_df: cue.j_df,
            j_pvalue: cue.j_pvalue,
            q_min: cue.q_min,
            r: cue.r,
            n: cue.n,
            p: ds.p(),
            q: est.plan.q(),
            boundary_flag: cue.boundary_flag,
            ridge_used: cue.ridge_used,
            f_stat: f,
            plan: est.plan.clone(),
        },
        "diagnostics": {
            "r2_over_n": g2,
            "r3_over_n": g3,
            "ridge_scale": cue.ridge_scale,
            "h_hat": cue.h_hat,
            "variance_reliable": cue.variance_reliable,
        },
        "baselines": baselines,
        "instruments": instruments,
        "nuisance": { "mu_hat": est.nuisance.mu_hat },
        "config": s.echo(&["output", "config"]),
    });
    if cue.boundary_flag {
        eprintln!("warning: estimate at the boundary of the search interval; identification may be weak");
    }
    emit(&doc, a.output.as_deref())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let mut defaults = vec![
        ("scenario", "I"),
        ("p", "10"),
        ("n", "5000"),
        ("c", "3.75"),
        ("beta", "0"),
        ("mu", "0.5"),
        ("reps", "100"),
        ("seed", "1"),
        ("misspecify", "false"),
        ("freeze_misspecification", "false"),
        ("interaction_coding", "centered"),
        ("methods", "magic,tsls"),
        ("workers", "0"),
        ("theta_mean", ""),
        ("theta_var", ""),
        ("pi_mean", ""),
        ("pi_var", ""),
        ("sigma_eps", "1"),
        ("sigma_nu", "1"),
        ("sigma_cov", "0.25"),
    ];
    defaults.extend_from_slice(&CUE_DEFAULTS);
    let mut s = settings(&defaults, a.config.as_deref())?;
    s.set_opt("scenario", a.scenario)?;
    s.set_opt("p", a.p)?;
    s.set_opt("n", a.n)?;
    s.set_opt("c", a.c)?;
    s.set_opt("beta", a.beta)?;
    s.set_opt("mu", a.mu)?;
    s.set_opt("reps", a.reps)?;
    s.set_opt("seed", a.seed)?;
    s.set_opt("misspecify", a.misspecify.then_some(true))?;
    s.set_opt("freeze_misspecification", a.freeze_misspecification.then_some(true))?;
    s.set_opt("interaction_coding", a.interaction_coding)?;
    s.set_opt("methods", a.methods)?;
    s.set_opt("workers", a.workers)?;
    apply_cue_flags(&mut s, &a.cue)?;

    let (se, sn, sc): (f64, f64, f64) = (s.get("sigma_eps")?, s.get("sigma_nu")?, s.get("sigma_cov")?);
    let cfg = ScenarioConfig {
        p: s.get("p")?,
        n: s.get("n")?,
        q: s.get("q")?,
        beta_true: s.get("beta")?,
        c: s.get("c")?,
        mu: s.get("mu")?,
        sigma: [[se, sc], [sc, sn]],
        scenario: s.get::<Scenario>("scenario")?,
        interaction_coding: s.get::<InteractionCoding>("interaction_coding")?,
        misspecify_alice: s.get("misspecify")?,
        freeze_misspecification: s.get("freeze_misspecification")?,
        theta_mean: s.get_opt("theta_mean")?,
        theta_var: s.get_opt("theta_var")?,
        pi_mean: s.get_opt("pi_mean")?,
        pi_var: s.get_opt("pi_var")?,
        seed: s.get("seed")?,
    };
    if let Some(path) = a.dataset.as_deref() {
        let (ds, _) = gen_dataset(&cfg, 0)?;
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ds.write_csv(std::io::BufWriter::new(file), "y", "d")?;
        return Ok(());
    }
    let methods = s
        .list("methods")
        .iter()
        .map(|m| m.parse::<McMethod>())
        .collect::<Result<Vec<_>, _>>()?;
    let reps: usize = s.get("reps")?;
    let summary = run_monte_carlo(&cfg, reps, &methods, &cue_options(&s)?, s.get("workers")?)?;

    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "summary": summary,
        "config": s.echo(&["output", "config", "workers"]),
    });
    let table = summary.table();
    match a.output.as_deref() {
        Some(path) => {
            emit(&doc, Some(path))?;
            print!("{table}");
        }
        None => {
            emit(&doc, None)?;
            eprint!("{table}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle-check

fn oracle_check(a: OracleArgs) -> Result<(), Failure> {
    let grid = a
        .beta_grid
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad beta grid value `{v}`")))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let dgp = if a.dependent {
        if a.p != 2 {
            return Err(Error::Config("the dependent fixture has p = 2".into()).into());
        }
        oracle::dependent_fixture()
    } else {
        oracle::pairwise_fixture(a.p)
    };
    let report: OracleCheck = run_check(&dgp, a.q, &grid, a.step)?;
    let status = match (a.dependent, report.passed()) {
        (false, true) => "pass",
        (false, false) => "fail",
        (true, false) => "expected-fail",
        (true, true) => "unexpected-pass",
    };
    let beta = report
        .population_beta
        .map_or_else(|| "not identified".to_string(), |b| format!("{b:.15}"));
    println!(
        "fixture            {}",
        if a.dependent { "dependent pair" } else { "independent" }
    );
    println!("p, q               {}, {}", report.p, report.q);
    println!("beta (true)        {}", report.beta_true);
    println!("population beta    {beta}");
    if let Some(err) = report.beta_error {
        println!("|error|            {err:.3e} (tolerance {:.0e})", oracle::BETA_TOL);
    }
    println!("max |E g| at truth {:.3e}", report.moment_at_truth);
    println!(
        "max derivative     {:.3e} at {} (order {}, beta {}; tolerance {:.0e})",
        report.orthogonality.max_abs_derivative,
        report.orthogonality.coordinate,
        report.orthogonality.order,
        report.orthogonality.beta,
        oracle::ORTHOGONALITY_TOL
    );
    println!("status             {status}");
    match status {
        "pass" | "expected-fail" => Ok(()),
        _ => Err(Failure::Exit(4)),
    }
}
