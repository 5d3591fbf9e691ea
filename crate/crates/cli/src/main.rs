use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use screening_iv::inference::{bootstrap_many, regular_grid, run_sim_study_with, Resampling, StudyOptions};
use screening_iv::{
    hr_curve, read_dataset_csv, select_timepoint, simulate_trial, write_dataset_csv, Estimand, PreparedTrial,
    RiskSetEntry, ScenarioConfig, TrialDataset,
};

#[derive(Parser)]
#[command(name = "screening-iv", version, about = "Early-treatment effects in randomized screening trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trial from a scenario config and write the dataset CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate effects on a trial dataset.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        time: f64,
        #[arg(long, value_enum, default_value = "all")]
        method: Method,
        /// Bootstrap replicates for standard errors; 0 skips the bootstrap.
        #[arg(long, default_value_t = 500)]
        bootstrap: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Administrative censoring time; defaults to the latest event time.
        #[arg(long)]
        horizon: Option<f64>,
        /// Bootstrap within arms instead of across the whole trial.
        #[arg(long)]
        stratified: bool,
        /// Writes JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimating-equation log hazard ratio over a grid of follow-up times.
    HrCurve {
        #[arg(long)]
        data: PathBuf,
        /// Grid as start:stop:step.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 500)]
        bootstrap: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo study of the estimators under a scenario.
    SimStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replicates: usize,
        #[arg(long, default_value_t = 50)]
        bootstrap: usize,
        #[arg(long)]
        time: f64,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        threads: Option<usize>,
        /// Comma-separated subset of estimators (default: all six).
        #[arg(long, value_enum, value_delimiter = ',')]
        estimators: Vec<EstimatorArg>,
        #[arg(long)]
        stratified: bool,
        /// Subjects simulated for the marginal log hazard ratio under confounding.
        #[arg(long, default_value_t = 1_000_000)]
        oracle_size: usize,
        /// Put detected subjects at risk from baseline in that marginal fit instead of
        /// from detection.
        #[arg(long)]
        truth_from_baseline: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ee,
    Mle,
    Acfr,
    Pcfr,
    Its,
    All,
}

impl Method {
    fn estimands(self) -> Vec<Estimand> {
        match self {
            Method::Ee => vec![Estimand::LogThetaEe],
            Method::Mle => vec![Estimand::LogThetaMle],
            Method::Acfr => vec![Estimand::Acfr],
            Method::Pcfr => vec![Estimand::Pcfr],
            Method::Its => vec![Estimand::ItsAbs, Estimand::ItsProp],
            Method::All => Estimand::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum EstimatorArg {
    LogThetaEe,
    LogThetaMle,
    Acfr,
    Pcfr,
    ItsAbs,
    ItsProp,
}

impl From<EstimatorArg> for Estimand {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::LogThetaEe => Estimand::LogThetaEe,
            EstimatorArg::LogThetaMle => Estimand::LogThetaMle,
            EstimatorArg::Acfr => Estimand::Acfr,
            EstimatorArg::Pcfr => Estimand::Pcfr,
            EstimatorArg::ItsAbs => Estimand::ItsAbs,
            EstimatorArg::ItsProp => Estimand::ItsProp,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed),
        Command::Estimate { data, time, method, bootstrap, seed, horizon, stratified, out } => {
            estimate(&data, time, method, bootstrap, seed, horizon, stratified, out.as_deref())
        }
        Command::HrCurve { data, grid, bootstrap, seed, horizon, out } => {
            curve(&data, &grid, bootstrap, seed, horizon, &out)
        }
        Command::SimStudy {
            config,
            replicates,
            bootstrap,
            time,
            out,
            threads,
            estimators,
            stratified,
            oracle_size,
            truth_from_baseline,
        } => {
            let estimands: Vec<Estimand> = if estimators.is_empty() {
                Estimand::ALL.to_vec()
            } else {
                estimators.into_iter().map(Into::into).collect()
            };
            let opts = StudyOptions {
                resampling: if stratified { Resampling::Stratified } else { Resampling::Unstratified },
                n_oracle: oracle_size,
                truth_entry: if truth_from_baseline { RiskSetEntry::Baseline } else { RiskSetEntry::Detection },
            };
            sim_study(&config, replicates, bootstrap, time, &out, threads, &estimands, opts)
        }
    }
}

fn check_output(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    Ok(())
}

/// Writes through a temporary sibling and renames, so a failed run leaves no partial file.
fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        body(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    ScenarioConfig::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn load_data(path: &Path, horizon: Option<f64>) -> Result<TrialDataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset_csv(BufReader::new(file), horizon).with_context(|| format!("reading dataset {}", path.display()))
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    check_output(out)?;
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let data = simulate_trial(&cfg)?;
    write_atomically(out, |w| Ok(write_dataset_csv(&data, w)?))?;
    print!("{}", data.summary());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    path: &Path,
    t: f64,
    method: Method,
    b: usize,
    seed: u64,
    horizon: Option<f64>,
    stratified: bool,
    out: Option<&Path>,
) -> Result<()> {
    if b == 1 {
        bail!("--bootstrap must be 0 or at least 2");
    }
    if let Some(out) = out {
        check_output(out)?;
    }
    let data = load_data(path, horizon)?;
    let prep = PreparedTrial::new(&data);
    let estimands = method.estimands();
    let how = if stratified { Resampling::Stratified } else { Resampling::Unstratified };
    let ctx = screening_iv::iv::EstimationContext::new(&prep, None, t)?;
    let boots = if b == 0 {
        Vec::new()
    } else {
        eprintln!("bootstrapping {} estimator(s) with {b} resamples", estimands.len());
        bootstrap_many(&prep, &estimands, t, b, seed, how)
    };
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (k, &e) in estimands.iter().enumerate() {
        let outcome = ctx.estimate(e).map_err(anyhow::Error::from).and_then(|mut r| {
            if let Some(boot) = boots.get(k) {
                let boot = boot.as_ref().map_err(|err| anyhow!("{err}"))?;
                r.se = Some(boot.se);
                r.ci_lower = Some(boot.ci_lower);
                r.ci_upper = Some(boot.ci_upper);
            }
            Ok(r)
        });
        match outcome {
            Ok(r) => results.push(serde_json::to_value(&r)?),
            Err(err) => {
                results.push(json!({ "estimand": e, "error": err.to_string() }));
                failures.push(format!("{e}: {err}"));
            }
        }
    }
    let text = serde_json::to_string_pretty(&Value::Array(results))?;
    for f in &failures {
        eprintln!("{f}");
    }
    if failures.len() == estimands.len() {
        bail!("every requested estimator failed");
    }
    match out {
        Some(out) => write_atomically(out, |w| Ok(writeln!(w, "{text}")?))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, stop, step] = parts[..] else {
        bail!("grid must be start:stop:step, got {spec:?}");
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| anyhow!("grid value {s:?}: {e}"));
    Ok(regular_grid(num(start)?, num(stop)?, num(step)?)?)
}

fn curve(path: &Path, grid: &str, b: usize, seed: u64, horizon: Option<f64>, out: &Path) -> Result<()> {
    let grid = parse_grid(grid)?;
    check_output(out)?;
    let data = load_data(path, horizon)?;
    eprintln!("estimating {} grid points with {b} bootstrap resamples", grid.len());
    let curve = hr_curve(&data, &grid, b, seed)?;
    let missing = curve.points.iter().filter(|p| p.log_theta.is_none()).count();
    if missing > 0 {
        eprintln!("{missing} grid point(s) failed and are left empty");
    }
    let summary = match select_timepoint(&curve) {
        Ok(s) => json!({
            "min_variance": {
                "t": s.min_variance.t,
                "log_theta": s.min_variance.log_theta,
                "hr": s.min_variance.log_theta.exp(),
                "se": s.min_variance.se,
            },
            "ivw": { "log_theta": s.ivw, "hr": s.ivw.exp() },
        }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let mut summary_path = out.as_os_str().to_owned();
    summary_path.push(".summary.json");
    write_atomically(out, |w| Ok(curve.write_csv(w)?))?;
    write_atomically(Path::new(&summary_path), |w| Ok(writeln!(w, "{}", serde_json::to_string_pretty(&summary)?)?))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sim_study(
    config: &Path,
    r: usize,
    b: usize,
    t: f64,
    out: &Path,
    threads: Option<usize>,
    estimands: &[Estimand],
    opts: StudyOptions,
) -> Result<()> {
    check_output(out)?;
    let cfg = load_config(config)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        if k == 0 {
            bail!("--threads must be positive");
        }
        pool = pool.num_threads(k);
    }
    let pool = pool.build()?;
    let step = (r / 20).max(1);
    let progress = |done: usize| {
        if done.is_multiple_of(step) || done == r {
            eprintln!("replicate {done}/{r}");
        }
    };
    let result = pool.install(|| run_sim_study_with(&cfg, estimands, r, b, t, opts, &progress))?;
    write_atomically(out, |w| Ok(result.write_csv(w)?))?;
    for row in &result.rows {
        if row.n_failed > 0 {
            eprintln!("{}: {} replicate(s) failed", row.estimator, row.n_failed);
        }
    }
    Ok(())
}
