//! Bootstrap inference, hazard-ratio curves, time-point selection and the Monte Carlo
//! study engine.
//!
//! Resamples are represented as per-subject frequency weights over a [`PreparedTrial`],
//! so a dataset is sorted once no matter how many resamples are drawn. Resample `k`
//! under seed `s` always comes from stream `(s, k)`; when a target estimator fails on a
//! resample the next resample is used, and each target keeps its first `B` successes.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Arm, TrialDataset, ValidationError};
use crate::estimators::{EstimationError, PreparedTrial};
use crate::iv::{Estimand, EstimationContext};
use crate::num::{format_sig6, Real};
use crate::quadrature::QuadratureNotConverged;
use crate::rng;
use crate::simulate::{simulate_trial, ScenarioConfig};
use crate::truth::{marginal_true_loghr_with, true_marginal_quantities, MarginalError, RiskSetEntry};

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewBootstrapReplicates(usize),
    #[error("only {succeeded} of {needed} bootstrap replicates succeeded after {attempts} resamples")]
    TooManyFailedReplicates { succeeded: usize, needed: usize, attempts: usize },
    #[error("estimation failed at every grid point")]
    AllPointsFailed,
    #[error("curve has no point with a standard error")]
    EmptyCurve,
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("a simulation study needs at least 2 replicates, got {0}")]
    TooFewStudyReplicates(usize),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Simulation(#[from] ValidationError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureNotConverged),
    #[error(transparent)]
    Marginal(#[from] MarginalError),
}

/// How subjects are drawn for a bootstrap resample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Resampling {
    /// `n` subjects with replacement from the whole trial; arm sizes vary.
    #[default]
    Unstratified,
    /// Each arm resampled separately at its observed size.
    Stratified,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct BootstrapResult<T> {
    pub estimate: T,
    pub se: T,
    pub ci_lower: T,
    pub ci_upper: T,
    /// Successful replicate estimates in resample order.
    #[serde(skip)]
    pub replicates: Vec<T>,
    /// Resamples drawn, including failed ones.
    pub attempts: usize,
}

impl<T: Real> BootstrapResult<T> {
    fn new(estimate: T, replicates: Vec<T>, attempts: usize) -> Self {
        let se = sample_sd(&replicates);
        let half = T::lit(Z95) * se;
        BootstrapResult { estimate, se, ci_lower: estimate - half, ci_upper: estimate + half, replicates, attempts }
    }
}

fn mean<T: Real>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::from_count(xs.len())
}

/// Standard deviation with divisor `n - 1`; zero for fewer than two values.
fn sample_sd<T: Real>(xs: &[T]) -> T {
    if xs.len() < 2 {
        return T::zero();
    }
    let m = mean(xs);
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / T::from_count(xs.len() - 1)).sqrt()
}

struct Resampler {
    n: usize,
    strata: Option<[Vec<usize>; 2]>,
}

impl Resampler {
    fn new<T: Real>(data: &TrialDataset<T>, how: Resampling) -> Self {
        let strata = match how {
            Resampling::Unstratified => None,
            Resampling::Stratified => {
                let idx =
                    |arm| data.records().iter().enumerate().filter(|(_, r)| r.arm == arm).map(|(i, _)| i).collect();
                Some([idx(Arm::Control), idx(Arm::Screening)])
            }
        };
        Resampler { n: data.len(), strata }
    }

    fn weights(&self, seed: u64, k: usize) -> Vec<u32> {
        let mut r = rng::stream(seed, k as u64);
        let mut w = vec![0u32; self.n];
        match &self.strata {
            None => {
                for _ in 0..self.n {
                    w[r.random_range(0..self.n)] += 1;
                }
            }
            Some(strata) => {
                for s in strata.iter().filter(|s| !s.is_empty()) {
                    for _ in 0..s.len() {
                        w[s[r.random_range(0..s.len())]] += 1;
                    }
                }
            }
        }
        w
    }
}

/// Bootstrap replicate estimates for several `(estimand, t)` targets sharing one
/// sequence of resamples. Each target keeps its first `b` successful resamples; at most
/// `10·b` resamples are drawn in total.
fn bootstrap_targets<T: Real>(
    prep: &PreparedTrial<'_, T>,
    targets: &[(Estimand, T)],
    b: usize,
    seed: u64,
    how: Resampling,
) -> Vec<Result<(Vec<T>, usize), InferenceError>> {
    let cap = 10 * b;
    let resampler = Resampler::new(prep.dataset(), how);
    let mut kept: Vec<Vec<T>> = vec![Vec::with_capacity(b); targets.len()];
    let mut used = vec![0usize; targets.len()];
    let mut drawn = 0;
    while drawn < cap {
        let active: Vec<usize> = (0..targets.len()).filter(|&j| kept[j].len() < b).collect();
        if active.is_empty() {
            break;
        }
        let deficit = active.iter().map(|&j| b - kept[j].len()).max().unwrap_or(0);
        let batch = deficit.min(cap - drawn);
        let results: Vec<Vec<Option<T>>> = (drawn..drawn + batch)
            .into_par_iter()
            .map(|k| {
                let w = resampler.weights(seed, k);
                let mut ctx: Vec<(T, EstimationContext<'_, '_, T>)> = Vec::new();
                active
                    .iter()
                    .map(|&j| {
                        let (est, t) = targets[j];
                        let pos = match ctx.iter().position(|(tc, _)| *tc == t) {
                            Some(p) => p,
                            None => {
                                ctx.push((t, EstimationContext::new(prep, Some(&w), t).ok()?));
                                ctx.len() - 1
                            }
                        };
                        ctx[pos].1.estimate(est).ok().map(|r| r.value).filter(|v| v.is_finite())
                    })
                    .collect()
            })
            .collect();
        for row in results {
            drawn += 1;
            for (&j, v) in active.iter().zip(row) {
                if kept[j].len() < b {
                    used[j] = drawn;
                    if let Some(v) = v {
                        kept[j].push(v);
                    }
                }
            }
        }
    }
    kept.into_iter()
        .zip(used)
        .map(|(reps, attempts)| {
            if reps.len() == b {
                Ok((reps, attempts))
            } else {
                Err(InferenceError::TooManyFailedReplicates { succeeded: reps.len(), needed: b, attempts })
            }
        })
        .collect()
}

/// Bootstrap standard error and normal-approximation 95% interval for one estimator.
pub fn bootstrap_se<T: Real>(
    data: &TrialDataset<T>,
    estimand: Estimand,
    t: T,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult<T>, InferenceError> {
    bootstrap_se_with(data, estimand, t, b, seed, Resampling::default())
}

pub fn bootstrap_se_with<T: Real>(
    data: &TrialDataset<T>,
    estimand: Estimand,
    t: T,
    b: usize,
    seed: u64,
    how: Resampling,
) -> Result<BootstrapResult<T>, InferenceError> {
    let prep = PreparedTrial::new(data);
    bootstrap_many(&prep, &[estimand], t, b, seed, how).pop().expect("one target")
}

/// Point estimates with bootstrap intervals for several estimators at one time,
/// sharing resamples.
pub fn bootstrap_many<T: Real>(
    prep: &PreparedTrial<'_, T>,
    estimands: &[Estimand],
    t: T,
    b: usize,
    seed: u64,
    how: Resampling,
) -> Vec<Result<BootstrapResult<T>, InferenceError>> {
    if b < 2 {
        return estimands.iter().map(|_| Err(InferenceError::TooFewBootstrapReplicates(b))).collect();
    }
    let ctx = match EstimationContext::new(prep, None, t) {
        Ok(c) => c,
        Err(e) => return estimands.iter().map(|_| Err(e.clone().into())).collect(),
    };
    let points: Vec<Result<T, InferenceError>> =
        estimands.iter().map(|&e| ctx.estimate(e).map(|r| r.value).map_err(Into::into)).collect();
    let targets: Vec<(Estimand, T)> =
        estimands.iter().zip(&points).filter(|(_, p)| p.is_ok()).map(|(&e, _)| (e, t)).collect();
    let mut boots = bootstrap_targets(prep, &targets, b, seed, how).into_iter();
    points
        .into_iter()
        .map(|p| {
            let est = p?;
            let (reps, attempts) = boots.next().expect("one bootstrap per successful point")?;
            Ok(BootstrapResult::new(est, reps, attempts))
        })
        .collect()
}

/// One grid point of a hazard-ratio curve; `None` fields mark a failed point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct HrPoint<T> {
    pub t: T,
    pub log_theta: Option<T>,
    pub se: Option<T>,
    pub ci_lower: Option<T>,
    pub ci_upper: Option<T>,
}

impl<T: Real> HrPoint<T> {
    pub fn hr(&self) -> Option<T> {
        self.log_theta.map(|x| x.exp())
    }

    fn missing(t: T) -> Self {
        HrPoint { t, log_theta: None, se: None, ci_lower: None, ci_upper: None }
    }
}

/// Estimating-equation `log θ̂` as a function of the follow-up cut-off `t`, with
/// bootstrap intervals on the log scale.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct HrCurve<T> {
    pub points: Vec<HrPoint<T>>,
}

impl<T: Real> HrCurve<T> {
    pub fn grid(&self) -> impl Iterator<Item = T> + '_ {
        self.points.iter().map(|p| p.t)
    }

    /// Writes `t,log_theta,hr,se,ci_lower,ci_upper`; missing values are empty fields.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let f = |x: Option<T>| x.map(format_sig6).unwrap_or_default();
        writeln!(w, "t,log_theta,hr,se,ci_lower,ci_upper")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                format_sig6(p.t),
                f(p.log_theta),
                f(p.hr()),
                f(p.se),
                f(p.ci_lower),
                f(p.ci_upper)
            )?;
        }
        Ok(())
    }
}

/// Evenly spaced grid `start, start + step, …` up to `stop` (inclusive within rounding).
pub fn regular_grid<T: Real>(start: T, stop: T, step: T) -> Result<Vec<T>, InferenceError> {
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || step <= T::zero() || stop < start {
        return Err(InferenceError::BadGrid(format!("start {start}, stop {stop}, step {step}")));
    }
    let count = ((stop - start) / step + T::lit(1e-9)).floor().to_usize().unwrap_or(0);
    Ok((0..=count).map(|i| start + T::from_count(i) * step).collect())
}

/// Runs the estimating equation and the bootstrap at every grid point. Points where
/// either fails are reported as missing. All points share one resample sequence.
pub fn hr_curve<T: Real>(
    data: &TrialDataset<T>,
    grid: &[T],
    b: usize,
    seed: u64,
) -> Result<HrCurve<T>, InferenceError> {
    if b < 2 {
        return Err(InferenceError::TooFewBootstrapReplicates(b));
    }
    let horizon = data.censor_horizon();
    if grid.is_empty() {
        return Err(InferenceError::BadGrid("empty grid".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1] || w[0].is_nan() || w[1].is_nan()) {
        return Err(InferenceError::BadGrid("grid must be strictly increasing".into()));
    }
    if let Some(&t) = grid.iter().find(|&&t| !(t > T::zero() && t <= horizon)) {
        return Err(InferenceError::BadGrid(format!("time {t} outside (0, {horizon}]")));
    }
    let prep = PreparedTrial::new(data);
    let points: Vec<Option<T>> = grid
        .par_iter()
        .map(|&t| {
            EstimationContext::new(&prep, None, t).and_then(|c| c.estimate(Estimand::LogThetaEe)).ok().map(|r| r.value)
        })
        .collect();
    let targets: Vec<(Estimand, T)> =
        grid.iter().zip(&points).filter(|(_, p)| p.is_some()).map(|(&t, _)| (Estimand::LogThetaEe, t)).collect();
    let mut boots = bootstrap_targets(&prep, &targets, b, seed, Resampling::default()).into_iter();
    let points: Vec<HrPoint<T>> = grid
        .iter()
        .zip(points)
        .map(|(&t, p)| {
            let Some(est) = p else { return HrPoint::missing(t) };
            match boots.next().expect("one bootstrap per point") {
                Ok((reps, attempts)) => {
                    let r = BootstrapResult::new(est, reps, attempts);
                    HrPoint {
                        t,
                        log_theta: Some(est),
                        se: Some(r.se),
                        ci_lower: Some(r.ci_lower),
                        ci_upper: Some(r.ci_upper),
                    }
                }
                Err(_) => HrPoint::missing(t),
            }
        })
        .collect();
    if points.iter().all(|p| p.log_theta.is_none()) {
        return Err(InferenceError::AllPointsFailed);
    }
    Ok(HrCurve { points })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct MinVariancePoint<T> {
    pub t: T,
    pub log_theta: T,
    pub se: T,
}

/// Single-number summaries of a hazard-ratio curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct Selection<T> {
    pub min_variance: MinVariancePoint<T>,
    /// Inverse-variance weighted mean of `log θ̂` over the non-missing points.
    pub ivw: T,
}

pub fn select_timepoint<T: Real>(curve: &HrCurve<T>) -> Result<Selection<T>, InferenceError> {
    let pts: Vec<(T, T, T)> = curve
        .points
        .iter()
        .filter_map(|p| Some((p.t, p.log_theta?, p.se?)))
        .filter(|&(_, e, s)| e.is_finite() && s.is_finite())
        .collect();
    let mut best = *pts.first().ok_or(InferenceError::EmptyCurve)?;
    for &p in &pts[1..] {
        if p.2 < best.2 {
            best = p;
        }
    }
    // Zero-variance points would take all the weight; average those alone.
    let ivw = if best.2 == T::zero() {
        let exact: Vec<T> = pts.iter().filter(|p| p.2 == T::zero()).map(|p| p.1).collect();
        mean(&exact)
    } else {
        let (num, den) = pts.iter().fold((T::zero(), T::zero()), |(n, d), &(_, e, s)| {
            let w = T::one() / (s * s);
            (n + w * e, d + w)
        });
        num / den
    };
    Ok(Selection { min_variance: MinVariancePoint { t: best.0, log_theta: best.1, se: best.2 }, ivw })
}

/// One replicate's estimate and interval for one estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplicateEstimate<T> {
    pub value: T,
    pub se: T,
    pub ci_lower: T,
    pub ci_upper: T,
}

/// Monte Carlo summary for one estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow<T> {
    pub estimator: Estimand,
    pub truth: T,
    pub mean_estimate: T,
    pub mean_se: T,
    /// Share of intervals excluding zero.
    pub power: T,
    /// Share of intervals containing the truth.
    pub coverage: T,
    /// Share of intervals entirely above the truth.
    pub above: T,
    /// Share of intervals entirely below the truth.
    pub below: T,
    pub mcsd: T,
    pub mce: T,
    /// Replicates where the estimator succeeded.
    pub n_replicates: usize,
    pub n_failed: usize,
    /// Per-replicate outcomes in replicate order; `None` marks a failure.
    pub replicates: Vec<Option<ReplicateEstimate<T>>>,
}

impl<T: Real> StudyRow<T> {
    fn summarize(estimator: Estimand, truth: T, replicates: Vec<Option<ReplicateEstimate<T>>>) -> Self {
        let ok: Vec<ReplicateEstimate<T>> = replicates.iter().flatten().copied().collect();
        let n = ok.len();
        let nan = T::nan();
        let share = |pred: &dyn Fn(&ReplicateEstimate<T>) -> bool| {
            if n == 0 {
                nan
            } else {
                T::from_count(ok.iter().filter(|r| pred(r)).count()) / T::from_count(n)
            }
        };
        let values: Vec<T> = ok.iter().map(|r| r.value).collect();
        let ses: Vec<T> = ok.iter().map(|r| r.se).collect();
        let mcsd = if n >= 2 { sample_sd(&values) } else { nan };
        StudyRow {
            estimator,
            truth,
            mean_estimate: if n == 0 { nan } else { mean(&values) },
            mean_se: if n == 0 { nan } else { mean(&ses) },
            power: share(&|r| r.ci_lower > T::zero() || r.ci_upper < T::zero()),
            coverage: share(&|r| r.ci_lower <= truth && truth <= r.ci_upper),
            above: share(&|r| r.ci_lower > truth),
            below: share(&|r| r.ci_upper < truth),
            mcsd,
            mce: mcsd / T::from_count(n).sqrt(),
            n_replicates: n,
            n_failed: replicates.len() - n,
            replicates,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyResult<T> {
    pub eval_time: T,
    pub rows: Vec<StudyRow<T>>,
}

impl<T: Real> StudyResult<T> {
    pub fn row(&self, estimator: Estimand) -> Option<&StudyRow<T>> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "estimator,truth,mean_estimate,mean_se,power,coverage,mcsd,mce,n_replicates,n_failed")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.estimator,
                format_sig6(r.truth),
                format_sig6(r.mean_estimate),
                format_sig6(r.mean_se),
                format_sig6(r.power),
                format_sig6(r.coverage),
                format_sig6(r.mcsd),
                format_sig6(r.mce),
                r.n_replicates,
                r.n_failed
            )?;
        }
        Ok(())
    }
}

/// Knobs for [`run_sim_study_with`].
#[derive(Clone, Copy, Debug)]
pub struct StudyOptions {
    pub resampling: Resampling,
    /// Subjects simulated for the marginal log hazard ratio under confounding.
    pub n_oracle: usize,
    /// Risk-set convention of that marginal fit.
    pub truth_entry: RiskSetEntry,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions { resampling: Resampling::Unstratified, n_oracle: 1_000_000, truth_entry: RiskSetEntry::Detection }
    }
}

const BOOTSTRAP_TAG: u64 = 0x626f_6f74;

/// True value of each estimand at `t` under `cfg`.
pub fn study_truths<T: Real>(
    cfg: &ScenarioConfig<T>,
    estimands: &[Estimand],
    t: T,
    opts: StudyOptions,
) -> Result<Vec<T>, InferenceError> {
    let q = true_marginal_quantities(cfg, t)?;
    let log_theta = if cfg.confounder.is_some() && estimands.iter().any(|e| e.is_log_theta()) {
        marginal_true_loghr_with(cfg, opts.n_oracle, opts.truth_entry)?
    } else {
        cfg.model.log_theta()
    };
    Ok(estimands
        .iter()
        .map(|e| match e {
            Estimand::LogThetaEe | Estimand::LogThetaMle => log_theta,
            Estimand::Acfr => q.acfr,
            Estimand::Pcfr => q.pcfr,
            Estimand::ItsAbs => q.its_abs,
            Estimand::ItsProp => q.its_prop,
        })
        .collect())
}

/// Replicates a trial `r` times, estimating every estimator with a `b`-sample
/// bootstrap interval at `t`.
pub fn run_sim_study<T: Real>(
    cfg: &ScenarioConfig<T>,
    estimands: &[Estimand],
    r: usize,
    b: usize,
    t: T,
) -> Result<StudyResult<T>, InferenceError> {
    run_sim_study_with(cfg, estimands, r, b, t, StudyOptions::default(), &|_| {})
}

/// [`run_sim_study`] with options; `progress` receives the number of finished replicates.
pub fn run_sim_study_with<T: Real>(
    cfg: &ScenarioConfig<T>,
    estimands: &[Estimand],
    r: usize,
    b: usize,
    t: T,
    opts: StudyOptions,
    progress: &(dyn Fn(usize) + Sync),
) -> Result<StudyResult<T>, InferenceError> {
    if r < 2 {
        return Err(InferenceError::TooFewStudyReplicates(r));
    }
    if b < 2 {
        return Err(InferenceError::TooFewBootstrapReplicates(b));
    }
    if !(t > T::zero() && t <= cfg.censor_horizon) {
        return Err(EstimationError::BadEvalTime { t: t.as_f64(), horizon: cfg.censor_horizon.as_f64() }.into());
    }
    let truths = study_truths(cfg, estimands, t, opts)?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let per_rep: Vec<Vec<Option<ReplicateEstimate<T>>>> = (0..r)
        .into_par_iter()
        .map(|i| -> Result<_, InferenceError> {
            let data = simulate_trial(&cfg.with_seed(rng::derive(cfg.seed, &[i as u64])))?;
            let prep = PreparedTrial::new(&data);
            let seed = rng::derive(cfg.seed, &[i as u64, BOOTSTRAP_TAG]);
            let out = bootstrap_many(&prep, estimands, t, b, seed, opts.resampling)
                .into_iter()
                .map(|res| {
                    res.ok().map(|b| ReplicateEstimate {
                        value: b.estimate,
                        se: b.se,
                        ci_lower: b.ci_lower,
                        ci_upper: b.ci_upper,
                    })
                })
                .collect();
            progress(done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1);
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    let rows = estimands
        .iter()
        .zip(truths)
        .enumerate()
        .map(|(j, (&e, truth))| StudyRow::summarize(e, truth, per_rep.iter().map(|rep| rep[j]).collect()))
        .collect();
    Ok(StudyResult { eval_time: t, rows })
}
