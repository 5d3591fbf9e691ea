//! Subgroup early-treatment effect estimators and the comparator risk reductions.
//!
//! Two estimators target `log θ`, the log ratio of the post-detection cancer-death
//! hazard under delayed vs early treatment:
//!
//! * the estimating equation matches the observed control-arm cancer incidence at `t`
//!   with the incidence implied by the screening-arm hazards and `θ`;
//! * the likelihood approach maximizes the multinomial likelihood of control-arm
//!   status at `t` (cancer death, other death, neither).
//!
//! The four comparators are arm-level contrasts of nonparametric cumulative incidences.

use std::cell::OnceCell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Arm, EventType, TrialDataset};
use crate::estimators::{ControlModel, EstimationError, PreparedTrial};
use crate::num::Real;
use crate::solve::{brent, golden_section_max, RootError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    LogThetaEe,
    LogThetaMle,
    Acfr,
    Pcfr,
    ItsAbs,
    ItsProp,
}

impl Estimand {
    pub const ALL: [Estimand; 6] = [
        Estimand::LogThetaEe,
        Estimand::LogThetaMle,
        Estimand::Acfr,
        Estimand::Pcfr,
        Estimand::ItsAbs,
        Estimand::ItsProp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimand::LogThetaEe => "log_theta_ee",
            Estimand::LogThetaMle => "log_theta_mle",
            Estimand::Acfr => "acfr",
            Estimand::Pcfr => "pcfr",
            Estimand::ItsAbs => "its_abs",
            Estimand::ItsProp => "its_prop",
        }
    }

    pub fn is_log_theta(self) -> bool {
        matches!(self, Estimand::LogThetaEe | Estimand::LogThetaMle)
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct Diagnostics<T> {
    /// Bracket (root finding) or search interval (likelihood) on the log scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search_interval: Option<(T, T)>,
    pub iterations: usize,
    pub clamp_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct EstimateResult<T> {
    pub estimand: Estimand,
    pub value: T,
    pub eval_time: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_lower: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_upper: Option<T>,
    pub diagnostics: Diagnostics<T>,
}

impl<T: Real> EstimateResult<T> {
    fn point(estimand: Estimand, value: T, eval_time: T, diagnostics: Diagnostics<T>) -> Self {
        EstimateResult { estimand, value, eval_time, se: None, ci_lower: None, ci_upper: None, diagnostics }
    }
}

/// Default root-finding bracket half-widths on the log scale, widened in turn.
const BRACKETS: [f64; 3] = [5.0, 10.0, 12.0];
const LIKELIHOOD_BOUND: f64 = 12.0;
const ROOT_XTOL: f64 = 1e-8;
const ROOT_FTOL: f64 = 1e-12;
const GOLDEN_XTOL: f64 = 1e-6;
const LIKELIHOOD_SCAN_STEP: f64 = 0.25;
const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Shared, lazily computed pieces for estimating several estimands on one (possibly
/// weighted) dataset at one time point.
pub struct EstimationContext<'p, 'a, T: Real> {
    prep: &'p PreparedTrial<'a, T>,
    weights: Option<&'p [u32]>,
    t: T,
    model: OnceCell<Result<ControlModel<T>, EstimationError>>,
    incidences: OnceCell<ArmIncidences<T>>,
}

#[derive(Clone, Copy, Debug)]
struct ArmIncidences<T> {
    control_cancer: T,
    control_other: T,
    screening_cancer: T,
    screening_detect: T,
    screening_direct_cancer: T,
}

impl<'p, 'a, T: Real> EstimationContext<'p, 'a, T> {
    pub fn new(prep: &'p PreparedTrial<'a, T>, weights: Option<&'p [u32]>, t: T) -> Result<Self, EstimationError> {
        let horizon = prep.dataset().censor_horizon();
        if !(t > T::zero() && t <= horizon) {
            return Err(EstimationError::BadEvalTime { t: t.as_f64(), horizon: horizon.as_f64() });
        }
        Ok(EstimationContext { prep, weights, t, model: OnceCell::new(), incidences: OnceCell::new() })
    }

    fn model(&self) -> Result<&ControlModel<T>, EstimationError> {
        self.model
            .get_or_init(|| self.prep.screening_hazards(self.weights).map(|h| h.control_model()))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn incidences(&self) -> ArmIncidences<T> {
        *self.incidences.get_or_init(|| {
            let p = self.prep;
            let (w, t) = (self.weights, self.t);
            ArmIncidences {
                control_cancer: p.cumulative_incidence(Arm::Control, EventType::CancerDeath, t, w),
                control_other: p.cumulative_incidence(Arm::Control, EventType::OtherDeath, t, w),
                screening_cancer: p.cumulative_incidence(Arm::Screening, EventType::CancerDeath, t, w),
                screening_detect: p.state1_incidence(Arm::Screening, 2, t, w),
                screening_direct_cancer: p.state1_incidence(Arm::Screening, 3, t, w),
            }
        })
    }

    fn require_events(&self) -> Result<(), EstimationError> {
        let (ctrl3, det, post) = self.prep.event_counts(self.t, self.weights);
        if ctrl3 <= T::zero() {
            return Err(EstimationError::InsufficientEvents("no control-arm cancer deaths by t"));
        }
        if det <= T::zero() {
            return Err(EstimationError::InsufficientEvents("no screening-arm detections by t"));
        }
        if post <= T::zero() {
            return Err(EstimationError::InsufficientEvents("no post-detection cancer deaths by t"));
        }
        Ok(())
    }

    pub fn estimate(&self, estimand: Estimand) -> Result<EstimateResult<T>, EstimationError> {
        match estimand {
            Estimand::LogThetaEe => self.estimating_equation(),
            Estimand::LogThetaMle => self.likelihood(),
            Estimand::Acfr => self.acfr(),
            Estimand::Pcfr => self.pcfr(),
            Estimand::ItsAbs => self.its_abs(),
            Estimand::ItsProp => self.its_prop(),
        }
    }

    fn estimating_equation(&self) -> Result<EstimateResult<T>, EstimationError> {
        self.require_events()?;
        let target = self.incidences().control_cancer;
        let model = self.model()?;
        let t = self.t;
        let residual = |lt: T| model.control_cif(lt, t, EventType::CancerDeath).map(|p| p - target);
        let mut last = (T::zero(), T::zero(), T::zero());
        for half in BRACKETS.map(T::lit) {
            let (lo, hi) = (-half, half);
            let (f_lo, f_hi) = (residual(lo)?, residual(hi)?);
            last = (half, f_lo, f_hi);
            if f_lo > T::zero() || f_hi < T::zero() {
                continue;
            }
            let root = brent(residual, lo, hi, T::lit(ROOT_XTOL), T::lit(ROOT_FTOL), 500).map_err(|e| match e {
                RootError::Fun(e) => e,
                RootError::NoSignChange { .. } => unreachable!("bracket checked"),
            })?;
            let clamps = model.occupation(root.x, T::zero(), t)?.clamps;
            return Ok(EstimateResult::point(
                Estimand::LogThetaEe,
                root.x,
                t,
                Diagnostics { search_interval: Some((lo, hi)), iterations: root.iterations, clamp_count: clamps },
            ));
        }
        let (half, f_lo, f_hi) = last;
        Err(EstimationError::NoRootInBracket {
            lower: (-half).as_f64(),
            upper: half.as_f64(),
            target: target.as_f64(),
            min_attainable: (f_lo + target).as_f64(),
            max_attainable: (f_hi + target).as_f64(),
        })
    }

    fn likelihood(&self) -> Result<EstimateResult<T>, EstimationError> {
        let t = self.t;
        let (n3, n4, n0) = self.prep.control_status_counts(t, self.weights);
        if n3 <= T::zero() {
            return Err(EstimationError::DegenerateLikelihood);
        }
        self.require_events()?;
        let model = self.model()?;
        let term = |n: T, p: T| if n > T::zero() { n * p.ln() } else { T::zero() };
        let loglik = |lt: T| -> Result<T, EstimationError> {
            let occ = model.occupation(lt, T::zero(), t)?;
            let (p3, p4) = (occ.state(3), occ.state(4));
            let ll = term(n3, p3) + term(n4, p4) + term(n0, T::one() - p3 - p4);
            Ok(if ll.is_nan() { T::neg_infinity() } else { ll })
        };
        let bound = T::lit(LIKELIHOOD_BOUND);
        // Clamped transitions at large θ can leave a spurious local maximum in the
        // tail, so locate the global basin on a coarse grid before refining.
        let step = T::lit(LIKELIHOOD_SCAN_STEP);
        let cells = (T::lit(2.0) * bound / step).round().to_usize().unwrap_or(0);
        let mut scan = (-bound, T::neg_infinity());
        for i in 0..=cells {
            let x = -bound + T::from_count(i) * step;
            let v = loglik(x)?;
            if v > scan.1 {
                scan = (x, v);
            }
        }
        let (lo, hi) = ((scan.0 - step).max(-bound), (scan.0 + step).min(bound));
        let best = golden_section_max(loglik, lo, hi, T::lit(GOLDEN_XTOL))?;
        if bound - best.x.abs() < T::lit(10.0 * GOLDEN_XTOL) || !best.fx.is_finite() {
            return Err(EstimationError::BoundaryMaximum(best.x.as_f64()));
        }
        let clamps = model.occupation(best.x, T::zero(), t)?.clamps;
        Ok(EstimateResult::point(
            Estimand::LogThetaMle,
            best.x,
            t,
            Diagnostics {
                search_interval: Some((-bound, bound)),
                iterations: cells + 1 + best.iterations,
                clamp_count: clamps,
            },
        ))
    }

    fn acfr(&self) -> Result<EstimateResult<T>, EstimationError> {
        let inc = self.incidences();
        if inc.screening_detect <= T::zero() {
            return Err(EstimationError::ZeroDetectionIncidence);
        }
        let value = (inc.control_cancer - inc.screening_cancer) / inc.screening_detect;
        Ok(EstimateResult::point(Estimand::Acfr, value, self.t, Diagnostics::default()))
    }

    fn pcfr(&self) -> Result<EstimateResult<T>, EstimationError> {
        let inc = self.incidences();
        let den = inc.control_cancer - inc.screening_direct_cancer;
        if den.abs() < T::lit(DENOMINATOR_FLOOR) {
            return Err(EstimationError::UnstableDenominator(den.as_f64()));
        }
        let value = (inc.control_cancer - inc.screening_cancer) / den;
        Ok(EstimateResult::point(Estimand::Pcfr, value, self.t, Diagnostics::default()))
    }

    fn its_abs(&self) -> Result<EstimateResult<T>, EstimationError> {
        let inc = self.incidences();
        let value = inc.control_cancer - inc.screening_cancer;
        Ok(EstimateResult::point(Estimand::ItsAbs, value, self.t, Diagnostics::default()))
    }

    fn its_prop(&self) -> Result<EstimateResult<T>, EstimationError> {
        let inc = self.incidences();
        if inc.control_cancer <= T::zero() {
            return Err(EstimationError::ZeroControlIncidence);
        }
        let value = T::one() - inc.screening_cancer / inc.control_cancer;
        Ok(EstimateResult::point(Estimand::ItsProp, value, self.t, Diagnostics::default()))
    }

    /// Solves the cancer and other-cause equations jointly for `(log θ₃, log θ₄)`,
    /// dropping the assumption that early treatment leaves other-cause mortality unchanged.
    pub fn two_equations(&self) -> Result<TwoParameterEstimate<T>, EstimationError> {
        self.require_events()?;
        let inc = self.incidences();
        if inc.control_other <= T::zero() {
            return Err(EstimationError::InsufficientEvents("no control-arm other-cause deaths by t"));
        }
        let model = self.model()?;
        let t = self.t;
        let residual = |x: [T; 2]| -> Result<[T; 2], EstimationError> {
            let occ = model.occupation(x[0], x[1], t)?;
            Ok([occ.state(3) - inc.control_cancer, occ.state(4) - inc.control_other])
        };
        let norm = |r: [T; 2]| (r[0] * r[0] + r[1] * r[1]).sqrt();
        let bound = T::lit(LIKELIHOOD_BOUND);
        let h = T::lit(1e-6);
        let mut x = [T::zero(), T::zero()];
        let mut r = residual(x)?;
        for it in 1..=MAX_NEWTON {
            if norm(r) < T::lit(1e-12) {
                return Ok(TwoParameterEstimate::new(x, t, it));
            }
            let mut jac = [[T::zero(); 2]; 2];
            for j in 0..2 {
                let mut xp = x;
                xp[j] += h;
                let rp = residual(xp)?;
                for i in 0..2 {
                    jac[i][j] = (rp[i] - r[i]) / h;
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            if det.abs() < T::lit(1e-300_f64.max(f64::MIN_POSITIVE)) || !det.is_finite() {
                return Err(EstimationError::NotConverged(it));
            }
            let step = [-(jac[1][1] * r[0] - jac[0][1] * r[1]) / det, -(-jac[1][0] * r[0] + jac[0][0] * r[1]) / det];
            let mut lambda = T::one();
            let mut accepted = false;
            for _ in 0..40 {
                let cand = [
                    (x[0] + lambda * step[0]).max(-bound).min(bound),
                    (x[1] + lambda * step[1]).max(-bound).min(bound),
                ];
                let rc = residual(cand)?;
                if norm(rc) < norm(r) {
                    let moved = (cand[0] - x[0]).abs().max((cand[1] - x[1]).abs());
                    x = cand;
                    r = rc;
                    accepted = true;
                    if moved < T::lit(1e-12) {
                        return Ok(TwoParameterEstimate::new(x, t, it));
                    }
                    break;
                }
                lambda *= T::lit(0.5);
            }
            if !accepted {
                if norm(r) < T::lit(1e-9) {
                    return Ok(TwoParameterEstimate::new(x, t, it));
                }
                return Err(EstimationError::NotConverged(it));
            }
        }
        Err(EstimationError::NotConverged(MAX_NEWTON))
    }
}

const MAX_NEWTON: usize = 100;

/// Joint estimate of the cancer (`log θ₃`) and other-cause (`log θ₄`) effects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct TwoParameterEstimate<T> {
    pub log_theta_cancer: T,
    pub log_theta_other: T,
    pub eval_time: T,
    pub iterations: usize,
}

impl<T: Real> TwoParameterEstimate<T> {
    fn new(x: [T; 2], eval_time: T, iterations: usize) -> Self {
        TwoParameterEstimate { log_theta_cancer: x[0], log_theta_other: x[1], eval_time, iterations }
    }
}

fn single<T: Real>(data: &TrialDataset<T>, t: T, estimand: Estimand) -> Result<EstimateResult<T>, EstimationError> {
    let prep = PreparedTrial::new(data);
    EstimationContext::new(&prep, None, t)?.estimate(estimand)
}

/// `log θ̂` solving the control-arm cancer incidence equation at `t`.
pub fn solve_estimating_equation<T: Real>(data: &TrialDataset<T>, t: T) -> Result<EstimateResult<T>, EstimationError> {
    single(data, t, Estimand::LogThetaEe)
}

/// `log θ̂` maximizing the control-arm multinomial likelihood at `t`.
pub fn maximize_likelihood<T: Real>(data: &TrialDataset<T>, t: T) -> Result<EstimateResult<T>, EstimationError> {
    single(data, t, Estimand::LogThetaMle)
}

pub fn acfr_estimate<T: Real>(data: &TrialDataset<T>, t: T) -> Result<EstimateResult<T>, EstimationError> {
    single(data, t, Estimand::Acfr)
}

pub fn pcfr_estimate<T: Real>(data: &TrialDataset<T>, t: T) -> Result<EstimateResult<T>, EstimationError> {
    single(data, t, Estimand::Pcfr)
}

/// Absolute and proportional intention-to-screen reductions.
pub fn its_estimates<T: Real>(
    data: &TrialDataset<T>,
    t: T,
) -> Result<(EstimateResult<T>, EstimateResult<T>), EstimationError> {
    let prep = PreparedTrial::new(data);
    let ctx = EstimationContext::new(&prep, None, t)?;
    Ok((ctx.estimate(Estimand::ItsAbs)?, ctx.estimate(Estimand::ItsProp)?))
}

pub fn solve_two_equations<T: Real>(data: &TrialDataset<T>, t: T) -> Result<TwoParameterEstimate<T>, EstimationError> {
    let prep = PreparedTrial::new(data);
    EstimationContext::new(&prep, None, t)?.two_equations()
}
