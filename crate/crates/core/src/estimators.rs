//! Nelson-Aalen hazards, competing-risks cumulative incidence, and the
//! product-integral evaluation of control-arm incidences under the structural model.
//!
//! Everything here works on a [`PreparedTrial`]: a dataset sorted once per arm and
//! time key. An optional vector of frequency weights (one per record) turns the
//! same view into a bootstrap resample without re-sorting.

use std::io::Write;

use crate::data::{Arm, EventType, SubjectRecord, TrialDataset};
use crate::model::{HazardFn, TransitionId};
use crate::num::{format_sig6, Real};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimationError {
    #[error("empty risk set for {transition} at time {time}")]
    EmptyRiskSet { transition: TransitionId, time: f64 },
    #[error("transition {0} is not observable in the control arm")]
    WrongArmForTransition(TransitionId),
    #[error("state {state} occupation {value} outside [0, 1]")]
    OccupationOutOfRange { state: u8, value: f64 },
    #[error("insufficient events: {0}")]
    InsufficientEvents(&'static str),
    #[error("no root in [{lower}, {upper}]: control incidence {target} outside attainable range [{min_attainable}, {max_attainable}]")]
    NoRootInBracket { lower: f64, upper: f64, target: f64, min_attainable: f64, max_attainable: f64 },
    #[error("no control-arm cancer deaths by t; likelihood is monotone in log theta")]
    DegenerateLikelihood,
    #[error("likelihood maximum on the search boundary at log theta = {0}")]
    BoundaryMaximum(f64),
    #[error("detection incidence in the screening arm is zero")]
    ZeroDetectionIncidence,
    #[error("denominator {0} too close to zero")]
    UnstableDenominator(f64),
    #[error("control-arm cancer incidence is zero")]
    ZeroControlIncidence,
    #[error("two-equation solver did not converge after {0} iterations")]
    NotConverged(usize),
    #[error("evaluation time {t} outside (0, {horizon}]")]
    BadEvalTime { t: f64, horizon: f64 },
}

/// Step-function cumulative hazard: strictly increasing jump times with nonnegative increments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HazardEstimate<T> {
    jump_times: Vec<T>,
    increments: Vec<T>,
}

impl<T: Real> HazardEstimate<T> {
    /// Returns `None` unless times strictly increase and increments are finite and nonnegative.
    pub fn new(jump_times: Vec<T>, increments: Vec<T>) -> Option<Self> {
        let ok = jump_times.len() == increments.len()
            && jump_times.windows(2).all(|w| w[0] < w[1])
            && jump_times.iter().all(|t| t.is_finite())
            && increments.iter().all(|d| d.is_finite() && *d >= T::zero());
        ok.then_some(HazardEstimate { jump_times, increments })
    }

    pub fn empty() -> Self {
        HazardEstimate { jump_times: Vec::new(), increments: Vec::new() }
    }

    /// Tabulates a hazard function on `steps` equal steps over `(0, end]`, each jump
    /// carrying the exact integral over its step.
    pub fn discretize(h: &HazardFn<T>, end: T, steps: usize) -> Self {
        let dt = end / T::from_count(steps);
        let mut prev = T::zero();
        let mut jump_times = Vec::with_capacity(steps);
        let mut increments = Vec::with_capacity(steps);
        for k in 1..=steps {
            let t = if k == steps { end } else { dt * T::from_count(k) };
            let cum = h.cumulative(t);
            jump_times.push(t);
            increments.push((cum - prev).max(T::zero()));
            prev = cum;
        }
        HazardEstimate { jump_times, increments }
    }

    pub fn jump_times(&self) -> &[T] {
        &self.jump_times
    }

    pub fn increments(&self) -> &[T] {
        &self.increments
    }

    pub fn is_empty(&self) -> bool {
        self.jump_times.is_empty()
    }

    /// Sum of increments with jump time `<= t`.
    pub fn cumulative(&self, t: T) -> T {
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.increments[..k].iter().copied().sum()
    }

    pub fn scaled(&self, factor: T) -> Self {
        HazardEstimate {
            jump_times: self.jump_times.clone(),
            increments: self.increments.iter().map(|&d| d * factor).collect(),
        }
    }

    /// `time,increment,cumulative` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,increment,cumulative")?;
        let mut cum = T::zero();
        for (&t, &d) in self.jump_times.iter().zip(&self.increments) {
            cum += d;
            writeln!(w, "{},{},{}", format_sig6(t), format_sig6(d), format_sig6(cum))?;
        }
        Ok(())
    }
}

/// Event and at-risk counts of one transition at its distinct event times.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskSetTable<T> {
    pub transition: TransitionId,
    pub event_times: Vec<T>,
    pub n_events: Vec<T>,
    pub n_at_risk: Vec<T>,
}

impl<T: Real> RiskSetTable<T> {
    pub fn nelson_aalen(&self) -> Result<HazardEstimate<T>, EstimationError> {
        let mut inc = Vec::with_capacity(self.event_times.len());
        for ((&t, &d), &n) in self.event_times.iter().zip(&self.n_events).zip(&self.n_at_risk) {
            if n <= T::zero() {
                return Err(EstimationError::EmptyRiskSet { transition: self.transition, time: t.as_f64() });
            }
            inc.push(d / n);
        }
        Ok(HazardEstimate { jump_times: self.event_times.clone(), increments: inc })
    }
}

/// Exit causes tracked by [`ExitTable`]: transitions into states 2, 3 and 4.
const CAUSES: usize = 3;

fn cause_slot(state: u8) -> usize {
    (state - 2) as usize
}

/// Distinct exit times with at-risk weight and event weight per destination state.
#[derive(Clone, Debug, Default)]
struct ExitTable<T> {
    times: Vec<T>,
    at_risk: Vec<T>,
    events: Vec<[T; CAUSES]>,
}

impl<T: Real> ExitTable<T> {
    /// Competing-risks cumulative incidence of `state` at `t` (Aalen-Johansen).
    fn cif(&self, state: u8, t: T) -> T {
        let slot = cause_slot(state);
        let mut surv = T::one();
        let mut cif = T::zero();
        for ((&s, &n), d) in self.times.iter().zip(&self.at_risk).zip(&self.events) {
            if s > t {
                break;
            }
            if n <= T::zero() {
                continue;
            }
            let all: T = d.iter().copied().sum();
            cif += surv * d[slot] / n;
            surv *= T::one() - all / n;
        }
        cif
    }

    fn risk_set(&self, transition: TransitionId) -> RiskSetTable<T> {
        let slot = cause_slot(transition.to_state());
        let mut table =
            RiskSetTable { transition, event_times: Vec::new(), n_events: Vec::new(), n_at_risk: Vec::new() };
        for ((&s, &n), d) in self.times.iter().zip(&self.at_risk).zip(&self.events) {
            if d[slot] > T::zero() {
                table.event_times.push(s);
                table.n_events.push(d[slot]);
                table.n_at_risk.push(n);
            }
        }
        table
    }
}

fn sort_by_key<T: Real>(idx: &mut [usize], key: impl Fn(usize) -> T) {
    idx.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).expect("validated times are finite").then(a.cmp(&b)));
}

/// A dataset sorted for repeated (possibly weighted) estimation.
#[derive(Clone, Debug)]
pub struct PreparedTrial<'a, T> {
    data: &'a TrialDataset<T>,
    /// Control arm by event time.
    control: Vec<usize>,
    /// Screening arm by event time.
    screening: Vec<usize>,
    /// Screening arm by time of leaving state 1.
    screening_state1: Vec<usize>,
    /// Detected subjects by detection time.
    detected_by_entry: Vec<usize>,
    /// Detected subjects by event time.
    detected_by_exit: Vec<usize>,
}

impl<'a, T: Real> PreparedTrial<'a, T> {
    pub fn new(data: &'a TrialDataset<T>) -> Self {
        let recs = data.records();
        let in_arm = |arm| (0..recs.len()).filter(move |&i| recs[i].arm == arm);
        let mut control: Vec<usize> = in_arm(Arm::Control).collect();
        sort_by_key(&mut control, |i| recs[i].event_time);
        let mut screening: Vec<usize> = in_arm(Arm::Screening).collect();
        let mut screening_state1 = screening.clone();
        sort_by_key(&mut screening, |i| recs[i].event_time);
        sort_by_key(&mut screening_state1, |i| recs[i].detect_time.unwrap_or(recs[i].event_time));
        let mut detected_by_entry: Vec<usize> =
            in_arm(Arm::Screening).filter(|&i| recs[i].detect_time.is_some()).collect();
        let mut detected_by_exit = detected_by_entry.clone();
        sort_by_key(&mut detected_by_entry, |i| recs[i].detect_time.expect("detected"));
        sort_by_key(&mut detected_by_exit, |i| recs[i].event_time);
        PreparedTrial { data, control, screening, screening_state1, detected_by_entry, detected_by_exit }
    }

    pub fn dataset(&self) -> &TrialDataset<T> {
        self.data
    }

    fn rec(&self, i: usize) -> &SubjectRecord<T> {
        &self.data.records()[i]
    }

    /// Exits from a single origin state for subjects at risk from time 0, in `order`.
    /// `exit` maps a record to its exit time and destination (None = censored).
    fn exits_from_origin(
        &self,
        order: &[usize],
        weights: Option<&[u32]>,
        exit: impl Fn(&SubjectRecord<T>) -> (T, Option<u8>),
    ) -> ExitTable<T> {
        let w = |i: usize| weights.map_or(T::one(), |w| T::from_count(w[i] as usize));
        let mut remaining: T = order.iter().map(|&i| w(i)).sum();
        let mut table = ExitTable::default();
        let mut k = 0;
        while k < order.len() {
            let (s, _) = exit(self.rec(order[k]));
            let at_risk = remaining;
            let mut events = [T::zero(); CAUSES];
            let mut any = false;
            while k < order.len() {
                let i = order[k];
                let (si, dest) = exit(self.rec(i));
                if si != s {
                    break;
                }
                let wi = w(i);
                remaining -= wi;
                if let Some(state) = dest {
                    if wi > T::zero() {
                        events[cause_slot(state)] += wi;
                        any = true;
                    }
                }
                k += 1;
            }
            if any {
                table.times.push(s);
                table.at_risk.push(at_risk);
                table.events.push(events);
            }
        }
        table
    }

    /// Deaths in `arm`, ignoring detection (cause 3 counts both 1→3 and 2→3).
    fn deaths(&self, arm: Arm, weights: Option<&[u32]>) -> ExitTable<T> {
        let order = match arm {
            Arm::Control => &self.control,
            Arm::Screening => &self.screening,
        };
        self.exits_from_origin(order, weights, death_exit)
    }

    /// Exits from state 1. In the control arm nobody is detected, so state 1 is left only by death.
    fn state1_exits(&self, arm: Arm, weights: Option<&[u32]>) -> ExitTable<T> {
        match arm {
            Arm::Control => self.exits_from_origin(&self.control, weights, death_exit),
            Arm::Screening => self.exits_from_origin(&self.screening_state1, weights, |r| match r.detect_time {
                Some(d) => (d, Some(2)),
                None => death_exit(r),
            }),
        }
    }

    /// Exits from state 2 with delayed entry at detection. A subject is at risk on `[detect, exit]`.
    fn state2_exits(&self, weights: Option<&[u32]>) -> ExitTable<T> {
        let w = |i: usize| weights.map_or(T::one(), |w| T::from_count(w[i] as usize));
        let entries = &self.detected_by_entry;
        let exits = &self.detected_by_exit;
        let mut entered = T::zero();
        let mut exited = T::zero();
        let mut e = 0;
        let mut k = 0;
        let mut table = ExitTable::default();
        while k < exits.len() {
            let s = self.rec(exits[k]).event_time;
            while e < entries.len() && self.rec(entries[e]).detect_time.expect("detected") <= s {
                entered += w(entries[e]);
                e += 1;
            }
            let at_risk = entered - exited;
            let mut events = [T::zero(); CAUSES];
            let mut any = false;
            while k < exits.len() && self.rec(exits[k]).event_time == s {
                let i = exits[k];
                let wi = w(i);
                exited += wi;
                if let (_, Some(state)) = death_exit(self.rec(i)) {
                    if wi > T::zero() {
                        events[cause_slot(state)] += wi;
                        any = true;
                    }
                }
                k += 1;
            }
            if any {
                table.times.push(s);
                table.at_risk.push(at_risk);
                table.events.push(events);
            }
        }
        table
    }

    pub fn risk_set_table(
        &self,
        transition: TransitionId,
        arm: Arm,
        weights: Option<&[u32]>,
    ) -> Result<RiskSetTable<T>, EstimationError> {
        match (transition.from_state(), arm) {
            (1, _) => Ok(self.state1_exits(arm, weights).risk_set(transition)),
            (2, Arm::Screening) => Ok(self.state2_exits(weights).risk_set(transition)),
            _ => Err(EstimationError::WrongArmForTransition(transition)),
        }
    }

    pub fn nelson_aalen(
        &self,
        transition: TransitionId,
        arm: Arm,
        weights: Option<&[u32]>,
    ) -> Result<HazardEstimate<T>, EstimationError> {
        self.risk_set_table(transition, arm, weights)?.nelson_aalen()
    }

    /// Cumulative incidence of death from `cause` by `t` in `arm`.
    pub fn cumulative_incidence(&self, arm: Arm, cause: EventType, t: T, weights: Option<&[u32]>) -> T {
        match cause {
            EventType::Censored => T::zero(),
            _ => self.deaths(arm, weights).cif(cause.code(), t),
        }
    }

    /// Cumulative incidence of the first transition out of state 1 into `to_state` (2, 3 or 4).
    pub fn state1_incidence(&self, arm: Arm, to_state: u8, t: T, weights: Option<&[u32]>) -> T {
        self.state1_exits(arm, weights).cif(to_state, t)
    }

    /// The five Nelson-Aalen estimates from the screening arm.
    pub fn screening_hazards(&self, weights: Option<&[u32]>) -> Result<ScreeningHazards<T>, EstimationError> {
        let s1 = self.state1_exits(Arm::Screening, weights);
        let s2 = self.state2_exits(weights);
        let mut out: [HazardEstimate<T>; 5] = Default::default();
        for tr in TransitionId::ALL {
            let table = if tr.from_state() == 1 { &s1 } else { &s2 };
            out[tr.index()] = table.risk_set(tr).nelson_aalen()?;
        }
        Ok(ScreeningHazards { hazards: out })
    }

    /// Weighted count of control subjects by status at `t`: (cancer deaths, other deaths, neither).
    pub fn control_status_counts(&self, t: T, weights: Option<&[u32]>) -> (T, T, T) {
        let w = |i: usize| weights.map_or(T::one(), |w| T::from_count(w[i] as usize));
        let (mut n3, mut n4, mut n0) = (T::zero(), T::zero(), T::zero());
        for &i in &self.control {
            let r = self.rec(i);
            let wi = w(i);
            match (r.event_time <= t, r.event_type) {
                (true, EventType::CancerDeath) => n3 += wi,
                (true, EventType::OtherDeath) => n4 += wi,
                _ => n0 += wi,
            }
        }
        (n3, n4, n0)
    }

    /// Weighted counts used by estimator preconditions: (control cancer deaths by t,
    /// screening detections by t, post-detection cancer deaths by t).
    pub fn event_counts(&self, t: T, weights: Option<&[u32]>) -> (T, T, T) {
        let w = |i: usize| weights.map_or(T::one(), |w| T::from_count(w[i] as usize));
        let (ctrl3, _, _) = self.control_status_counts(t, weights);
        let mut det = T::zero();
        let mut post = T::zero();
        for &i in &self.detected_by_entry {
            let r = self.rec(i);
            if r.detect_time.expect("detected") <= t {
                det += w(i);
                if r.event_time <= t && r.event_type == EventType::CancerDeath {
                    post += w(i);
                }
            }
        }
        (ctrl3, det, post)
    }
}

fn death_exit<T: Real>(r: &SubjectRecord<T>) -> (T, Option<u8>) {
    match r.event_type {
        EventType::Censored => (r.event_time, None),
        ty => (r.event_time, Some(ty.code())),
    }
}

/// Nelson-Aalen estimate of `transition` in `arm`. 2→l transitions are only observable
/// in the screening arm, where subjects enter the risk set at detection.
pub fn nelson_aalen<T: Real>(
    data: &TrialDataset<T>,
    transition: TransitionId,
    arm: Arm,
) -> Result<HazardEstimate<T>, EstimationError> {
    PreparedTrial::new(data).nelson_aalen(transition, arm, None)
}

/// Aalen-Johansen cumulative incidence of `cause` by `t` in `arm`.
pub fn cumulative_incidence<T: Real>(data: &TrialDataset<T>, arm: Arm, cause: EventType, t: T) -> T {
    PreparedTrial::new(data).cumulative_incidence(arm, cause, t, None)
}

/// Cumulative hazard increments for the five transitions of the screening arm.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScreeningHazards<T> {
    pub hazards: [HazardEstimate<T>; 5],
}

impl<T: Real> ScreeningHazards<T> {
    pub fn new(hazards: [HazardEstimate<T>; 5]) -> Self {
        ScreeningHazards { hazards }
    }

    pub fn get(&self, tr: TransitionId) -> &HazardEstimate<T> {
        &self.hazards[tr.index()]
    }

    /// Merges the five jump grids for repeated evaluation at different `θ`.
    pub fn control_model(&self) -> ControlModel<T> {
        ControlModel::new(self)
    }
}

/// State occupation probabilities `(p₁, p₂, p₃, p₄)` at a time point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateOccupation<T> {
    pub p: [T; 4],
    /// Steps where the state-1 or state-2 outflow had to be capped at the occupied mass.
    pub clamps: usize,
}

impl<T: Real> StateOccupation<T> {
    /// Occupation probability of `state` (1-based).
    pub fn state(&self, state: u8) -> T {
        self.p[(state - 1) as usize]
    }
}

/// Merged jump grid of the screening-arm hazards, evaluated as a discrete product integral.
#[derive(Clone, Debug)]
pub struct ControlModel<T> {
    times: Vec<T>,
    /// Increments ordered as [`TransitionId::ALL`].
    increments: Vec<[T; 5]>,
}

const OCCUPATION_EPS: f64 = 1e-12;

impl<T: Real> ControlModel<T> {
    pub fn new(h: &ScreeningHazards<T>) -> Self {
        let mut all: Vec<(T, usize, T)> = Vec::new();
        for tr in TransitionId::ALL {
            let est = h.get(tr);
            all.extend(est.jump_times.iter().zip(&est.increments).map(|(&t, &d)| (t, tr.index(), d)));
        }
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
        let mut times: Vec<T> = Vec::new();
        let mut increments: Vec<[T; 5]> = Vec::new();
        for (t, slot, d) in all {
            if times.last() != Some(&t) {
                times.push(t);
                increments.push([T::zero(); 5]);
            }
            increments.last_mut().expect("pushed")[slot] += d;
        }
        ControlModel { times, increments }
    }

    pub fn grid_len(&self) -> usize {
        self.times.len()
    }

    /// Occupation probabilities at `t` for the delayed-treatment arm, with the 2→3
    /// increments scaled by `exp(log_theta)` and the 2→4 increments by `exp(log_theta_other)`.
    ///
    /// At each jump time deaths are credited from the pre-step occupations, then the
    /// 1→2 flow is applied. State outflows above the occupied mass are capped.
    pub fn occupation(&self, log_theta: T, log_theta_other: T, t: T) -> Result<StateOccupation<T>, EstimationError> {
        let theta3 = log_theta.exp();
        let theta4 = log_theta_other.exp();
        let (zero, one) = (T::zero(), T::one());
        let [mut p1, mut p2, mut p3, mut p4] = [one, zero, zero, zero];
        let mut clamps = 0;
        for (&s, d) in self.times.iter().zip(&self.increments) {
            if s > t {
                break;
            }
            let [d12, d13, d14, d23, d24] = *d;
            let (mut a12, mut a13, mut a14) = (d12, d13, d14);
            let out1 = d12 + d13 + d14;
            if out1 > one {
                a12 = d12 / out1;
                a13 = d13 / out1;
                a14 = d14 / out1;
                clamps += 1;
            }
            let (mut a23, mut a24) = (theta3 * d23, theta4 * d24);
            let out2 = a23 + a24;
            if out2 > one {
                a23 /= out2;
                a24 /= out2;
                clamps += 1;
            }
            let (q1, q2) = (p1, p2);
            p3 += q1 * a13 + q2 * a23;
            p4 += q1 * a14 + q2 * a24;
            p2 += q1 * a12 - q2 * (a23 + a24);
            p1 -= q1 * (a12 + a13 + a14);
        }
        let eps = T::lit(OCCUPATION_EPS);
        for (k, &v) in [p1, p2, p3, p4].iter().enumerate() {
            if !(v >= -eps && v <= one + eps) {
                return Err(EstimationError::OccupationOutOfRange { state: k as u8 + 1, value: v.as_f64() });
            }
        }
        Ok(StateOccupation { p: [p1, p2, p3, p4], clamps })
    }

    /// Model-based control-arm cumulative incidence of death from `cause` (3 or 4) by `t`.
    pub fn control_cif(&self, log_theta: T, t: T, cause: EventType) -> Result<T, EstimationError> {
        let occ = self.occupation(log_theta, T::zero(), t)?;
        Ok(match cause {
            EventType::CancerDeath => occ.state(3),
            EventType::OtherDeath => occ.state(4),
            EventType::Censored => T::zero(),
        })
    }
}

/// Control-arm incidence of `cause` at `t` implied by the screening-arm hazards and `log θ`.
pub fn model_control_cif<T: Real>(
    hazards: &ScreeningHazards<T>,
    log_theta: T,
    t: T,
    cause: EventType,
) -> Result<T, EstimationError> {
    hazards.control_model().control_cif(log_theta, t, cause)
}
