//! Event-history simulation from the four-state model and construction of
//! conventional-trial datasets.
//!
//! Screening-arm subjects follow the early-treatment intensities. Control-arm
//! subjects follow the delayed-treatment intensities, and any detection they pass
//! through stays latent: their record shows only the terminal event.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{validate_dataset, Arm, EventType, SubjectRecord, TrialDataset, ValidationError};
use crate::model::{knots, HazardFn, IntensityModel, ModelError, TransitionId};
use crate::num::Real;
use crate::rng::{self, StreamRng};

/// Treatment following an early detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Referral {
    Delayed,
    Early,
}

/// Latent history of one subject before censoring.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPath<T> {
    pub detect_time: Option<T>,
    /// `+∞` if no terminal event ever occurs.
    pub terminal_time: T,
    /// [`EventType::Censored`] only when `terminal_time` is infinite.
    pub terminal: EventType,
    /// Detection happened but is not observable (delayed-treatment / control arm).
    pub latent: bool,
}

impl<T: Real> SubjectPath<T> {
    /// Observed record under type I censoring at `horizon`.
    pub fn observe(&self, id: u64, arm: Arm, horizon: T) -> SubjectRecord<T> {
        let (event_time, event_type) = if self.terminal_time <= horizon {
            (self.terminal_time, self.terminal)
        } else {
            (horizon, EventType::Censored)
        };
        let detect_time = match arm {
            Arm::Screening => self.detect_time.filter(|&d| d <= horizon),
            Arm::Control => None,
        };
        SubjectRecord { id, arm, detect_time, event_time, event_type }
    }
}

/// Time at which the summed cumulative hazard of `hazards`, counted from `start`,
/// reaches `target`, along with the start of the constant-rate segment containing it.
fn first_passage<T: Real>(hazards: &[&HazardFn<T>], start: T, target: T) -> Option<(T, T)> {
    let ks = knots(hazards, start, T::infinity());
    let mut remaining = target;
    for (k, &a) in ks.iter().enumerate() {
        let rate: T = hazards.iter().map(|h| h.rate(a)).sum();
        match ks.get(k + 1) {
            Some(&b) => {
                let mass = rate * (b - a);
                if mass >= remaining && rate > T::zero() {
                    return Some(((a + remaining / rate).min(b), a));
                }
                remaining -= mass;
            }
            None if rate > T::zero() => return Some((a + remaining / rate, a)),
            None => return None,
        }
    }
    None
}

/// Next transition out of a state whose outgoing hazards are `hazards`, starting at `start`.
/// Returns the event time and the index of the hazard that fired.
fn next_event<T: Real, R: Rng>(hazards: &[&HazardFn<T>], start: T, rng: &mut R) -> Option<(T, usize)> {
    let u: f64 = rng.random();
    let target = T::lit(-(-u).ln_1p());
    let (t, segment) = first_passage(hazards, start, target)?;
    let rates: Vec<T> = hazards.iter().map(|h| h.rate(segment)).collect();
    let total: T = rates.iter().copied().sum();
    let mut v = T::lit(rng.random::<f64>()) * total;
    let mut pick = rates.len() - 1;
    for (k, &r) in rates.iter().enumerate() {
        if r > T::zero() {
            pick = k;
            if v < r {
                break;
            }
            v -= r;
        }
    }
    Some((t, pick))
}

/// Exit from state 1: `(time, destination state)`.
pub(crate) fn leave_healthy<T: Real, R: Rng>(model: &IntensityModel<T>, frailty: T, rng: &mut R) -> Option<(T, u8)> {
    let h12 = model.hazard(TransitionId::Detect).scaled(frailty);
    let h13 = model.hazard(TransitionId::DirectCancerDeath).scaled(frailty);
    let h14 = model.hazard(TransitionId::DirectOtherDeath);
    let (t, k) = next_event(&[&h12, &h13, h14], T::zero(), rng)?;
    Some((t, [2, 3, 4][k]))
}

/// Exit from state 2 entered at `entry`: `(time, destination state)`.
pub(crate) fn leave_detected<T: Real, R: Rng>(
    model: &IntensityModel<T>,
    referral: Referral,
    frailty: T,
    entry: T,
    rng: &mut R,
) -> Option<(T, u8)> {
    let effect = match referral {
        Referral::Early => T::one(),
        Referral::Delayed => model.theta(),
    };
    let h23 = model.hazard(TransitionId::CancerDeathAfterDetect).scaled(frailty * effect);
    let h24 = model.hazard(TransitionId::OtherDeathAfterDetect);
    let (t, k) = next_event(&[&h23, h24], entry, rng)?;
    Some((t, [3, 4][k]))
}

fn terminal(state: u8) -> EventType {
    if state == 3 {
        EventType::CancerDeath
    } else {
        EventType::OtherDeath
    }
}

/// Simulates one subject from state 1. `frailty` multiplies the 1→2, 1→3 and 2→3
/// hazards (`exp(βU)`, or 1 without a confounder).
pub fn simulate_path<T: Real, R: Rng>(
    model: &IntensityModel<T>,
    referral: Referral,
    frailty: T,
    rng: &mut R,
) -> SubjectPath<T> {
    let never =
        SubjectPath { detect_time: None, terminal_time: T::infinity(), terminal: EventType::Censored, latent: false };
    let Some((t1, dest)) = leave_healthy(model, frailty, rng) else {
        return never;
    };
    if dest != 2 {
        return SubjectPath { detect_time: None, terminal_time: t1, terminal: terminal(dest), latent: false };
    }
    let latent = referral == Referral::Delayed;
    match leave_detected(model, referral, frailty, t1, rng) {
        Some((t2, dest2)) => {
            SubjectPath { detect_time: Some(t1), terminal_time: t2, terminal: terminal(dest2), latent }
        }
        None => SubjectPath { detect_time: Some(t1), latent, ..never },
    }
}

/// Unmeasured baseline covariate `U ~ Bernoulli(prevalence)` acting as `exp(βU)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct Confounder<T> {
    pub beta: T,
    pub prevalence: T,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("n must be at least 2, got {0}")]
    TooFewSubjects(u64),
    #[error("confounder prevalence must lie in [0, 1], got {0}")]
    BadPrevalence(f64),
    #[error("confounder beta must be finite, got {0}")]
    BadBeta(f64),
    #[error("censoring horizon must be finite and positive, got {0}")]
    BadHorizon(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Scenario for simulating a conventional two-arm screening trial.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig<T> {
    pub n: usize,
    pub model: IntensityModel<T>,
    pub censor_horizon: T,
    pub confounder: Option<Confounder<T>>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct HazardTable<T> {
    #[serde(rename = "12")]
    h12: HazardFn<T>,
    #[serde(rename = "13")]
    h13: HazardFn<T>,
    #[serde(rename = "14")]
    h14: HazardFn<T>,
    #[serde(rename = "23")]
    h23: HazardFn<T>,
    #[serde(rename = "24")]
    h24: HazardFn<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct ConfigJson<T> {
    n: u64,
    theta: T,
    censor_horizon: T,
    hazards: HazardTable<T>,
    #[serde(default)]
    confounder: Option<Confounder<T>>,
    seed: u64,
}

impl<T: Real> ScenarioConfig<T> {
    pub fn new(
        n: usize,
        model: IntensityModel<T>,
        censor_horizon: T,
        confounder: Option<Confounder<T>>,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        if n < 2 {
            return Err(ConfigError::TooFewSubjects(n as u64));
        }
        if !(censor_horizon.is_finite() && censor_horizon > T::zero()) {
            return Err(ConfigError::BadHorizon(censor_horizon.as_f64()));
        }
        if let Some(c) = &confounder {
            if !(c.prevalence >= T::zero() && c.prevalence <= T::one()) {
                return Err(ConfigError::BadPrevalence(c.prevalence.as_f64()));
            }
            if !c.beta.is_finite() {
                return Err(ConfigError::BadBeta(c.beta.as_f64()));
            }
        }
        Ok(ScenarioConfig { n, model, censor_horizon, confounder, seed })
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let raw: ConfigJson<T> = serde_json::from_str(text)?;
        if raw.n < 2 {
            return Err(ConfigError::TooFewSubjects(raw.n));
        }
        let h = raw.hazards;
        let model = IntensityModel::new([h.h12, h.h13, h.h14, h.h23, h.h24], raw.theta)?;
        Self::new(raw.n as usize, model, raw.censor_horizon, raw.confounder, raw.seed)
    }

    pub fn to_json(&self) -> String {
        let hs = self.model.hazards().clone();
        let [h12, h13, h14, h23, h24] = hs;
        let raw = ConfigJson {
            n: self.n as u64,
            theta: self.model.theta(),
            censor_horizon: self.censor_horizon,
            hazards: HazardTable { h12, h13, h14, h23, h24 },
            confounder: self.confounder,
            seed: self.seed,
        };
        serde_json::to_string_pretty(&raw).expect("config serializes")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ScenarioConfig { seed, ..self.clone() }
    }

    pub fn with_n(&self, n: usize) -> Result<Self, ConfigError> {
        Self::new(n, self.model.clone(), self.censor_horizon, self.confounder, self.seed)
    }

    /// `exp(βU)` for a subject drawing `U` from `rng`.
    pub(crate) fn draw_frailty<R: Rng>(&self, rng: &mut R) -> T {
        match &self.confounder {
            None => T::one(),
            Some(c) => {
                let u = rng.random::<f64>() < c.prevalence.as_f64();
                if u {
                    c.beta.exp()
                } else {
                    T::one()
                }
            }
        }
    }
}

/// Simulates one subject of the conventional trial from its own random stream.
pub fn simulate_subject<T: Real>(cfg: &ScenarioConfig<T>, index: u64, rng: &mut StreamRng) -> SubjectRecord<T> {
    let arm = if rng.random::<bool>() { Arm::Screening } else { Arm::Control };
    let frailty = cfg.draw_frailty(rng);
    let referral = match arm {
        Arm::Screening => Referral::Early,
        Arm::Control => Referral::Delayed,
    };
    simulate_path(&cfg.model, referral, frailty, rng).observe(index + 1, arm, cfg.censor_horizon)
}

/// Simulates a randomized trial of `cfg.n` subjects. Subject `i` draws from stream
/// `i` of `cfg.seed`, so the output does not depend on the thread count.
pub fn simulate_trial<T: Real>(cfg: &ScenarioConfig<T>) -> Result<TrialDataset<T>, ValidationError> {
    let records: Vec<SubjectRecord<T>> = (0..cfg.n)
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| simulate_subject(cfg, i as u64, &mut rng::stream(cfg.seed, i as u64)))
        .collect();
    validate_dataset(records, cfg.censor_horizon)
}

/// The constant-rate scenario used throughout the simulation studies: rates
/// 1→2 0.2280, 1→3 0.1148, 1→4 0.0168, 2→3 0.1980, 2→4 0.0111.
pub fn reference_model<T: Real>(theta: T) -> IntensityModel<T> {
    IntensityModel::constant([0.2280, 0.1148, 0.0168, 0.1980, 0.0111].map(T::lit), theta).expect("valid constant model")
}
