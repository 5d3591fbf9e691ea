//! Transition structure and intensity functions of the four-state screening model.
//!
//! States: 1 healthy, 2 early detected, 3 cancer death, 4 other-cause death.
//! All intensities are indexed by time since baseline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::num::Real;

/// One of the five legal transitions of the model. States 3 and 4 are absorbing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransitionId {
    Detect,
    DirectCancerDeath,
    DirectOtherDeath,
    CancerDeathAfterDetect,
    OtherDeathAfterDetect,
}

impl TransitionId {
    pub const ALL: [TransitionId; 5] = [
        TransitionId::Detect,
        TransitionId::DirectCancerDeath,
        TransitionId::DirectOtherDeath,
        TransitionId::CancerDeathAfterDetect,
        TransitionId::OtherDeathAfterDetect,
    ];

    /// Looks up a transition by its (from, to) state pair.
    pub fn new(from: u8, to: u8) -> Option<Self> {
        match (from, to) {
            (1, 2) => Some(Self::Detect),
            (1, 3) => Some(Self::DirectCancerDeath),
            (1, 4) => Some(Self::DirectOtherDeath),
            (2, 3) => Some(Self::CancerDeathAfterDetect),
            (2, 4) => Some(Self::OtherDeathAfterDetect),
            _ => None,
        }
    }

    pub fn from_state(self) -> u8 {
        match self {
            Self::Detect | Self::DirectCancerDeath | Self::DirectOtherDeath => 1,
            Self::CancerDeathAfterDetect | Self::OtherDeathAfterDetect => 2,
        }
    }

    pub fn to_state(self) -> u8 {
        match self {
            Self::Detect => 2,
            Self::DirectCancerDeath | Self::CancerDeathAfterDetect => 3,
            Self::DirectOtherDeath | Self::OtherDeathAfterDetect => 4,
        }
    }

    /// Position in [`TransitionId::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Two-digit key used in config files, e.g. `"12"`.
    pub fn key(self) -> &'static str {
        match self {
            Self::Detect => "12",
            Self::DirectCancerDeath => "13",
            Self::DirectOtherDeath => "14",
            Self::CancerDeathAfterDetect => "23",
            Self::OtherDeathAfterDetect => "24",
        }
    }
}

impl fmt::Display for TransitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from_state(), self.to_state())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("hazard rate must be finite and nonnegative, got {0}")]
    NegativeRate(f64),
    #[error("hazard multiplier must be finite and nonnegative, got {0}")]
    BadMultiplier(f64),
    #[error("piecewise breakpoints must be positive and strictly increasing")]
    UnorderedBreakpoints,
    #[error("piecewise hazard needs one more rate than breakpoints ({breakpoints} breakpoints, {rates} rates)")]
    RateCountMismatch { breakpoints: usize, rates: usize },
    #[error("theta must be finite and positive, got {0}")]
    BadTheta(f64),
}

/// Shape of a hazard function.
///
/// A piecewise hazard with breakpoints `b_1 < ... < b_k` has `k + 1` rates;
/// `rates[i]` applies on `[b_i, b_{i+1})` with `b_0 = 0` and `b_{k+1} = ∞`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
#[serde(bound(deserialize = "T: Real"))]
pub enum HazardForm<T> {
    Constant { rate: T },
    Piecewise { breakpoints: Vec<T>, rates: Vec<T> },
}

#[derive(Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
struct RawHazardFn<T> {
    #[serde(flatten)]
    form: HazardForm<T>,
    #[serde(default = "T::one")]
    multiplier: T,
}

/// Transition intensity `λ(t)` with a nonnegative multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHazardFn<T>", into = "RawHazardFn<T>")]
#[serde(bound(deserialize = "T: Real", serialize = "T: Real"))]
pub struct HazardFn<T> {
    form: HazardForm<T>,
    multiplier: T,
}

impl<T: Real> TryFrom<RawHazardFn<T>> for HazardFn<T> {
    type Error = ModelError;

    fn try_from(raw: RawHazardFn<T>) -> Result<Self, ModelError> {
        HazardFn::new(raw.form)?.with_multiplier(raw.multiplier)
    }
}

impl<T: Real> From<HazardFn<T>> for RawHazardFn<T> {
    fn from(h: HazardFn<T>) -> Self {
        RawHazardFn { form: h.form, multiplier: h.multiplier }
    }
}

fn check_rate<T: Real>(r: T) -> Result<(), ModelError> {
    if r.is_finite() && r >= T::zero() {
        Ok(())
    } else {
        Err(ModelError::NegativeRate(r.as_f64()))
    }
}

impl<T: Real> HazardFn<T> {
    pub fn new(form: HazardForm<T>) -> Result<Self, ModelError> {
        match &form {
            HazardForm::Constant { rate } => check_rate(*rate)?,
            HazardForm::Piecewise { breakpoints, rates } => {
                if rates.len() != breakpoints.len() + 1 {
                    return Err(ModelError::RateCountMismatch { breakpoints: breakpoints.len(), rates: rates.len() });
                }
                rates.iter().try_for_each(|&r| check_rate(r))?;
                let positive = breakpoints.first().is_none_or(|&b| b > T::zero());
                let increasing = breakpoints.windows(2).all(|w| w[0] < w[1]);
                if !positive || !increasing || breakpoints.iter().any(|b| !b.is_finite()) {
                    return Err(ModelError::UnorderedBreakpoints);
                }
            }
        }
        Ok(HazardFn { form, multiplier: T::one() })
    }

    pub fn constant(rate: T) -> Result<Self, ModelError> {
        Self::new(HazardForm::Constant { rate })
    }

    pub fn piecewise(breakpoints: Vec<T>, rates: Vec<T>) -> Result<Self, ModelError> {
        Self::new(HazardForm::Piecewise { breakpoints, rates })
    }

    pub fn zero() -> Self {
        HazardFn { form: HazardForm::Constant { rate: T::zero() }, multiplier: T::one() }
    }

    pub fn with_multiplier(mut self, multiplier: T) -> Result<Self, ModelError> {
        if !(multiplier.is_finite() && multiplier >= T::zero()) {
            return Err(ModelError::BadMultiplier(multiplier.as_f64()));
        }
        self.multiplier = multiplier;
        Ok(self)
    }

    /// Same hazard with its multiplier scaled by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        HazardFn { form: self.form.clone(), multiplier: self.multiplier * factor }
    }

    pub fn form(&self) -> &HazardForm<T> {
        &self.form
    }

    pub fn multiplier(&self) -> T {
        self.multiplier
    }

    /// Times at which the rate may jump. Empty for constant hazards.
    pub fn breakpoints(&self) -> &[T] {
        match &self.form {
            HazardForm::Constant { .. } => &[],
            HazardForm::Piecewise { breakpoints, .. } => breakpoints,
        }
    }

    /// Instantaneous rate, right-continuous at breakpoints.
    pub fn rate(&self, t: T) -> T {
        let base = match &self.form {
            HazardForm::Constant { rate } => *rate,
            HazardForm::Piecewise { breakpoints, rates } => rates[breakpoints.partition_point(|&b| b <= t)],
        };
        base * self.multiplier
    }

    /// `Λ(t) = ∫₀ᵗ λ(s) ds` in closed form. Negative `t` is treated as 0.
    pub fn cumulative(&self, t: T) -> T {
        if t <= T::zero() {
            return T::zero();
        }
        let base = match &self.form {
            HazardForm::Constant { rate } => {
                if *rate == T::zero() {
                    T::zero()
                } else {
                    *rate * t
                }
            }
            HazardForm::Piecewise { breakpoints, rates } => {
                let mut acc = T::zero();
                let mut left = T::zero();
                for (i, &rate) in rates.iter().enumerate() {
                    let right = breakpoints.get(i).copied().unwrap_or_else(T::infinity);
                    if t <= right {
                        acc += rate * (t - left);
                        break;
                    }
                    acc += rate * (right - left);
                    left = right;
                }
                acc
            }
        };
        base * self.multiplier
    }

    pub fn is_identically_zero(&self) -> bool {
        self.multiplier == T::zero()
            || match &self.form {
                HazardForm::Constant { rate } => *rate == T::zero(),
                HazardForm::Piecewise { rates, .. } => rates.iter().all(|r| *r == T::zero()),
            }
    }
}

/// Sorted, deduplicated breakpoints of `hazards` lying strictly inside `(from, to)`,
/// bracketed by `from` and `to`. Every hazard is constant between consecutive knots.
pub(crate) fn knots<T: Real>(hazards: &[&HazardFn<T>], from: T, to: T) -> Vec<T> {
    let mut out: Vec<T> =
        hazards.iter().flat_map(|h| h.breakpoints().iter().copied()).filter(|&b| b > from && b < to).collect();
    out.push(from);
    if to.is_finite() {
        out.push(to);
    }
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
    out.dedup();
    out
}

/// Screening-arm intensities together with the delayed-treatment hazard ratio `θ`.
///
/// The early-treatment arm uses the stored hazards as is. Under delayed treatment
/// the 2→3 hazard is `θ·λ₂₃(t)` and every other hazard is unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityModel<T> {
    hazards: [HazardFn<T>; 5],
    theta: T,
}

impl<T: Real> IntensityModel<T> {
    /// `hazards` is ordered as [`TransitionId::ALL`].
    pub fn new(hazards: [HazardFn<T>; 5], theta: T) -> Result<Self, ModelError> {
        if !(theta.is_finite() && theta > T::zero()) {
            return Err(ModelError::BadTheta(theta.as_f64()));
        }
        Ok(IntensityModel { hazards, theta })
    }

    /// All five hazards constant, ordered 1→2, 1→3, 1→4, 2→3, 2→4.
    pub fn constant(rates: [T; 5], theta: T) -> Result<Self, ModelError> {
        let mut hs = Vec::with_capacity(5);
        for r in rates {
            hs.push(HazardFn::constant(r)?);
        }
        let hazards: [HazardFn<T>; 5] = hs.try_into().expect("five hazards");
        Self::new(hazards, theta)
    }

    pub fn hazard(&self, tr: TransitionId) -> &HazardFn<T> {
        &self.hazards[tr.index()]
    }

    pub fn hazards(&self) -> &[HazardFn<T>; 5] {
        &self.hazards
    }

    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn log_theta(&self) -> T {
        self.theta.ln()
    }

    pub fn with_theta(&self, theta: T) -> Result<Self, ModelError> {
        Self::new(self.hazards.clone(), theta)
    }

    /// 2→3 hazard under delayed treatment.
    pub fn delayed_cancer_hazard(&self) -> HazardFn<T> {
        self.hazard(TransitionId::CancerDeathAfterDetect).scaled(self.theta)
    }

    /// Copy with the confounder multiplier applied to 1→2, 1→3 and 2→3.
    pub fn with_frailty(&self, multiplier: T) -> Self {
        let mut hazards = self.hazards.clone();
        for tr in [TransitionId::Detect, TransitionId::DirectCancerDeath, TransitionId::CancerDeathAfterDetect] {
            hazards[tr.index()] = hazards[tr.index()].scaled(multiplier);
        }
        IntensityModel { hazards, theta: self.theta }
    }
}

/// Free-function form of [`HazardFn::cumulative`].
pub fn cumulative_hazard<T: Real>(h: &HazardFn<T>, t: T) -> T {
    h.cumulative(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_two_detection_rate_over_seven_years() {
        let h = HazardFn::constant(0.2280_f64).unwrap();
        assert!((cumulative_hazard(&h, 7.0) - 1.596).abs() < 1e-12);
    }

    #[test]
    fn zero_at_origin() {
        let h = HazardFn::piecewise(vec![1.0, 2.0], vec![0.5, 0.1, 3.0]).unwrap();
        assert_eq!(h.cumulative(0.0), 0.0);
        assert_eq!(HazardFn::constant(2.0_f64).unwrap().cumulative(0.0), 0.0);
    }

    #[test]
    fn piecewise_closed_form() {
        let h = HazardFn::piecewise(vec![2.0_f64], vec![0.1, 0.3]).unwrap();
        assert!((h.cumulative(3.0) - 0.5).abs() < 1e-15);
        assert_eq!(h.rate(1.999), 0.1);
        assert_eq!(h.rate(2.0), 0.3);
    }

    #[test]
    fn rejects_malformed_hazards() {
        assert_eq!(HazardFn::constant(-1.0_f64), Err(ModelError::NegativeRate(-1.0)));
        assert_eq!(HazardFn::piecewise(vec![2.0_f64, 1.0], vec![0.1, 0.2, 0.3]), Err(ModelError::UnorderedBreakpoints));
        assert_eq!(HazardFn::piecewise(vec![0.0_f64], vec![0.1, 0.2]), Err(ModelError::UnorderedBreakpoints));
        assert!(matches!(HazardFn::piecewise(vec![1.0_f64], vec![0.1]), Err(ModelError::RateCountMismatch { .. })));
        assert!(IntensityModel::constant([0.1_f64; 5], 0.0).is_err());
    }

    #[test]
    fn transition_ids() {
        assert_eq!(TransitionId::new(2, 1), None);
        assert_eq!(TransitionId::new(3, 4), None);
        assert_eq!(TransitionId::new(1, 1), None);
        for tr in TransitionId::ALL {
            assert_eq!(TransitionId::new(tr.from_state(), tr.to_state()), Some(tr));
            assert_eq!(TransitionId::ALL[tr.index()], tr);
        }
    }

    #[test]
    fn json_forms() {
        let c: HazardFn<f64> = serde_json::from_str(r#"{"form":"constant","rate":0.2}"#).unwrap();
        assert_eq!(c, HazardFn::constant(0.2).unwrap());
        let p: HazardFn<f64> =
            serde_json::from_str(r#"{"form":"piecewise","breakpoints":[2.0],"rates":[0.1,0.3]}"#).unwrap();
        assert_eq!(p.breakpoints(), &[2.0]);
        assert!(serde_json::from_str::<HazardFn<f64>>(r#"{"form":"constant","rate":-0.2}"#).is_err());
        let back: HazardFn<f64> = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn delayed_arm_scales_only_cancer_hazard() {
        let m = IntensityModel::constant([0.228, 0.1148, 0.0168, 0.198, 0.0111], 1.6_f64).unwrap();
        assert!((m.delayed_cancer_hazard().rate(3.0) - 1.6 * 0.198).abs() < 1e-15);
        let f = m.with_frailty(2.0);
        assert_eq!(f.hazard(TransitionId::DirectOtherDeath).rate(1.0), 0.0168);
        assert_eq!(f.hazard(TransitionId::OtherDeathAfterDetect).rate(1.0), 0.0111);
        assert_eq!(f.hazard(TransitionId::Detect).rate(1.0), 0.456);
    }

    #[test]
    fn generic_over_f32() {
        let h = HazardFn::piecewise(vec![2.0_f32], vec![0.1, 0.3]).unwrap();
        assert!((h.cumulative(3.0) - 0.5).abs() < 1e-6);
    }

    fn arb_hazard() -> impl Strategy<Value = HazardFn<f64>> {
        prop_oneof![
            (0.0..5.0f64).prop_map(|r| HazardFn::constant(r).unwrap()),
            (proptest::collection::vec(0.01..3.0f64, 1..6), proptest::collection::vec(0.0..5.0f64, 6)).prop_map(
                |(gaps, rates)| {
                    let mut acc = 0.0;
                    let bps: Vec<f64> = gaps
                        .iter()
                        .map(|g| {
                            acc += g;
                            acc
                        })
                        .collect();
                    let rates = rates[..bps.len() + 1].to_vec();
                    HazardFn::piecewise(bps, rates).unwrap()
                }
            ),
        ]
    }

    proptest! {
        #[test]
        fn cumulative_is_monotone(h in arb_hazard(), s in 0.0..20.0f64, d in 0.0..20.0f64) {
            prop_assert!(h.cumulative(s) <= h.cumulative(s + d));
            prop_assert!(h.rate(s) >= 0.0);
        }

        #[test]
        fn multiplier_scales_linearly(h in arb_hazard(), m in 0.0..10.0f64, t in 0.0..20.0f64) {
            let scaled = h.clone().with_multiplier(m).unwrap();
            let expect = m * h.cumulative(t);
            prop_assert!((scaled.cumulative(t) - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}
