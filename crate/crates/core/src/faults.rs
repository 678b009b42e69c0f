//! Two-state telegraph fault process and fault-impedance randomization.
//!
//! State `Fault` leaves at `clear_rate`, state `Clear` leaves at `onset_rate`.
//! The occupancy of the fault state obeys
//!
//! ```text
//! dP_fault/dt = -clear_rate * P_fault + onset_rate * P_clear
//! ```
//!
//! whose stationary value is `onset_rate / (onset_rate + clear_rate)`.

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest resistance a randomized fault may take, in pu.
pub const MIN_FAULT_RESISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelegraphParams {
    /// Clear -> Fault transition rate, 1/s.
    pub onset_rate: f64,
    /// Fault -> Clear transition rate, 1/s.
    pub clear_rate: f64,
}

impl TelegraphParams {
    pub fn new(onset_rate: f64, clear_rate: f64) -> Result<Self> {
        let p = Self {
            onset_rate,
            clear_rate,
        };
        p.validate()?;
        Ok(p)
    }

    /// Onset 0.03/s, clearing 0.02/s: stationary fault occupancy 0.6.
    pub fn standard() -> Self {
        Self {
            onset_rate: 0.03,
            clear_rate: 0.02,
        }
    }

    /// A process that never leaves its initial state.
    pub fn frozen() -> Self {
        Self {
            onset_rate: 0.0,
            clear_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("onset_rate", self.onset_rate), ("clear_rate", self.clear_rate)] {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {r}"
                )));
            }
        }
        Ok(())
    }

    pub fn total_rate(&self) -> f64 {
        self.onset_rate + self.clear_rate
    }

    /// Long-run probability of the fault state.
    pub fn stationary_fault(&self) -> f64 {
        let s = self.total_rate();
        if s == 0.0 {
            f64::NAN
        } else {
            self.onset_rate / s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultState {
    Fault,
    Clear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelegraphState {
    pub prob_fault: f64,
    pub prob_clear: f64,
    pub current: FaultState,
}

impl TelegraphState {
    /// Deterministically clear: `(P_fault, P_clear) = (0, 1)`.
    pub fn clear() -> Self {
        Self {
            prob_fault: 0.0,
            prob_clear: 1.0,
            current: FaultState::Clear,
        }
    }

    pub fn faulted() -> Self {
        Self {
            prob_fault: 1.0,
            prob_clear: 0.0,
            current: FaultState::Fault,
        }
    }

    pub fn is_fault(&self) -> bool {
        self.current == FaultState::Fault
    }
}

/// Closed-form occupancy after `t` seconds starting from the distribution in `initial`.
pub fn occupancy(params: &TelegraphParams, initial: &TelegraphState, t: f64) -> Result<TelegraphState> {
    params.validate()?;
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidArgument(format!("time must be finite and >= 0, got {t}")));
    }
    let prob_fault = propagate(params, initial.prob_fault, initial.prob_clear, t);
    Ok(TelegraphState {
        prob_fault,
        prob_clear: 1.0 - prob_fault,
        current: initial.current,
    })
}

fn propagate(params: &TelegraphParams, p_fault: f64, p_clear: f64, t: f64) -> f64 {
    let (lam, mu) = (params.clear_rate, params.onset_rate);
    let s = lam + mu;
    if s == 0.0 {
        return p_fault;
    }
    let p = mu / s + (lam * p_fault - mu * p_clear) / s * (-s * t).exp();
    p.clamp(0.0, 1.0)
}

/// Probability of being in the fault state `dt` seconds after being in `from`.
pub fn transition_to_fault(params: &TelegraphParams, from: FaultState, dt: f64) -> f64 {
    let (lam, mu) = (params.clear_rate, params.onset_rate);
    let s = lam + mu;
    if s == 0.0 {
        return if from == FaultState::Fault { 1.0 } else { 0.0 };
    }
    // -expm1(-s dt) = 1 - e^{-s dt} without cancellation for small s dt.
    let decay = -(-s * dt).exp_m1();
    match from {
        FaultState::Clear => mu / s * decay,
        FaultState::Fault => 1.0 - lam / s * decay,
    }
}

/// One Markov step of length `dt`: the next state is drawn conditioned on the
/// current one, the occupancy fields carry the unconditional marginal forward.
pub fn step<R: rand::Rng + ?Sized>(
    params: &TelegraphParams,
    state: &TelegraphState,
    dt: f64,
    rng: &mut R,
) -> Result<TelegraphState> {
    params.validate()?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let p = transition_to_fault(params, state.current, dt);
    let u: f64 = rng.random();
    let current = if u < p { FaultState::Fault } else { FaultState::Clear };
    let prob_fault = propagate(params, state.prob_fault, state.prob_clear, dt);
    Ok(TelegraphState {
        prob_fault,
        prob_clear: 1.0 - prob_fault,
        current,
    })
}

/// Samples a path of `n` states (including the initial one) at spacing `dt`.
pub fn sample_path<R: rand::Rng + ?Sized>(
    params: &TelegraphParams,
    initial: TelegraphState,
    dt: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TelegraphState>> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let mut s = initial;
    out.push(s);
    for _ in 1..n {
        s = step(params, &s, dt, rng)?;
        out.push(s);
    }
    Ok(out)
}

/// Shunt fault impedance `R + jX`, per unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultParams {
    pub resistance: f64,
    pub reactance: f64,
}

impl FaultParams {
    pub fn new(resistance: f64, reactance: f64) -> Result<Self> {
        let f = Self {
            resistance,
            reactance,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resistance.is_finite() || !self.reactance.is_finite() {
            return Err(Error::InvalidArgument("fault impedance must be finite".into()));
        }
        if self.resistance < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fault resistance must be >= 0, got {}",
                self.resistance
            )));
        }
        if self.resistance == 0.0 && self.reactance == 0.0 {
            return Err(Error::InvalidArgument("fault impedance is zero".into()));
        }
        Ok(())
    }

    /// Shunt admittance `1 / (R + jX)` as `(G, B)`.
    pub fn admittance(&self) -> (f64, f64) {
        let d = self.resistance * self.resistance + self.reactance * self.reactance;
        (self.resistance / d, -self.reactance / d)
    }
}

/// Draws each impedance component from `N(v, scale * |v|)`; resistance floored
/// at [`MIN_FAULT_RESISTANCE`]. `scale = 0` returns `base` untouched.
pub fn sample_fault_params<R: rand::Rng + ?Sized>(
    base: &FaultParams,
    scale: f64,
    rng: &mut R,
) -> FaultParams {
    if scale == 0.0 {
        return *base;
    }
    let mut draw = |v: f64| {
        let z: f64 = rng.sample(StandardNormal);
        v + scale * v.abs() * z
    };
    let resistance = draw(base.resistance).max(MIN_FAULT_RESISTANCE);
    let reactance = draw(base.reactance);
    FaultParams {
        resistance,
        reactance,
    }
}
