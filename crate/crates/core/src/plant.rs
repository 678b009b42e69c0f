//! Single machine, infinite bus.
//!
//! A constant-EMF machine behind transient reactance `xd'` feeds its terminal
//! bus, a step-up transformer `xt` to the high-voltage bus, and two parallel
//! lines to the infinite bus. Shunt faults are applied at the high-voltage bus
//! where line 1 leaves it. The rotor obeys the damped swing equation
//!
//! ```text
//! d(delta)/dt = w_b * dw
//! d(dw)/dt    = (Pm - Pe(delta) - D * dw) / (2H)
//! ```
//!
//! integrated by fixed-step RK4 and sampled at `sample_dt`.

use nalgebra::Complex;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faults::{self, FaultParams, TelegraphParams, TelegraphState};
use crate::series::MultiSeries;

type C64 = Complex<f64>;

/// Channel labels of simulated telemetry.
pub const CHANNELS: [&str; 5] = ["P", "Q", "V", "phi", "fault"];

/// Loss of synchronism threshold on the speed deviation, pu.
pub const MAX_SPEED_DEVIATION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    /// Inertia constant H, s.
    pub inertia_h: f64,
    /// Damping coefficient D, pu torque per pu speed.
    pub damping_d: f64,
    pub transient_reactance_xd: f64,
    pub transformer_reactance_xt: f64,
    pub line_reactances: [f64; 2],
    pub infinite_bus_voltage: f64,
    pub mechanical_power: f64,
    pub internal_emf: f64,
    pub base_frequency: f64,
    pub fine_dt: f64,
    pub sample_dt: f64,
}

impl Default for PlantConfig {
    /// Four 555 MVA units lumped on a 2220 MVA base, 60 Hz.
    fn default() -> Self {
        Self {
            inertia_h: 3.5,
            damping_d: 20.0,
            transient_reactance_xd: 0.3,
            transformer_reactance_xt: 0.15,
            line_reactances: [0.5, 0.93],
            infinite_bus_voltage: 0.90081,
            mechanical_power: 0.9,
            internal_emf: 1.1626,
            base_frequency: 60.0,
            fine_dt: 1e-3,
            sample_dt: 0.1,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inertia_h", self.inertia_h),
            ("transient_reactance_xd", self.transient_reactance_xd),
            ("transformer_reactance_xt", self.transformer_reactance_xt),
            ("line_reactances[0]", self.line_reactances[0]),
            ("line_reactances[1]", self.line_reactances[1]),
            ("infinite_bus_voltage", self.infinite_bus_voltage),
            ("internal_emf", self.internal_emf),
            ("base_frequency", self.base_frequency),
            ("fine_dt", self.fine_dt),
            ("sample_dt", self.sample_dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("damping_d", self.damping_d), ("mechanical_power", self.mechanical_power)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        let ratio = self.sample_dt / self.fine_dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "sample_dt {} is not an integer multiple of fine_dt {}",
                self.sample_dt, self.fine_dt
            )));
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.sample_dt / self.fine_dt).round() as usize
    }

    /// Parallel combination of the two lines.
    pub fn line_equivalent(&self) -> f64 {
        let [a, b] = self.line_reactances;
        a * b / (a + b)
    }

    /// Series reactance from internal EMF to the infinite bus, unfaulted.
    pub fn total_reactance(&self) -> f64 {
        self.transient_reactance_xd + self.transformer_reactance_xt + self.line_equivalent()
    }

    /// Peak of the unfaulted power-angle curve, `E' V / X_total`.
    pub fn static_limit(&self) -> f64 {
        self.internal_emf * self.infinite_bus_voltage / self.total_reactance()
    }

    pub fn omega_base(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.base_frequency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub rotor_angle_delta: f64,
    pub speed_deviation: f64,
    pub fault_active: bool,
    pub fault: Option<FaultParams>,
}

/// Terminal-bus quantities at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terminal {
    pub p: f64,
    pub q: f64,
    pub v: f64,
    pub phi: f64,
    /// Air-gap electrical power.
    pub pe: f64,
}

/// Reduced network seen from the internal EMF for one fault condition.
#[derive(Debug, Clone, Copy)]
struct Network {
    emf: f64,
    xd: f64,
    y_a: C64,
    v_inf: C64,
    y_b: C64,
    y_sum: C64,
}

impl Network {
    fn new(cfg: &PlantConfig, fault: Option<&FaultParams>) -> Self {
        let x_a = cfg.transient_reactance_xd + cfg.transformer_reactance_xt;
        let y_a = C64::new(0.0, -1.0 / x_a);
        let y_b = C64::new(0.0, -1.0 / cfg.line_equivalent());
        let y_f = fault.map_or(C64::new(0.0, 0.0), |f| {
            let (g, b) = f.admittance();
            C64::new(g, b)
        });
        Self {
            emf: cfg.internal_emf,
            xd: cfg.transient_reactance_xd,
            y_a,
            v_inf: C64::new(cfg.infinite_bus_voltage, 0.0),
            y_b,
            y_sum: y_a + y_b + y_f,
        }
    }

    /// Generator current and internal EMF phasor at rotor angle `delta`.
    fn current(&self, delta: f64) -> (C64, C64) {
        let e = C64::from_polar(self.emf, delta);
        // Eliminate the faulted high-voltage node.
        let v_hv = (self.y_a * e + self.y_b * self.v_inf) / self.y_sum;
        (self.y_a * (e - v_hv), e)
    }

    fn electrical_power(&self, delta: f64) -> f64 {
        let (i, e) = self.current(delta);
        (e * i.conj()).re
    }

    fn terminal(&self, delta: f64) -> Terminal {
        let (i, e) = self.current(delta);
        let v_t = e - C64::new(0.0, self.xd) * i;
        let s = v_t * i.conj();
        Terminal {
            p: s.re,
            q: s.im,
            v: v_t.norm(),
            phi: v_t.arg(),
            pe: (e * i.conj()).re,
        }
    }
}

/// Terminal quantities for a given rotor angle and fault condition.
pub fn terminal_quantities(cfg: &PlantConfig, delta: f64, fault: Option<&FaultParams>) -> Terminal {
    Network::new(cfg, fault).terminal(delta)
}

/// Unfaulted operating point with zero speed deviation.
pub fn solve_steady_state(cfg: &PlantConfig) -> Result<PlantState> {
    cfg.validate()?;
    let limit = cfg.static_limit();
    if cfg.mechanical_power > limit {
        return Err(Error::NoEquilibrium {
            mechanical: cfg.mechanical_power,
            limit,
        });
    }
    let delta = (cfg.mechanical_power / limit).asin();
    Ok(PlantState {
        rotor_angle_delta: delta,
        speed_deviation: 0.0,
        fault_active: false,
        fault: None,
    })
}

#[derive(Debug, Clone, Copy)]
struct Swing {
    w_b: f64,
    pm: f64,
    d: f64,
    two_h: f64,
}

impl Swing {
    fn rhs(&self, net: &Network, delta: f64, dw: f64) -> (f64, f64) {
        let pe = net.electrical_power(delta);
        (self.w_b * dw, (self.pm - pe - self.d * dw) / self.two_h)
    }

    fn rk4(&self, net: &Network, h: f64, delta: f64, dw: f64) -> (f64, f64) {
        let (k1d, k1w) = self.rhs(net, delta, dw);
        let (k2d, k2w) = self.rhs(net, delta + 0.5 * h * k1d, dw + 0.5 * h * k1w);
        let (k3d, k3w) = self.rhs(net, delta + 0.5 * h * k2d, dw + 0.5 * h * k2w);
        let (k4d, k4w) = self.rhs(net, delta + h * k3d, dw + h * k3w);
        (
            delta + h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d),
            dw + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w),
        )
    }
}

/// Telemetry plus the sampled machine states behind it.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub series: MultiSeries,
    pub states: Vec<PlantState>,
}

/// Integrates `n_samples` samples from `initial`. `fault_at(k)` gives the
/// shunt fault (if any) held over `[k, k+1) * sample_dt`.
pub fn integrate<F>(
    cfg: &PlantConfig,
    initial: PlantState,
    n_samples: usize,
    mut fault_at: F,
) -> Result<Trajectory>
where
    F: FnMut(usize) -> Option<FaultParams>,
{
    cfg.validate()?;
    let swing = Swing {
        w_b: cfg.omega_base(),
        pm: cfg.mechanical_power,
        d: cfg.damping_d,
        two_h: 2.0 * cfg.inertia_h,
    };
    let (h, sub) = (cfg.fine_dt, cfg.substeps());
    let delta0 = initial.rotor_angle_delta;
    let (mut delta, mut dw) = (initial.rotor_angle_delta, initial.speed_deviation);
    let mut cols: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::with_capacity(n_samples));
    let mut states = Vec::with_capacity(n_samples);
    let mut cached: Option<(Option<FaultParams>, Network)> = None;

    for k in 0..n_samples {
        let fault = fault_at(k);
        let net = match &cached {
            Some((f, net)) if *f == fault => *net,
            _ => {
                let net = Network::new(cfg, fault.as_ref());
                cached = Some((fault, net));
                net
            }
        };
        let term = net.terminal(delta);
        for (col, v) in cols.iter_mut().zip([
            term.p,
            term.q,
            term.v,
            term.phi,
            if fault.is_some() { 1.0 } else { 0.0 },
        ]) {
            col.push(v);
        }
        states.push(PlantState {
            rotor_angle_delta: delta,
            speed_deviation: dw,
            fault_active: fault.is_some(),
            fault,
        });
        if k + 1 == n_samples {
            break;
        }
        for j in 0..sub {
            (delta, dw) = swing.rk4(&net, h, delta, dw);
            let t = k as f64 * cfg.sample_dt + (j + 1) as f64 * h;
            if !delta.is_finite() || !dw.is_finite() {
                return Err(Error::SimulationDiverged {
                    time: t,
                    reason: "non-finite state".into(),
                });
            }
            if dw.abs() > MAX_SPEED_DEVIATION {
                return Err(Error::SimulationDiverged {
                    time: t,
                    reason: format!("speed deviation {dw:.4} pu"),
                });
            }
            if (delta - delta0).abs() > std::f64::consts::PI {
                return Err(Error::SimulationDiverged {
                    time: t,
                    reason: "pole slip".into(),
                });
            }
        }
    }
    let series = MultiSeries::new(
        1.0 / cfg.sample_dt,
        CHANNELS.iter().map(|s| s.to_string()).collect(),
        cols.into_iter().collect(),
    )?;
    Ok(Trajectory { series, states })
}

/// Fault scheduling for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub telegraph: TelegraphParams,
    pub base: FaultParams,
    /// Relative spread of the impedance redrawn at each fault onset; 0 keeps `base`.
    pub impedance_scale: f64,
}

impl FaultSchedule {
    pub fn fixed(telegraph: TelegraphParams, base: FaultParams) -> Self {
        Self {
            telegraph,
            base,
            impedance_scale: 0.0,
        }
    }
}

pub fn simulate<R: rand::Rng + ?Sized>(
    cfg: &PlantConfig,
    schedule: &FaultSchedule,
    duration: f64,
    rng: &mut R,
) -> Result<MultiSeries> {
    simulate_detailed(cfg, schedule, duration, rng).map(|t| t.series)
}

/// Runs the plant from its steady state for `duration` seconds. The fault
/// state is sampled once per `sample_dt`, starting clear at `t = 0`.
pub fn simulate_detailed<R: rand::Rng + ?Sized>(
    cfg: &PlantConfig,
    schedule: &FaultSchedule,
    duration: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration}")));
    }
    schedule.telegraph.validate()?;
    schedule.base.validate()?;
    let initial = solve_steady_state(cfg)?;
    let n = (duration / cfg.sample_dt).round().max(1.0) as usize;
    let mut tele = TelegraphState::clear();
    let mut active: Option<FaultParams> = None;
    let mut failure = None;
    let traj = integrate(cfg, initial, n, |k| {
        if k > 0 {
            match faults::step(&schedule.telegraph, &tele, cfg.sample_dt, rng) {
                Ok(s) => tele = s,
                Err(e) => failure = Some(e),
            }
        }
        active = match (tele.is_fault(), active) {
            (false, _) => None,
            (true, Some(f)) => Some(f),
            (true, None) => Some(faults::sample_fault_params(
                &schedule.base,
                schedule.impedance_scale,
                rng,
            )),
        };
        active
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(traj),
    }
}

/// Redraws H, D and all reactances from `N(v, scale * v)` until the result is
/// valid and has an operating point.
pub fn randomize_plant<R: rand::Rng + ?Sized>(
    cfg: &PlantConfig,
    scale: f64,
    rng: &mut R,
) -> Result<PlantConfig> {
    const MAX_ATTEMPTS: usize = 100;
    if scale == 0.0 {
        return Ok(cfg.clone());
    }
    let mut draw = |v: f64| {
        let z: f64 = rng.sample(StandardNormal);
        v + scale * v.abs() * z
    };
    for _ in 0..MAX_ATTEMPTS {
        let candidate = PlantConfig {
            inertia_h: draw(cfg.inertia_h),
            damping_d: draw(cfg.damping_d),
            transient_reactance_xd: draw(cfg.transient_reactance_xd),
            transformer_reactance_xt: draw(cfg.transformer_reactance_xt),
            line_reactances: [draw(cfg.line_reactances[0]), draw(cfg.line_reactances[1])],
            ..cfg.clone()
        };
        if candidate.validate().is_ok() && solve_steady_state(&candidate).is_ok() {
            return Ok(candidate);
        }
    }
    Err(Error::RandomizationFailed {
        attempts: MAX_ATTEMPTS,
    })
}

/// Whether the plant rides through `fault` held continuously for `hold` seconds.
pub fn survives_fault(cfg: &PlantConfig, fault: &FaultParams, hold: f64) -> Result<bool> {
    let initial = solve_steady_state(cfg)?;
    let n = (hold / cfg.sample_dt).round() as usize + 1;
    match integrate(cfg, initial, n, |_| Some(*fault)) {
        Ok(_) => Ok(true),
        Err(Error::SimulationDiverged { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Candidate reactances scanned by [`calibrate_fault_reactance`].
pub const REACTANCE_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Most severe (smallest) reactance on [`REACTANCE_GRID`] the plant survives
/// for a 5 s continuous fault with the given resistance.
pub fn calibrate_fault_reactance(cfg: &PlantConfig, resistance: f64) -> Result<Option<f64>> {
    for x in REACTANCE_GRID {
        if survives_fault(cfg, &FaultParams::new(resistance, x)?, 5.0)? {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

/// Smallest resistance in `candidates` surviving a 5 s fault at `reactance`.
pub fn survivability_threshold(cfg: &PlantConfig, reactance: f64, candidates: &[f64]) -> Result<Option<f64>> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    for r in sorted {
        if survives_fault(cfg, &FaultParams::new(r, reactance)?, 5.0)? {
            return Ok(Some(r));
        }
    }
    Ok(None)
}
