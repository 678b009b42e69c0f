//! Experiment configuration as flat `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, unknown
//! or repeated keys are errors, and [`ExperimentConfig::to_text`] emits every
//! key so parse and serialize are inverse.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Direction;
use crate::error::{Error, Result};
use crate::faults::TelegraphParams;
use crate::lstm::{Architecture, TrainConfig};
use crate::plant::PlantConfig;
use crate::var::Criterion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Regular,
    Randomized,
    HighOrderNoise,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Regular, Regime::Randomized, Regime::HighOrderNoise];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Regular => "regular",
            Regime::Randomized => "randomized",
            Regime::HighOrderNoise => "high-order-noise",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Regime::Regular),
            "randomized" => Ok(Regime::Randomized),
            "high-order-noise" | "high_order_noise" => Ok(Regime::HighOrderNoise),
            _ => Err(Error::Config(format!(
                "unknown regime `{s}` (expected regular, randomized or high-order-noise)"
            ))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Var,
    WdLstm,
    FtWdLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Var, ModelKind::WdLstm, ModelKind::FtWdLstm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Var => "var",
            ModelKind::WdLstm => "wd-lstm",
            ModelKind::FtWdLstm => "ft-wd-lstm",
        }
    }

    pub fn is_lstm(self) -> bool {
        self != ModelKind::Var
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "var" => Ok(ModelKind::Var),
            "wd-lstm" | "wd_lstm" => Ok(ModelKind::WdLstm),
            "ft-wd-lstm" | "ft_wd_lstm" => Ok(ModelKind::FtWdLstm),
            _ => Err(Error::Config(format!(
                "unknown model `{s}` (expected var, wd-lstm or ft-wd-lstm)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::PqToVphi => "pq-to-vphi",
        Direction::VphiToPq => "vphi-to-pq",
    }
}

fn parse_direction(s: &str) -> Result<Direction> {
    match s {
        "pq-to-vphi" | "pq_to_vphi" => Ok(Direction::PqToVphi),
        "vphi-to-pq" | "vphi_to_pq" => Ok(Direction::VphiToPq),
        _ => Err(Error::Config(format!("unknown direction `{s}`"))),
    }
}

fn criterion_from(s: &str) -> Result<Criterion> {
    Criterion::ALL
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSettings {
    pub resistance: f64,
    /// `None` calibrates the most severe survivable reactance.
    pub reactance: Option<f64>,
    /// Relative spread of per-onset impedance draws in the randomized regime.
    pub impedance_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub train_trajectories: usize,
    pub finetune_trajectories: usize,
    pub test_trajectories: usize,
    pub duration: f64,
    pub standardize: bool,
    pub write_datasets: bool,
    /// Fresh draws allowed per trajectory when a simulation diverges.
    pub max_redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSettings {
    /// `None` selects the order by `criterion` over `1..=p_max`.
    pub order: Option<usize>,
    pub p_max: usize,
    pub criterion: Criterion,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSettings {
    pub enabled: bool,
    pub max_lag: usize,
    pub zero_threshold: f64,
    pub decay_epsilon: f64,
    /// Training trajectories pooled for the lag heat maps.
    pub trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub regime: Regime,
    pub model: ModelKind,
    pub plant: PlantConfig,
    pub telegraph: TelegraphParams,
    pub fault: FaultSettings,
    pub randomize_scale: f64,
    pub high_order_factor: f64,
    pub data: DataSettings,
    pub var: VarSettings,
    pub lstm_arch: Architecture,
    pub lstm_direction: Direction,
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    pub diagnostics: DiagnosticSettings,
    pub sweep_resistances: Vec<f64>,
    pub sweep_trajectories: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            regime: Regime::Regular,
            model: ModelKind::WdLstm,
            plant: PlantConfig::default(),
            telegraph: TelegraphParams::standard(),
            fault: FaultSettings {
                resistance: 0.01,
                reactance: None,
                impedance_scale: 0.1,
            },
            randomize_scale: 0.1,
            high_order_factor: 1000.0,
            data: DataSettings {
                train_trajectories: 200,
                finetune_trajectories: 200,
                test_trajectories: 200,
                duration: 60.0,
                standardize: true,
                write_datasets: true,
                max_redraws: 20,
            },
            var: VarSettings {
                order: None,
                p_max: 12,
                criterion: Criterion::Aic,
                direction: Direction::PqToVphi,
            },
            lstm_arch: Architecture {
                hidden_dim: 32,
                ..Architecture::default()
            },
            lstm_direction: Direction::VphiToPq,
            train: TrainConfig {
                epochs: 60,
                fine_tune_lr_scale: 1.0,
                ..TrainConfig::default()
            },
            finetune_epochs: 60,
            diagnostics: DiagnosticSettings {
                enabled: true,
                max_lag: 20,
                zero_threshold: crate::var::DEFAULT_ZERO_THRESHOLD,
                decay_epsilon: crate::var::DEFAULT_DECAY_EPSILON,
                trajectories: 20,
            },
            sweep_resistances: vec![10.0, 1.0, 0.1, 0.01],
            sweep_trajectories: 20,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn auto_or<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl ExperimentConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.plant;
        let t = &self.train;
        let d = &self.data;
        let g = &self.diagnostics;
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("regime", self.regime.name().into()),
            ("model", self.model.name().into()),
            ("plant.inertia_h", p.inertia_h.to_string()),
            ("plant.damping_d", p.damping_d.to_string()),
            ("plant.transient_reactance_xd", p.transient_reactance_xd.to_string()),
            ("plant.transformer_reactance_xt", p.transformer_reactance_xt.to_string()),
            ("plant.line_reactance_1", p.line_reactances[0].to_string()),
            ("plant.line_reactance_2", p.line_reactances[1].to_string()),
            ("plant.infinite_bus_voltage", p.infinite_bus_voltage.to_string()),
            ("plant.mechanical_power", p.mechanical_power.to_string()),
            ("plant.internal_emf", p.internal_emf.to_string()),
            ("plant.base_frequency", p.base_frequency.to_string()),
            ("plant.fine_dt", p.fine_dt.to_string()),
            ("plant.sample_dt", p.sample_dt.to_string()),
            ("telegraph.onset_rate", self.telegraph.onset_rate.to_string()),
            ("telegraph.clear_rate", self.telegraph.clear_rate.to_string()),
            ("fault.resistance", self.fault.resistance.to_string()),
            ("fault.reactance", show_opt(&self.fault.reactance)),
            ("fault.impedance_scale", self.fault.impedance_scale.to_string()),
            ("randomize.plant_scale", self.randomize_scale.to_string()),
            ("high_order_noise.resistance_factor", self.high_order_factor.to_string()),
            ("data.train_trajectories", d.train_trajectories.to_string()),
            ("data.finetune_trajectories", d.finetune_trajectories.to_string()),
            ("data.test_trajectories", d.test_trajectories.to_string()),
            ("data.duration", d.duration.to_string()),
            ("data.standardize", d.standardize.to_string()),
            ("data.write_datasets", d.write_datasets.to_string()),
            ("data.max_redraws", d.max_redraws.to_string()),
            ("var.order", show_opt(&self.var.order)),
            ("var.p_max", self.var.p_max.to_string()),
            ("var.criterion", self.var.criterion.name().into()),
            ("var.direction", direction_name(self.var.direction).into()),
            ("lstm.hidden_dim", self.lstm_arch.hidden_dim.to_string()),
            ("lstm.num_layers", self.lstm_arch.num_layers.to_string()),
            ("lstm.direction", direction_name(self.lstm_direction).into()),
            ("train.weight_drop_prob", t.weight_drop_prob.to_string()),
            ("train.output_dropout_prob", t.output_dropout_prob.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.base_window_len", t.base_window_len.to_string()),
            ("train.window_len_jitter", t.window_len_jitter.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.grad_clip_norm", t.grad_clip_norm.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.cosine_schedule", t.cosine_schedule.to_string()),
            ("train.keep_best", t.keep_best.to_string()),
            ("finetune.lr_scale", t.fine_tune_lr_scale.to_string()),
            ("finetune.epochs", self.finetune_epochs.to_string()),
            ("diagnostics.enabled", g.enabled.to_string()),
            ("diagnostics.max_lag", g.max_lag.to_string()),
            ("diagnostics.zero_threshold", g.zero_threshold.to_string()),
            ("diagnostics.decay_epsilon", g.decay_epsilon.to_string()),
            ("diagnostics.trajectories", g.trajectories.to_string()),
            (
                "sweep.resistances",
                self.sweep_resistances
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("sweep.trajectories", self.sweep_trajectories.to_string()),
        ]
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.plant;
        let t = &mut self.train;
        let d = &mut self.data;
        let g = &mut self.diagnostics;
        match key {
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "regime" => self.regime = v.parse()?,
            "model" => self.model = v.parse()?,
            "plant.inertia_h" => p.inertia_h = num(key, v)?,
            "plant.damping_d" => p.damping_d = num(key, v)?,
            "plant.transient_reactance_xd" => p.transient_reactance_xd = num(key, v)?,
            "plant.transformer_reactance_xt" => p.transformer_reactance_xt = num(key, v)?,
            "plant.line_reactance_1" => p.line_reactances[0] = num(key, v)?,
            "plant.line_reactance_2" => p.line_reactances[1] = num(key, v)?,
            "plant.infinite_bus_voltage" => p.infinite_bus_voltage = num(key, v)?,
            "plant.mechanical_power" => p.mechanical_power = num(key, v)?,
            "plant.internal_emf" => p.internal_emf = num(key, v)?,
            "plant.base_frequency" => p.base_frequency = num(key, v)?,
            "plant.fine_dt" => p.fine_dt = num(key, v)?,
            "plant.sample_dt" => p.sample_dt = num(key, v)?,
            "telegraph.onset_rate" => self.telegraph.onset_rate = num(key, v)?,
            "telegraph.clear_rate" => self.telegraph.clear_rate = num(key, v)?,
            "fault.resistance" => self.fault.resistance = num(key, v)?,
            "fault.reactance" => self.fault.reactance = auto_or(key, v)?,
            "fault.impedance_scale" => self.fault.impedance_scale = num(key, v)?,
            "randomize.plant_scale" => self.randomize_scale = num(key, v)?,
            "high_order_noise.resistance_factor" => self.high_order_factor = num(key, v)?,
            "data.train_trajectories" => d.train_trajectories = num(key, v)?,
            "data.finetune_trajectories" => d.finetune_trajectories = num(key, v)?,
            "data.test_trajectories" => d.test_trajectories = num(key, v)?,
            "data.duration" => d.duration = num(key, v)?,
            "data.standardize" => d.standardize = boolean(key, v)?,
            "data.write_datasets" => d.write_datasets = boolean(key, v)?,
            "data.max_redraws" => d.max_redraws = num(key, v)?,
            "var.order" => self.var.order = auto_or(key, v)?,
            "var.p_max" => self.var.p_max = num(key, v)?,
            "var.criterion" => self.var.criterion = criterion_from(v)?,
            "var.direction" => self.var.direction = parse_direction(v)?,
            "lstm.hidden_dim" => self.lstm_arch.hidden_dim = num(key, v)?,
            "lstm.num_layers" => self.lstm_arch.num_layers = num(key, v)?,
            "lstm.direction" => self.lstm_direction = parse_direction(v)?,
            "train.weight_drop_prob" => t.weight_drop_prob = num(key, v)?,
            "train.output_dropout_prob" => t.output_dropout_prob = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.base_window_len" => t.base_window_len = num(key, v)?,
            "train.window_len_jitter" => t.window_len_jitter = num(key, v)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.grad_clip_norm" => t.grad_clip_norm = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.cosine_schedule" => t.cosine_schedule = boolean(key, v)?,
            "train.keep_best" => t.keep_best = boolean(key, v)?,
            "finetune.lr_scale" => t.fine_tune_lr_scale = num(key, v)?,
            "finetune.epochs" => self.finetune_epochs = num(key, v)?,
            "diagnostics.enabled" => g.enabled = boolean(key, v)?,
            "diagnostics.max_lag" => g.max_lag = num(key, v)?,
            "diagnostics.zero_threshold" => g.zero_threshold = num(key, v)?,
            "diagnostics.decay_epsilon" => g.decay_epsilon = num(key, v)?,
            "diagnostics.trajectories" => g.trajectories = num(key, v)?,
            "sweep.resistances" => {
                self.sweep_resistances = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "sweep.trajectories" => self.sweep_trajectories = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Checks every field before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(strip(e));
        self.plant.validate().map_err(cfg_err)?;
        self.telegraph.validate().map_err(cfg_err)?;
        self.lstm_arch.validate().map_err(cfg_err)?;
        TrainConfig {
            epochs: self.train.epochs.max(1),
            ..self.train
        }
        .validate()
        .map_err(cfg_err)?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.fault.resistance >= 0.0 && self.fault.resistance.is_finite()) {
            return bad(format!("fault.resistance must be >= 0, got {}", self.fault.resistance));
        }
        if let Some(x) = self.fault.reactance {
            if !(x >= 0.0 && x.is_finite()) || (x == 0.0 && self.fault.resistance == 0.0) {
                return bad(format!("fault.reactance must be >= 0 and not zero with zero resistance, got {x}"));
            }
        }
        for (k, v) in [
            ("fault.impedance_scale", self.fault.impedance_scale),
            ("randomize.plant_scale", self.randomize_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be >= 0, got {v}"));
            }
        }
        if !(self.high_order_factor >= 1.0) {
            return bad(format!(
                "high_order_noise.resistance_factor must be >= 1, got {}",
                self.high_order_factor
            ));
        }
        let d = &self.data;
        if d.train_trajectories == 0 || d.test_trajectories == 0 || d.finetune_trajectories == 0 {
            return bad("trajectory counts must be positive".into());
        }
        if !(d.duration > 0.0 && d.duration.is_finite()) {
            return bad(format!("data.duration must be positive, got {}", d.duration));
        }
        if self.var.p_max == 0 || self.var.order == Some(0) {
            return bad("VAR orders must be at least 1".into());
        }
        if self.diagnostics.max_lag == 0 || self.diagnostics.trajectories == 0 {
            return bad("diagnostics.max_lag and diagnostics.trajectories must be positive".into());
        }
        if self.sweep_resistances.is_empty() || self.sweep_resistances.iter().any(|r| !(*r >= 0.0)) {
            return bad("sweep.resistances must be a nonempty list of values >= 0".into());
        }
        if self.sweep_trajectories == 0 {
            return bad("sweep.trajectories must be positive".into());
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}
