//! End-to-end runs: data generation, fitting, evaluation, diagnostics and a
//! manifest of everything written.
//!
//! Training sets, test sets and models are built lazily by a [`Session`] and
//! cached, so several (model, regime) evaluations can share one training run.
//! Every random draw comes from a stream keyed by the config seed and a tag
//! naming the artifact, so results do not depend on evaluation order.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::config::{ExperimentConfig, ModelKind, Regime};
use crate::dataset::{self, Dataset, Direction, Role, SampleSet};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, RegimeGrid};
use crate::faults::FaultParams;
use crate::lstm::{LstmEmulator, TrainConfig, TrainReport};
use crate::plant::{self, FaultSchedule, PlantConfig};
use crate::rng;
use crate::series::MultiSeries;
use crate::var::{self, VarxModel};

/// Process exit code for an error: 2 config, 3 simulation, 4 fit/training, 1 other.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::SimulationDiverged { .. } | Error::NoEquilibrium { .. } | Error::RandomizationFailed { .. } => 3,
        Error::SingularDesign(_)
        | Error::Identifiability(_)
        | Error::InsufficientHistory { .. }
        | Error::UndefinedCriterion(_)
        | Error::NoValidOrder
        | Error::ForecastDiverged { .. }
        | Error::DiagnosticFailed(_)
        | Error::TrainingDiverged { .. }
        | Error::DegenerateChannel(_)
        | Error::ZeroVariance
        | Error::UndefinedNormalization
        | Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

/// Git blob hash (`sha1("blob <len>\0" + content)`) as lowercase hex.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Which generated trajectory set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetKind {
    /// Nominal plant, fixed base fault.
    RegularTrain,
    /// Randomized plants and fault impedances; fine-tuning data.
    RandomizedTrain,
    Test(Regime),
}

impl SetKind {
    pub fn name(self) -> String {
        match self {
            SetKind::RegularTrain => "train-regular".into(),
            SetKind::RandomizedTrain => "train-randomized".into(),
            SetKind::Test(r) => format!("test-{}", r.name()),
        }
    }
}

/// Simulated trajectories (all plant channels) and how they were drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub kind: SetKind,
    pub trajectories: Vec<MultiSeries>,
    pub base_fault: FaultParams,
    /// Diverged simulations replaced by fresh draws.
    pub redraws: usize,
    pub plants: Vec<PlantConfig>,
}

impl GeneratedSet {
    pub fn sample_set(&self, direction: Direction, role: Role) -> Result<SampleSet> {
        let ds = self
            .trajectories
            .iter()
            .map(|s| Dataset::from_series(s, direction))
            .collect::<Result<Vec<_>>>()?;
        SampleSet::new(ds, role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SetSummary {
    name: String,
    trajectories: usize,
    duration: f64,
    sample_rate: f64,
    fault_resistance: f64,
    fault_reactance: f64,
    impedance_scale: f64,
    plant_scale: f64,
    redraws: usize,
    fault_occupancy: f64,
}

/// Per-trajectory NRMSE (percent) of one evaluated (model, regime) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub values: Vec<f64>,
}

impl Evaluation {
    fn from_fractions(model: ModelKind, regime: Regime, seed: u64, fractions: &[f64]) -> Result<Self> {
        let values: Vec<f64> = fractions.iter().map(|v| 100.0 * v).collect();
        let summary = eval::summarize(&values)?;
        Ok(Self {
            metrics: MetricsReport::new(model.name(), regime.name(), &summary, seed),
            values,
        })
    }
}

/// Cache of generated data and trained models for one config.
pub struct Session {
    pub cfg: ExperimentConfig,
    reactance: Option<f64>,
    low_resistance: Option<f64>,
    sets: HashMap<SetKind, GeneratedSet>,
    var_models: HashMap<Regime, VarxModel>,
    lstm_base: Option<(LstmEmulator, TrainReport)>,
    lstm_ft: Option<(LstmEmulator, TrainReport)>,
}

impl Session {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            reactance: None,
            low_resistance: None,
            sets: HashMap::new(),
            var_models: HashMap::new(),
            lstm_base: None,
            lstm_ft: None,
        })
    }

    /// Base fault reactance: configured, or the most severe survivable one.
    pub fn fault_reactance(&mut self) -> Result<f64> {
        if let Some(x) = self.cfg.fault.reactance.or(self.reactance) {
            return Ok(x);
        }
        let x = plant::calibrate_fault_reactance(&self.cfg.plant, self.cfg.fault.resistance)?.ok_or_else(|| {
            Error::SimulationDiverged {
                time: 0.0,
                reason: format!(
                    "no reactance on the calibration grid survives a fault of resistance {}",
                    self.cfg.fault.resistance
                ),
            }
        })?;
        self.reactance = Some(x);
        Ok(x)
    }

    /// Test resistance of the high-order-noise regime: the base resistance
    /// divided by the configured factor, raised to the smallest survivable
    /// decade if the plant cannot ride through it.
    pub fn low_resistance(&mut self) -> Result<f64> {
        if let Some(r) = self.low_resistance {
            return Ok(r);
        }
        let x = self.fault_reactance()?;
        let base = self.cfg.fault.resistance;
        let target = base / self.cfg.high_order_factor;
        let mut candidates = vec![target];
        let mut r = target * 10.0;
        while r < base {
            candidates.push(r);
            r *= 10.0;
        }
        candidates.push(base);
        let r = plant::survivability_threshold(&self.cfg.plant, x, &candidates)?.unwrap_or(base);
        self.low_resistance = Some(r);
        Ok(r)
    }

    fn set_params(&mut self, kind: SetKind) -> Result<(usize, FaultParams, f64, f64)> {
        let x = self.fault_reactance()?;
        let c = &self.cfg;
        let base = FaultParams::new(c.fault.resistance, x)?;
        Ok(match kind {
            SetKind::RegularTrain => (c.data.train_trajectories, base, 0.0, 0.0),
            SetKind::RandomizedTrain => (
                c.data.finetune_trajectories,
                base,
                c.fault.impedance_scale,
                c.randomize_scale,
            ),
            SetKind::Test(Regime::Regular) => (c.data.test_trajectories, base, 0.0, 0.0),
            SetKind::Test(Regime::Randomized) => (
                c.data.test_trajectories,
                base,
                c.fault.impedance_scale,
                c.randomize_scale,
            ),
            SetKind::Test(Regime::HighOrderNoise) => {
                let n = c.data.test_trajectories;
                let r = self.low_resistance()?;
                (n, FaultParams::new(r, x)?, 0.0, 0.0)
            }
        })
    }

    /// Generates (or returns the cached) trajectory set.
    pub fn set(&mut self, kind: SetKind) -> Result<&GeneratedSet> {
        if !self.sets.contains_key(&kind) {
            let (n, fault, imp_scale, plant_scale) = self.set_params(kind)?;
            let set = generate_set(&self.cfg, kind, n, fault, imp_scale, plant_scale)?;
            self.sets.insert(kind, set);
        }
        Ok(&self.sets[&kind])
    }

    /// Training set the VAR of a regime is fitted on. Outside the regular
    /// regime it sees the randomized data, as the fine-tuned LSTM does.
    fn var_train_kind(regime: Regime) -> SetKind {
        match regime {
            Regime::Regular => SetKind::RegularTrain,
            Regime::Randomized | Regime::HighOrderNoise => SetKind::RandomizedTrain,
        }
    }

    pub fn var_model(&mut self, regime: Regime) -> Result<&VarxModel> {
        if !self.var_models.contains_key(&regime) {
            let dir = self.cfg.var.direction;
            let train = self
                .set(Self::var_train_kind(regime))?
                .sample_set(dir, Role::Train)?
                .differenced()?;
            let order = match self.cfg.var.order {
                Some(p) => p,
                None => var::select_order_ic(&train, self.cfg.var.p_max, self.cfg.var.criterion)?,
            };
            let model = var::fit(&train, order)?;
            self.var_models.insert(regime, model);
        }
        Ok(&self.var_models[&regime])
    }

    fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            seed: self.cfg.seed,
            ..self.cfg.train
        }
    }

    /// WD-LSTM trained on nominal data.
    pub fn lstm_base(&mut self) -> Result<&(LstmEmulator, TrainReport)> {
        if self.lstm_base.is_none() {
            let dir = self.cfg.lstm_direction;
            let train = self.set(SetKind::RegularTrain)?.sample_set(dir, Role::Train)?;
            let arch = crate::lstm::Architecture {
                input_dim: train.input_dim(),
                output_dim: train.output_dim(),
                ..self.cfg.lstm_arch
            };
            let fitted = LstmEmulator::fit(&train, None, arch, &self.train_cfg(), self.cfg.data.standardize)?;
            self.lstm_base = Some(fitted);
        }
        Ok(self.lstm_base.as_ref().unwrap())
    }

    /// The base WD-LSTM fine-tuned on randomized data.
    pub fn lstm_ft(&mut self) -> Result<&(LstmEmulator, TrainReport)> {
        if self.lstm_ft.is_none() {
            let base = self.lstm_base()?.0.clone();
            let dir = self.cfg.lstm_direction;
            let data = self.set(SetKind::RandomizedTrain)?.sample_set(dir, Role::Train)?;
            let cfg = TrainConfig {
                epochs: self.cfg.finetune_epochs,
                ..self.train_cfg()
            };
            self.lstm_ft = Some(base.fine_tune(&data, None, &cfg)?);
        }
        Ok(self.lstm_ft.as_ref().unwrap())
    }

    /// Per-trajectory NRMSE of `model` on the test set of `regime`.
    pub fn evaluate(&mut self, model: ModelKind, regime: Regime) -> Result<Evaluation> {
        let values = match model {
            ModelKind::Var => {
                let m = self.var_model(regime)?.clone();
                let dir = self.cfg.var.direction;
                let test = self.set(SetKind::Test(regime))?.sample_set(dir, Role::Test)?;
                var_nrmse(&m, &test)?
            }
            ModelKind::WdLstm | ModelKind::FtWdLstm => {
                let em = if model == ModelKind::WdLstm {
                    self.lstm_base()?.0.clone()
                } else {
                    self.lstm_ft()?.0.clone()
                };
                let dir = self.cfg.lstm_direction;
                let test = self.set(SetKind::Test(regime))?.sample_set(dir, Role::Test)?;
                lstm_nrmse(&em, &test)?
            }
        };
        Evaluation::from_fractions(model, regime, self.cfg.seed, &values)
    }
}

fn generate_set(
    cfg: &ExperimentConfig,
    kind: SetKind,
    n: usize,
    fault: FaultParams,
    impedance_scale: f64,
    plant_scale: f64,
) -> Result<GeneratedSet> {
    let tag = kind.name();
    let schedule = FaultSchedule {
        telegraph: cfg.telegraph,
        base: fault,
        impedance_scale,
    };
    let mut trajectories = Vec::with_capacity(n);
    let mut plants = Vec::with_capacity(n);
    let mut redraws = 0;
    for k in 0..n {
        let mut last = None;
        for attempt in 0..=cfg.data.max_redraws {
            let mut r = rng::stream(cfg.seed, &tag, ((k as u64) << 16) | attempt as u64);
            let p = plant::randomize_plant(&cfg.plant, plant_scale, &mut r)?;
            match plant::simulate(&p, &schedule, cfg.data.duration, &mut r) {
                Ok(s) => {
                    trajectories.push(s);
                    plants.push(p);
                    last = None;
                    break;
                }
                Err(e @ Error::SimulationDiverged { .. }) => {
                    redraws += 1;
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = last {
            return Err(e);
        }
    }
    Ok(GeneratedSet {
        kind,
        trajectories,
        base_fault: fault,
        redraws,
        plants,
    })
}

/// NRMSE of a first-difference VAR run as an emulator in original units.
fn var_nrmse(model: &VarxModel, test: &SampleSet) -> Result<Vec<f64>> {
    let warmup = model.order;
    test.iter()
        .enumerate()
        .map(|(k, raw)| {
            let pred = model.emulate_levels(raw, warmup)?;
            let truth = raw.outputs.slice(warmup + 1, raw.len())?;
            let v = eval::nrmse(&truth, &pred)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::ForecastDiverged { trajectory: k })
            }
        })
        .collect()
}

fn lstm_nrmse(em: &LstmEmulator, test: &SampleSet) -> Result<Vec<f64>> {
    test.iter()
        .map(|raw| eval::nrmse(&raw.outputs, &em.predict(raw)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub git_sha1: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one command: config snapshot, emitted files with content
/// hashes, stage timings and versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    pub stages: Vec<StageTime>,
    pub versions: BTreeMap<String, String>,
    pub complete: bool,
    pub error: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Writes files under the output directory and records them.
struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Config(format!("cannot create {}: {e}", cfg.out.display())))?;
        let versions = BTreeMap::from([
            ("busemu".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("manifest".to_string(), "1".to_string()),
        ]);
        Ok(Self {
            out: cfg.out.clone(),
            manifest: RunManifest {
                command: command.into(),
                config: cfg.to_text(),
                seed: cfg.seed,
                files: Vec::new(),
                stages: Vec::new(),
                versions,
                complete: false,
                error: None,
            },
        })
    }

    fn write(&mut self, rel: &str, content: &[u8]) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        self.manifest.files.retain(|f| f.path != rel);
        self.manifest.files.push(FileEntry {
            path: rel.to_string(),
            git_sha1: git_blob_hash(content),
            bytes: content.len(),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let clock = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(name));
        self.manifest.stages.push(StageTime {
            stage: name.into(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        out
    }

    /// Writes the manifest, marked incomplete with the error if `result` failed.
    fn finish<T>(mut self, result: Result<T>) -> Result<(RunManifest, T)> {
        match &result {
            Ok(_) => self.manifest.complete = true,
            Err(e) => self.manifest.error = Some(e.to_string()),
        }
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        let path = self.out.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        result.map(|v| (self.manifest, v))
    }
}

fn needed_sets(model: ModelKind, regime: Regime) -> Vec<SetKind> {
    let mut v = match model {
        ModelKind::Var => vec![Session::var_train_kind(regime)],
        ModelKind::WdLstm => vec![SetKind::RegularTrain],
        ModelKind::FtWdLstm => vec![SetKind::RegularTrain, SetKind::RandomizedTrain],
    };
    v.push(SetKind::Test(regime));
    v
}

fn write_sets(run: &mut Run, session: &mut Session, kinds: &[SetKind]) -> Result<()> {
    let mut summaries = Vec::new();
    for &kind in kinds {
        let cfg = session.cfg.clone();
        let set = session.set(kind)?.clone();
        let (_, fault, imp, plant_scale) = session.set_params(kind)?;
        let fault_col = plant::CHANNELS.len() - 1;
        let occupancy = set
            .trajectories
            .iter()
            .flat_map(|s| s.channel_at(fault_col).iter())
            .sum::<f64>()
            / set.trajectories.iter().map(MultiSeries::len).sum::<usize>() as f64;
        summaries.push(SetSummary {
            name: kind.name(),
            trajectories: set.trajectories.len(),
            duration: cfg.data.duration,
            sample_rate: 1.0 / cfg.plant.sample_dt,
            fault_resistance: fault.resistance,
            fault_reactance: fault.reactance,
            impedance_scale: imp,
            plant_scale,
            redraws: set.redraws,
            fault_occupancy: occupancy,
        });
        if cfg.data.write_datasets {
            for (k, s) in set.trajectories.iter().enumerate() {
                run.write(&format!("data/{}/traj_{k:04}.csv", kind.name()), dataset::to_csv(s).as_bytes())?;
            }
        }
    }
    run.json("data/manifest.json", &summaries)
}

fn write_model(run: &mut Run, session: &mut Session, model: ModelKind, regime: Regime) -> Result<()> {
    match model {
        ModelKind::Var => {
            let m = session.var_model(regime)?.clone();
            run.write("model/var.json", (m.to_json()? + "\n").as_bytes())
        }
        ModelKind::WdLstm | ModelKind::FtWdLstm => {
            let cfg = session.train_cfg();
            let (base, report) = session.lstm_base()?.clone();
            let mut buf = Vec::new();
            crate::lstm::write_checkpoint(&base.model, Some(&cfg), base.standardizer.as_ref(), &mut buf)?;
            run.write("model/wd-lstm.ckpt", &buf)?;
            run.json("model/wd-lstm-train.json", &report)?;
            if model == ModelKind::FtWdLstm {
                let (ft, report) = session.lstm_ft()?.clone();
                let ft_cfg = TrainConfig {
                    epochs: session.cfg.finetune_epochs,
                    ..cfg
                };
                let mut buf = Vec::new();
                crate::lstm::write_checkpoint(&ft.model, Some(&ft_cfg), ft.standardizer.as_ref(), &mut buf)?;
                run.write("model/ft-wd-lstm.ckpt", &buf)?;
                run.json("model/ft-wd-lstm-train.json", &report)?;
            }
            Ok(())
        }
    }
}

fn write_evaluation(run: &mut Run, ev: &Evaluation) -> Result<()> {
    run.json(METRICS_FILE, &ev.metrics)?;
    let mut csv = String::from("trajectory,nrmse\n");
    for (k, v) in ev.values.iter().enumerate() {
        csv.push_str(&format!("{k},{v}\n"));
    }
    run.write("nrmse.csv", csv.as_bytes())
}

/// Diagnostics computed on first-differenced nominal training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub lags: Vec<var::LagDiagnostic>,
    pub curve: Vec<Option<var::OrderScore>>,
    pub decay: Vec<f64>,
}

pub fn compute_diagnostics(session: &mut Session) -> Result<Diagnostics> {
    let cfg = session.cfg.clone();
    let set = session.set(SetKind::RegularTrain)?;
    let take = cfg.diagnostics.trajectories.min(set.trajectories.len());
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for s in &set.trajectories[..take] {
        let (inc, _) = dataset::difference(s)?;
        for (c, label) in plant::CHANNELS[..4].iter().enumerate() {
            pooled[c].extend_from_slice(inc.channel(label)?);
        }
    }
    let mut lags = Vec::new();
    for a in 0..4 {
        for b in a + 1..4 {
            lags.push(var::lag_diagnostic(
                (plant::CHANNELS[a], &pooled[a]),
                (plant::CHANNELS[b], &pooled[b]),
                cfg.diagnostics.max_lag,
                cfg.diagnostics.zero_threshold,
            )?);
        }
    }
    let train = set
        .sample_set(cfg.var.direction, Role::Train)?
        .differenced()?;
    let curve = var::criterion_curve(&train, cfg.var.p_max);
    let decay = if cfg.var.p_max >= 2 {
        var::fit(&train, cfg.var.p_max)?.decay_series()
    } else {
        Vec::new()
    };
    Ok(Diagnostics { lags, curve, decay })
}

fn write_diagnostics(run: &mut Run, d: &Diagnostics) -> Result<()> {
    let mut summary = String::from("a,b,detected_lag,regularized\n");
    for l in &d.lags {
        run.write(&format!("diagnostics/lag_{}_{}.csv", l.labels.0, l.labels.1), l.to_csv().as_bytes())?;
        summary.push_str(&format!("{},{},{},{}\n", l.labels.0, l.labels.1, l.detected_lag, l.regularized));
    }
    run.write("diagnostics/lag_summary.csv", summary.as_bytes())?;
    let mut curve = String::from("order,aic,bic,fpe,hqic\n");
    for (i, s) in d.curve.iter().enumerate() {
        match s {
            Some(s) => curve.push_str(&format!("{},{},{},{},{}\n", s.order, s.aic, s.bic, s.fpe, s.hqic)),
            None => curve.push_str(&format!("{},failed,failed,failed,failed\n", i + 1)),
        }
    }
    run.write("diagnostics/criteria.csv", curve.as_bytes())?;
    let mut decay = String::from("lag,frobenius_step\n");
    for (i, v) in d.decay.iter().enumerate() {
        decay.push_str(&format!("{},{v}\n", i + 2));
    }
    run.write("diagnostics/decay.csv", decay.as_bytes())
}

/// Outputs of a full experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub manifest: RunManifest,
    pub evaluation: Evaluation,
}

/// Generate, fit, evaluate and (optionally) diagnose for the configured
/// model and regime; writes everything under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut session = Session::new(cfg.clone())?;
    let mut run = Run::new(cfg, "experiment")?;
    let (model, regime) = (cfg.model, cfg.regime);
    let result = (|| {
        run.stage("generate", |r| write_sets(r, &mut session, &needed_sets(model, regime)))?;
        run.stage("fit", |r| write_model(r, &mut session, model, regime))?;
        let ev = run.stage("evaluate", |r| {
            let ev = session.evaluate(model, regime)?;
            write_evaluation(r, &ev)?;
            Ok(ev)
        })?;
        if cfg.diagnostics.enabled {
            run.stage("diagnose", |r| write_diagnostics(r, &compute_diagnostics(&mut session)?))?;
        }
        Ok(ev)
    })();
    let (manifest, evaluation) = run.finish(result)?;
    Ok(ExperimentOutput { manifest, evaluation })
}

/// Writes the datasets the configured model and regime need.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut session = Session::new(cfg.clone())?;
    let mut run = Run::new(cfg, "generate")?;
    let result = run.stage("generate", |r| {
        write_sets(r, &mut session, &needed_sets(cfg.model, cfg.regime))
    });
    run.finish(result).map(|(m, _)| m)
}

/// Fits the configured model and writes it.
pub fn run_fit(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut session = Session::new(cfg.clone())?;
    let mut run = Run::new(cfg, "fit")?;
    let result = run.stage("fit", |r| write_model(r, &mut session, cfg.model, cfg.regime));
    run.finish(result).map(|(m, _)| m)
}

/// Loads the model written by [`run_fit`] from `cfg.out` and evaluates it on
/// the regime's test set.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<(RunManifest, Evaluation)> {
    let mut session = Session::new(cfg.clone())?;
    let out = cfg.out.clone();
    let mut run = Run::new(cfg, "evaluate")?;
    let result = run.stage("evaluate", |r| {
        let ev = match cfg.model {
            ModelKind::Var => {
                let m = load_var(&out.join("model/var.json"))?;
                session.var_models.insert(cfg.regime, m);
                session.evaluate(cfg.model, cfg.regime)?
            }
            kind => {
                let name = if kind == ModelKind::WdLstm { "wd-lstm" } else { "ft-wd-lstm" };
                let labels = cfg.lstm_direction.output_labels().iter().map(|s| s.to_string()).collect();
                let em = LstmEmulator::load(out.join(format!("model/{name}.ckpt")), labels)?;
                let test = session
                    .set(SetKind::Test(cfg.regime))?
                    .sample_set(cfg.lstm_direction, Role::Test)?;
                Evaluation::from_fractions(kind, cfg.regime, cfg.seed, &lstm_nrmse(&em, &test)?)?
            }
        };
        write_evaluation(r, &ev)?;
        Ok(ev)
    });
    run.finish(result)
}

fn load_var(path: &Path) -> Result<VarxModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    VarxModel::from_json(&text)
}

pub fn run_diagnose(cfg: &ExperimentConfig) -> Result<(RunManifest, Diagnostics)> {
    let mut session = Session::new(cfg.clone())?;
    let mut run = Run::new(cfg, "diagnose")?;
    let result = run.stage("diagnose", |r| {
        let d = compute_diagnostics(&mut session)?;
        write_diagnostics(r, &d)?;
        Ok(d)
    });
    run.finish(result)
}

/// Mean test NRMSE of the configured model for each sweep resistance, in
/// the regular regime with the base fault resistance replaced. Cells whose
/// pipeline fails are recorded as failed rather than aborting the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<(RunManifest, RegimeGrid)> {
    cfg.validate()?;
    let mut run = Run::new(cfg, "sweep")?;
    let result = run.stage("sweep", |r| {
        let (grid, failures) = eval::regime_sweep(cfg.model.name(), &cfg.sweep_resistances, |res| {
            let mut c = cfg.clone();
            c.fault.resistance = res;
            c.regime = Regime::Regular;
            c.data.train_trajectories = cfg.sweep_trajectories;
            c.data.test_trajectories = cfg.sweep_trajectories;
            c.data.finetune_trajectories = cfg.sweep_trajectories;
            let mut s = Session::new(c)?;
            Ok(s.evaluate(cfg.model, Regime::Regular)?.metrics.mean)
        });
        r.write("sweep.csv", grid.to_csv().as_bytes())?;
        let notes: Vec<String> = failures.iter().map(|(res, e)| format!("{res}: {e}")).collect();
        r.json("sweep_failures.json", &notes)?;
        Ok(grid)
    });
    run.finish(result)
}
