//! End-to-end runs of the experiment pipeline on small configurations.

use std::path::Path;

use busemu::config::{ExperimentConfig, ModelKind, Regime};
use busemu::error::Error;
use busemu::eval::MetricsReport;
use busemu::experiment::{self, exit_code, git_blob_hash, RunManifest};

fn small(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed: 11,
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    c.data.train_trajectories = 6;
    c.data.finetune_trajectories = 6;
    c.data.test_trajectories = 4;
    c.var.p_max = 4;
    c.lstm_arch.hidden_dim = 6;
    c.lstm_arch.num_layers = 1;
    c.train.epochs = 2;
    c.finetune_epochs = 1;
    c.diagnostics.max_lag = 5;
    c.diagnostics.trajectories = 6;
    c.sweep_trajectories = 4;
    c
}

fn read_manifest(out: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn files_under(dir: &Path, base: &Path, acc: &mut Vec<String>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(&p, base, acc);
        } else {
            acc.push(p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = small(a.path());
    ca.model = ModelKind::Var;
    ca.regime = Regime::Randomized;
    let mut cb = ca.clone();
    cb.out = b.path().to_path_buf();
    let ra = experiment::run_experiment(&ca).unwrap();
    let rb = experiment::run_experiment(&cb).unwrap();
    let ma = std::fs::read(a.path().join("metrics.json")).unwrap();
    let mb = std::fs::read(b.path().join("metrics.json")).unwrap();
    assert_eq!(git_blob_hash(&ma), git_blob_hash(&mb));
    let hashes = |m: &RunManifest| m.files.iter().map(|f| (f.path.clone(), f.git_sha1.clone())).collect::<Vec<_>>();
    assert_eq!(hashes(&ra.manifest), hashes(&rb.manifest));

    let metrics: MetricsReport = serde_json::from_slice(&ma).unwrap();
    assert_eq!(metrics.model, "var");
    assert_eq!(metrics.regime, "randomized");
    assert_eq!(metrics.n_samples, 4);
    assert_eq!(metrics.seed, 11);
    assert!(metrics.median <= metrics.p95 && metrics.mean > 0.0);

    let mut other = ca.clone();
    other.seed = 12;
    other.out = tempfile::tempdir().unwrap().keep();
    let rc = experiment::run_experiment(&other).unwrap();
    assert_ne!(rc.evaluation.metrics.mean, ra.evaluation.metrics.mean);
    std::fs::remove_dir_all(&other.out).unwrap();
}

#[test]
fn manifest_accounts_for_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.model = ModelKind::FtWdLstm;
    c.regime = Regime::Randomized;
    let out = experiment::run_experiment(&c).unwrap();
    let m = read_manifest(dir.path());
    assert_eq!(m, out.manifest);
    assert!(m.complete && m.error.is_none());
    assert_eq!(m.seed, 11);
    assert_eq!(ExperimentConfig::parse(&m.config).unwrap(), c);
    let stages: Vec<&str> = m.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, ["generate", "fit", "evaluate", "diagnose"]);

    let mut on_disk = Vec::new();
    files_under(dir.path(), dir.path(), &mut on_disk);
    on_disk.retain(|p| p != "manifest.json");
    on_disk.sort();
    let mut listed: Vec<String> = m.files.iter().map(|f| f.path.clone()).collect();
    listed.sort();
    assert_eq!(on_disk, listed);
    for f in &m.files {
        let bytes = std::fs::read(dir.path().join(&f.path)).unwrap();
        assert_eq!(f.bytes, bytes.len());
        assert_eq!(f.git_sha1, git_blob_hash(&bytes), "{}", f.path);
    }
    for needed in [
        "metrics.json",
        "nrmse.csv",
        "model/wd-lstm.ckpt",
        "model/ft-wd-lstm.ckpt",
        "data/manifest.json",
        "data/train-regular/traj_0000.csv",
        "data/train-randomized/traj_0005.csv",
        "data/test-randomized/traj_0003.csv",
        "diagnostics/lag_P_Q.csv",
        "diagnostics/criteria.csv",
    ] {
        assert!(listed.iter().any(|p| p == needed), "missing {needed}");
    }
}

#[test]
fn fit_then_evaluate_matches_experiment() {
    for model in [ModelKind::Var, ModelKind::WdLstm] {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(dir.path());
        c.model = model;
        c.regime = Regime::Randomized;
        c.diagnostics.enabled = false;
        let whole = experiment::run_experiment(&c).unwrap().evaluation;
        let split = tempfile::tempdir().unwrap();
        c.out = split.path().to_path_buf();
        experiment::run_fit(&c).unwrap();
        let (m, ev) = experiment::run_evaluate(&c).unwrap();
        assert!(m.complete);
        assert_eq!(ev.metrics, whole.metrics, "{model}");
    }
}

#[test]
fn evaluate_without_a_fitted_model_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.model = ModelKind::Var;
    let err = experiment::run_evaluate(&c).unwrap_err();
    assert!(matches!(err.root(), Error::Io { .. }), "{err}");
    let m = read_manifest(dir.path());
    assert!(!m.complete);
    assert!(m.error.unwrap().contains("var.json"));
}

#[test]
fn bad_config_maps_to_exit_code_two() {
    for text in ["regime = stormy", "model = transformer", "seed = -1", "no.such.key = 1", "data.duration = 0"] {
        let err = ExperimentConfig::parse(text)
            .and_then(|c| c.validate().map(|_| c))
            .unwrap_err();
        assert_eq!(exit_code(&err), 2, "{text}: {err}");
    }
}

#[test]
fn unstable_var_is_a_fit_failure() {
    // Noise-free nominal data is nearly collinear; the recursive VAR forecast
    // blows up and must surface as a fit error, never as an inf/NaN metric.
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.model = ModelKind::Var;
    c.regime = Regime::Regular;
    c.diagnostics.enabled = false;
    let err = experiment::run_experiment(&c).unwrap_err();
    assert_eq!(exit_code(&err), 4, "{err}");
    assert!(matches!(err.root(), Error::ForecastDiverged { .. }));
    assert!(!dir.path().join("metrics.json").exists());
    assert!(!read_manifest(dir.path()).complete);
}

#[test]
fn diagnostics_cover_all_pairs_and_orders() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let (m, d) = experiment::run_diagnose(&c).unwrap();
    assert!(m.complete);
    assert_eq!(d.lags.len(), 6);
    for l in &d.lags {
        assert!(l.detected_lag <= 5);
        assert_eq!(l.cross_corr.shape(), (6, 6));
    }
    assert_eq!(d.curve.len(), 4);
    assert_eq!(d.decay.len(), 3);
    assert!(d.decay.iter().all(|v| *v >= 0.0));
    let criteria = std::fs::read_to_string(dir.path().join("diagnostics/criteria.csv")).unwrap();
    assert_eq!(criteria.lines().count(), 5);
}

#[test]
fn single_cell_sweep_matches_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.model = ModelKind::WdLstm;
    c.regime = Regime::Regular;
    c.diagnostics.enabled = false;
    c.data.train_trajectories = 4;
    c.data.finetune_trajectories = 4;
    c.data.test_trajectories = 4;
    c.sweep_resistances = vec![c.fault.resistance];
    let direct = experiment::run_experiment(&c).unwrap().evaluation.metrics.mean;
    let sweep_dir = tempfile::tempdir().unwrap();
    c.out = sweep_dir.path().to_path_buf();
    let (m, grid) = experiment::run_sweep(&c).unwrap();
    assert!(m.complete);
    assert_eq!(grid.cells, vec![vec![Some(direct)]]);
    let csv = std::fs::read_to_string(sweep_dir.path().join("sweep.csv")).unwrap();
    assert_eq!(busemu::eval::RegimeGrid::from_csv(&csv).unwrap(), grid);
}

#[test]
fn sweep_records_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.model = ModelKind::Var;
    c.sweep_resistances = vec![0.01, 0.1];
    let (_, grid) = experiment::run_sweep(&c).unwrap();
    assert_eq!(grid.cells[0].len(), 2);
    let failures: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep_failures.json")).unwrap()).unwrap();
    assert_eq!(failures.len(), grid.cells[0].iter().filter(|v| v.is_none()).count());
}
