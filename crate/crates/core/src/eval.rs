//! Error metrics, correlation diagnostics and regime sweeps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::MultiSeries;

/// How the per-step error norm enters the NRMSE sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NrmseMode {
    /// `sqrt(mean ||x - y||^2) / sqrt(mean ||x||^2)`
    #[default]
    Squared,
    /// Unsquared Euclidean norms inside the means.
    Literal,
}

/// Normalized RMS error of `estimate` against `truth`, as a fraction.
pub fn nrmse(truth: &MultiSeries, estimate: &MultiSeries) -> Result<f64> {
    nrmse_with(truth, estimate, NrmseMode::Squared)
}

pub fn nrmse_with(truth: &MultiSeries, estimate: &MultiSeries, mode: NrmseMode) -> Result<f64> {
    if truth.len() != estimate.len() || truth.n_channels() != estimate.n_channels() {
        return Err(Error::Shape(format!(
            "truth is {}x{}, estimate {}x{}",
            truth.len(),
            truth.n_channels(),
            estimate.len(),
            estimate.n_channels()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..truth.len() {
        let (mut e2, mut x2) = (0.0, 0.0);
        for (x, y) in truth.channels().iter().zip(estimate.channels()) {
            e2 += (x[t] - y[t]).powi(2);
            x2 += x[t].powi(2);
        }
        match mode {
            NrmseMode::Squared => {
                num += e2;
                den += x2;
            }
            NrmseMode::Literal => {
                num += e2.sqrt();
                den += x2.sqrt();
            }
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedNormalization);
    }
    Ok((num / den).sqrt())
}

/// Sample Pearson correlation of two equally long channels.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `r[k] = pearson(x[..T-k], x[k..])` for `k = 0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if x.len() <= max_lag + 2 {
        return Err(Error::TooShort {
            needed: max_lag + 3,
            got: x.len(),
        });
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    // Lag 0 is exactly 1 once the variance check has passed.
    pearson(x, x)?;
    out.push(1.0);
    for k in 1..=max_lag {
        out.push(pearson(&x[..x.len() - k], &x[k..])?);
    }
    Ok(out)
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Distribution summary of per-trajectory NRMSE values, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmseSummary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub values: Vec<f64>,
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<NrmseSummary> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("cannot summarize non-finite value {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(NrmseSummary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: percentile_sorted(&sorted, 0.5),
        p95: percentile_sorted(&sorted, 0.95),
        values: values.to_vec(),
    })
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub regime: String,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(model: &str, regime: &str, summary: &NrmseSummary, seed: u64) -> Self {
        Self {
            model: model.to_string(),
            regime: regime.to_string(),
            mean: summary.mean,
            median: summary.median,
            p95: summary.p95,
            n_samples: summary.values.len(),
            seed,
        }
    }
}

/// NRMSE over a grid of operating regimes; failed cells are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeGrid {
    pub row_label: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl RegimeGrid {
    pub fn to_csv(&self) -> String {
        let mut out = self.row_label.clone();
        for c in &self.columns {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.cells) {
            out.push_str(r);
            for cell in row {
                match cell {
                    Some(v) => write!(out, ",{v}").unwrap(),
                    None => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty grid".into(),
        })?;
        let mut head = header.split(',');
        let row_label = head.next().unwrap_or_default().to_string();
        let columns: Vec<String> = head.map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for (i, line) in lines {
            let mut f = line.split(',');
            rows.push(f.next().unwrap_or_default().to_string());
            let row = f
                .map(|v| match v {
                    "failed" => Ok(None),
                    v => v.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("bad cell `{v}`"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {} cells, found {}", columns.len(), row.len()),
                });
            }
            cells.push(row);
        }
        Ok(Self {
            row_label,
            rows,
            columns,
            cells,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates `fit_evaluate` at every fault resistance. Failures become
/// empty cells and are returned alongside the grid.
pub fn regime_sweep<F>(row: &str, resistances: &[f64], mut fit_evaluate: F) -> (RegimeGrid, Vec<(f64, Error)>)
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut failures = Vec::new();
    let cells = resistances
        .iter()
        .map(|&r| match fit_evaluate(r) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(_) => {
                failures.push((r, Error::InvalidArgument("non-finite NRMSE".into())));
                None
            }
            Err(e) => {
                failures.push((r, e));
                None
            }
        })
        .collect();
    let grid = RegimeGrid {
        row_label: "model".into(),
        rows: vec![row.to_string()],
        columns: resistances.iter().map(|r| format!("R={r}")).collect(),
        cells: vec![cells],
    };
    (grid, failures)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::rng;

    fn two(a: Vec<f64>, b: Vec<f64>) -> MultiSeries {
        MultiSeries::from_channels(10.0, vec![("a", a), ("b", b)]).unwrap()
    }

    #[test]
    fn nrmse_hand_cases() {
        let truth = two(vec![3.0], vec![4.0]);
        assert_eq!(nrmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(nrmse(&truth, &two(vec![0.0], vec![0.0])).unwrap(), 1.0);
        assert!((nrmse(&truth, &two(vec![3.0], vec![0.0])).unwrap() - 0.8).abs() < 1e-15);
        let zero = two(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(matches!(nrmse(&zero, &zero), Err(Error::UndefinedNormalization)));
        assert!(nrmse(&truth, &zero).is_err());
    }

    #[test]
    fn literal_mode_differs_from_squared() {
        let truth = two(vec![1.0, 2.0], vec![0.0, 0.0]);
        let est = two(vec![1.5, 2.0], vec![0.0, 0.0]);
        let sq = nrmse_with(&truth, &est, NrmseMode::Squared).unwrap();
        let lit = nrmse_with(&truth, &est, NrmseMode::Literal).unwrap();
        assert!((sq - (0.25f64 / 5.0).sqrt()).abs() < 1e-15);
        assert!((lit - (0.5f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pearson_basics() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let aff: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&x, &aff).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::ZeroVariance)));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn autocorrelation_of_white_noise() {
        let mut r = rng::from_seed(21);
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|_| r.sample(rand_distr::StandardNormal)).collect();
        let ac = autocorrelation(&x, 50).unwrap();
        assert_eq!(ac[0], 1.0);
        let band = 3.0 / (n as f64).sqrt();
        let outside = ac[1..].iter().filter(|v| v.abs() >= band).count();
        // 0.27% per lag at 3 sigma.
        assert!(outside <= 1, "{outside} lags outside the band");
        assert!(autocorrelation(&x[..5], 3).is_err());
    }

    #[test]
    fn summarize_cases() {
        let s = summarize(&[5.0]).unwrap();
        assert_eq!((s.mean, s.median, s.p95), (5.0, 5.0, 5.0));
        assert_eq!(summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap().median, 2.5);
        assert!(matches!(summarize(&[]), Err(Error::EmptyInput)));
        let mut r = rng::from_seed(17);
        let u: Vec<f64> = (0..1000).map(|_| r.random::<f64>()).collect();
        assert!((summarize(&u).unwrap().p95 - 0.95).abs() < 0.02);
    }

    #[test]
    fn grid_round_trip_and_failures() {
        let (grid, failures) = regime_sweep("var", &[10.0, 1.0, 0.1], |r| {
            if r < 0.5 {
                Err(Error::SimulationDiverged {
                    time: 1.0,
                    reason: "test".into(),
                })
            } else {
                Ok(1.0 / r)
            }
        });
        assert_eq!(failures.len(), 1);
        assert_eq!(grid.cells, vec![vec![Some(0.1), Some(1.0), None]]);
        assert_eq!(RegimeGrid::from_csv(&grid.to_csv()).unwrap(), grid);
    }

    #[test]
    fn spearman_monotone() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 10.0, 100.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn nrmse_scale_covariant(
            xs in prop::collection::vec(-10.0..10.0f64, 4..40),
            noise in prop::collection::vec(-1.0..1.0f64, 40),
            c in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0, 7.0]),
        ) {
            prop_assume!(xs.iter().any(|v| v.abs() > 1e-3));
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x + n).collect();
            let scaled = |v: &[f64]| v.iter().map(|a| a * c).collect::<Vec<_>>();
            let a = nrmse(&two(xs.clone(), ys.clone()), &two(ys.clone(), xs.clone())).unwrap();
            let b = nrmse(&two(scaled(&xs), scaled(&ys)), &two(scaled(&ys), scaled(&xs))).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn pearson_affine_invariance(
            xs in prop::collection::vec(-10.0..10.0f64, 3..60),
            ys in prop::collection::vec(-10.0..10.0f64, 60),
            a in prop::sample::select(vec![-4.0, -1.0, -0.25, 0.5, 3.0]),
            b in -5.0..5.0f64,
        ) {
            let ys = &ys[..xs.len()];
            let base = pearson(&xs, ys);
            prop_assume!(base.is_ok());
            let tx: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let r = pearson(&tx, ys).unwrap();
            prop_assert!((r - a.signum() * base.unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn summarize_permutation_invariant(
            mut xs in prop::collection::vec(0.0..100.0f64, 1..50),
            seed in any::<u64>(),
        ) {
            let a = summarize(&xs).unwrap();
            let mut r = rng::from_seed(seed);
            for i in (1..xs.len()).rev() {
                xs.swap(i, r.random_range(0..=i));
            }
            let b = summarize(&xs).unwrap();
            prop_assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.max(1.0));
            prop_assert_eq!(a.median, b.median);
            prop_assert_eq!(a.p95, b.p95);
            prop_assert!(a.p95 >= a.median);
        }

        #[test]
        fn lag_zero_is_one(xs in prop::collection::vec(-1.0..1.0f64, 10..100)) {
            if let Ok(ac) = autocorrelation(&xs, 3) {
                prop_assert_eq!(ac[0], 1.0);
            }
        }
    }
}
