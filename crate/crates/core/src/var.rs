//! Vector auto-regression with exogenous inputs.
//!
//! ```text
//! y_t = mu + sum_{i=1..p} A_i y_{t-i} + sum_{i=1..p} B_i x_{t-i} + e_t
//! ```
//!
//! Fitted by equation-wise least squares over every trajectory of a sample
//! set. Also hosts the information criteria, both order-selection rules and
//! the lagged inverse-correlation diagnostic.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{difference, Dataset, SampleSet};
use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::series::MultiSeries;

const BLOCK_ROWS: usize = 512;

/// Relative eigenvalue floor of the column-equilibrated Gram matrix below
/// which the design counts as rank deficient (condition number ~3e6).
const GRAM_RCOND: f64 = 1e-13;

/// Default relative tolerance of the parameter-decay order rule.
pub const DEFAULT_DECAY_EPSILON: f64 = 0.3;

/// Default scan limit for order selection.
pub const DEFAULT_P_MAX: usize = 48;

/// Ridge added to the lagged correlation matrix before inversion.
pub const DIAGNOSTIC_RIDGE: f64 = 1e-8;

/// Default relative magnitude under which inverse-correlation entries are zero.
pub const DEFAULT_ZERO_THRESHOLD: f64 = 0.05;

mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    pub struct Dense {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    impl From<&DMatrix<f64>> for Dense {
        fn from(m: &DMatrix<f64>) -> Self {
            Self {
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.transpose().as_slice().to_vec(),
            }
        }
    }

    impl Dense {
        fn into_matrix<E: serde::de::Error>(self) -> Result<DMatrix<f64>, E> {
            if self.rows * self.cols != self.data.len() {
                return Err(E::custom("matrix data length does not match its shape"));
            }
            Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
        }
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Dense::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        Dense::deserialize(d)?.into_matrix()
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(m: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            m.iter().map(Dense::from).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            Vec::<Dense>::deserialize(d)?
                .into_iter()
                .map(Dense::into_matrix)
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarxModel {
    pub order: usize,
    pub intercept: Vec<f64>,
    /// `A_1..A_p`, each `d x d`.
    #[serde(with = "row_major::vec")]
    pub endo: Vec<DMatrix<f64>>,
    /// `B_1..B_p`, each `d x m`.
    #[serde(with = "row_major::vec")]
    pub exo: Vec<DMatrix<f64>>,
    /// Maximum-likelihood residual covariance.
    #[serde(with = "row_major")]
    pub noise_cov: DMatrix<f64>,
    pub fit_loglik: f64,
    /// Number of regression rows the model was fitted on.
    pub n_eff: usize,
    /// Shared exogenous scale when `B_i = beta * A_i` was imposed.
    pub shared_beta: Option<f64>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
}

impl VarxModel {
    pub fn output_dim(&self) -> usize {
        self.intercept.len()
    }

    pub fn input_dim(&self) -> usize {
        self.exo.first().map_or(0, DMatrix::ncols)
    }

    /// Free parameters per output equation.
    pub fn regressors_per_equation(&self) -> usize {
        match self.shared_beta {
            None => 1 + self.order * (self.output_dim() + self.input_dim()),
            Some(_) => 1 + self.order * self.output_dim(),
        }
    }

    /// Total free parameter count `k`.
    pub fn n_params(&self) -> usize {
        let k = self.output_dim() * self.regressors_per_equation();
        k + usize::from(self.shared_beta.is_some())
    }

    pub fn aic(&self) -> f64 {
        aic(self.n_params(), self.fit_loglik)
    }

    pub fn bic(&self) -> f64 {
        self.n_params() as f64 * (self.n_eff as f64).ln() - 2.0 * self.fit_loglik
    }

    pub fn hqic(&self) -> f64 {
        2.0 * self.n_params() as f64 * (self.n_eff as f64).ln().ln() - 2.0 * self.fit_loglik
    }

    pub fn fpe(&self) -> Result<f64> {
        let n = self.n_eff as f64;
        let m = self.regressors_per_equation() as f64;
        if n <= m {
            return Err(Error::UndefinedCriterion(format!(
                "FPE needs more rows ({n}) than regressors per equation ({m})"
            )));
        }
        let d = self.output_dim() as i32;
        Ok(self.noise_cov.determinant() * ((n + m) / (n - m)).powi(d))
    }

    pub fn criterion(&self, c: Criterion) -> Result<f64> {
        match c {
            Criterion::Aic => Ok(self.aic()),
            Criterion::Bic => Ok(self.bic()),
            Criterion::Hqic => Ok(self.hqic()),
            Criterion::Fpe => self.fpe(),
        }
    }

    /// One-step prediction of `y_t` given lagged rows (most recent last).
    fn step(&self, ys: &[Vec<f64>], xs: &[Vec<f64>], t: usize) -> Vec<f64> {
        let d = self.output_dim();
        let mut out = self.intercept.clone();
        for i in 1..=self.order {
            let (a, b) = (&self.endo[i - 1], &self.exo[i - 1]);
            let (y, x) = (&ys[t - i], &xs[t - i]);
            for r in 0..d {
                let mut acc = 0.0;
                for (c, v) in y.iter().enumerate() {
                    acc += a[(r, c)] * v;
                }
                for (c, v) in x.iter().enumerate() {
                    acc += b[(r, c)] * v;
                }
                out[r] += acc;
            }
        }
        out
    }

    /// Recursive forecast. `y_hist` holds at least `order` observed outputs,
    /// `inputs` the exogenous rows aligned with `y_hist` and continuing at
    /// least `horizon - 1` steps past it. Rows are time-major.
    pub fn forecast(&self, y_hist: &[Vec<f64>], inputs: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
        let h0 = y_hist.len();
        if h0 < self.order {
            return Err(Error::InsufficientHistory {
                needed: self.order,
                got: h0,
            });
        }
        if horizon == 0 {
            return Ok(Vec::new());
        }
        let needed_x = h0 + horizon - 1;
        if self.input_dim() > 0 && inputs.len() < needed_x {
            return Err(Error::InsufficientHistory {
                needed: needed_x,
                got: inputs.len(),
            });
        }
        let empty = vec![Vec::new(); needed_x + 1];
        let xs = if self.input_dim() > 0 { inputs } else { &empty };
        let mut ys = y_hist.to_vec();
        for t in h0..h0 + horizon {
            let next = self.step(&ys, xs, t);
            ys.push(next);
        }
        Ok(ys.split_off(h0))
    }

    /// Forecasts `horizon` steps after `history`, reading the exogenous path
    /// from `history.inputs` followed by `future_inputs`.
    pub fn predict(&self, history: &Dataset, future_inputs: Option<&MultiSeries>, horizon: usize) -> Result<MultiSeries> {
        let mut xs = history.inputs.rows();
        if let Some(f) = future_inputs {
            xs.extend(f.rows());
        }
        let rows = self.forecast(&history.outputs.rows(), &xs, horizon)?;
        MultiSeries::from_rows(
            history.outputs.sample_rate(),
            history.outputs.labels().to_vec(),
            &rows,
        )
    }

    /// Runs the model as an emulator over a (transformed-domain) dataset:
    /// outputs are observed for the first `warmup` samples, forecast after.
    pub fn emulate(&self, data: &Dataset, warmup: usize) -> Result<MultiSeries> {
        let ys = data.outputs.rows();
        if warmup > ys.len() {
            return Err(Error::InvalidArgument(format!(
                "warmup {warmup} exceeds series length {}",
                ys.len()
            )));
        }
        let rows = self.forecast(&ys[..warmup], &data.inputs.rows(), ys.len() - warmup)?;
        MultiSeries::from_rows(data.outputs.sample_rate(), data.outputs.labels().to_vec(), &rows)
    }

    /// Emulation in original units for a model fitted on first differences:
    /// truth is known up to sample `warmup`; returns samples `warmup+1..T`.
    pub fn emulate_levels(&self, raw: &Dataset, warmup: usize) -> Result<MultiSeries> {
        let (dy, _) = difference(&raw.outputs)?;
        let (dx, _) = difference(&raw.inputs)?;
        let inc = Dataset::new(dx, dy)?;
        let pred = self.emulate(&inc, warmup)?;
        let mut level = raw.outputs.row(warmup);
        let mut rows = Vec::with_capacity(pred.len());
        for t in 0..pred.len() {
            for (l, d) in level.iter_mut().zip(pred.row(t)) {
                *l += d;
            }
            rows.push(level.clone());
        }
        MultiSeries::from_rows(raw.outputs.sample_rate(), raw.outputs.labels().to_vec(), &rows)
    }

    /// `||A_i - A_{i-1}||_F` for `i = 2..=p`.
    pub fn decay_series(&self) -> Vec<f64> {
        self.endo.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.endo.len() != m.order || m.exo.len() != m.order {
            return Err(Error::Shape("coefficient count does not match order".into()));
        }
        Ok(m)
    }
}

/// `AIC = 2k - 2 ln L`.
pub fn aic(k: usize, loglik: f64) -> f64 {
    2.0 * k as f64 - 2.0 * loglik
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    Aic,
    Bic,
    Hqic,
    Fpe,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Aic, Criterion::Bic, Criterion::Fpe, Criterion::Hqic];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Aic => "aic",
            Criterion::Bic => "bic",
            Criterion::Hqic => "hqic",
            Criterion::Fpe => "fpe",
        }
    }
}

/// Lagged regressor layout for one order.
struct Design {
    order: usize,
    d: usize,
    m: usize,
    shared_beta: Option<f64>,
}

impl Design {
    fn width(&self) -> usize {
        match self.shared_beta {
            None => 1 + self.order * (self.d + self.m),
            Some(_) => 1 + self.order * self.d,
        }
    }

    fn fill(&self, traj: &Dataset, t: usize, row: &mut [f64]) {
        row[0] = 1.0;
        let ys = traj.outputs.channels();
        let xs = traj.inputs.channels();
        let mut k = 1;
        for i in 1..=self.order {
            for (c, y) in ys.iter().enumerate() {
                row[k] = y[t - i] + self.shared_beta.map_or(0.0, |b| b * xs[c][t - i]);
                k += 1;
            }
        }
        if self.shared_beta.is_none() {
            for i in 1..=self.order {
                for x in xs {
                    row[k] = x[t - i];
                    k += 1;
                }
            }
        }
    }

    /// Visits regression rows in blocks of at most [`BLOCK_ROWS`].
    fn for_blocks(&self, set: &SampleSet, start: usize, mut f: impl FnMut(&DMatrix<f64>, &DMatrix<f64>)) {
        let w = self.width();
        let mut x = DMatrix::zeros(BLOCK_ROWS, w);
        let mut y = DMatrix::zeros(BLOCK_ROWS, self.d);
        let mut row = vec![0.0; w];
        let mut n = 0;
        let mut flush = |x: &DMatrix<f64>, y: &DMatrix<f64>, n: usize| {
            if n == BLOCK_ROWS {
                f(x, y);
            } else if n > 0 {
                f(&x.rows(0, n).into_owned(), &y.rows(0, n).into_owned());
            }
        };
        for traj in set.iter() {
            let ys = traj.outputs.channels();
            for t in start..traj.len() {
                self.fill(traj, t, &mut row);
                for (j, v) in row.iter().enumerate() {
                    x[(n, j)] = *v;
                }
                for (c, yc) in ys.iter().enumerate() {
                    y[(n, c)] = yc[t];
                }
                n += 1;
                if n == BLOCK_ROWS {
                    flush(&x, &y, n);
                    n = 0;
                }
            }
        }
        flush(&x, &y, n);
    }
}

/// Least-squares solution plus residual statistics.
struct Solved {
    coeffs: DMatrix<f64>,
    rss: DMatrix<f64>,
    n: usize,
}

fn solve_design(set: &SampleSet, design: &Design, start: usize) -> Result<Solved> {
    let w = design.width();
    let d = design.d;
    let mut gram = DMatrix::<f64>::zeros(w, w);
    let mut xty = DMatrix::<f64>::zeros(w, d);
    let mut n = 0usize;
    design.for_blocks(set, start, |x, y| {
        gram.gemm_tr(1.0, x, x, 1.0);
        xty.gemm_tr(1.0, x, y, 1.0);
        n += x.nrows();
    });
    if n <= w {
        return Err(Error::Identifiability(format!(
            "{n} regression rows for {w} regressors per equation"
        )));
    }
    let scale: Vec<f64> = (0..w).map(|j| gram[(j, j)].sqrt()).collect();
    if let Some(j) = scale.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::SingularDesign(format!("regressor column {j} is identically zero")));
    }
    let mut eq = gram.clone();
    for i in 0..w {
        for j in 0..w {
            eq[(i, j)] /= scale[i] * scale[j];
        }
    }
    let eig = eq.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo > GRAM_RCOND * hi) {
        return Err(Error::SingularDesign(format!(
            "equilibrated Gram eigenvalue ratio {:.3e}",
            lo / hi
        )));
    }
    let chol = eq
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("Gram matrix is not positive definite".into()))?;
    let solve = |rhs: &DMatrix<f64>| {
        let mut r = rhs.clone();
        for i in 0..w {
            for c in 0..d {
                r[(i, c)] /= scale[i];
            }
        }
        let mut s = chol.solve(&r);
        for i in 0..w {
            for c in 0..d {
                s[(i, c)] /= scale[i];
            }
        }
        s
    };
    let mut coeffs = solve(&xty);
    // One step of iterative refinement with residuals taken from the data.
    let mut xtr = DMatrix::<f64>::zeros(w, d);
    design.for_blocks(set, start, |x, y| {
        let r = y - x * &coeffs;
        xtr.gemm_tr(1.0, x, &r, 1.0);
    });
    coeffs += solve(&xtr);
    let mut rss = DMatrix::<f64>::zeros(d, d);
    design.for_blocks(set, start, |x, y| {
        let r = y - x * &coeffs;
        rss.gemm_tr(1.0, &r, &r, 1.0);
    });
    Ok(Solved { coeffs, rss, n })
}

fn gaussian_loglik(noise_cov: &DMatrix<f64>, n: usize) -> f64 {
    let d = noise_cov.nrows() as f64;
    let det = noise_cov.determinant();
    let n = n as f64;
    -0.5 * n * (d * (2.0 * std::f64::consts::PI).ln() + det.ln() + d)
}

fn check_set(train: &SampleSet, order: usize, start: usize) -> Result<()> {
    if order == 0 {
        return Err(Error::InvalidArgument("order must be at least 1".into()));
    }
    let d = train.output_dim();
    let needed = start.max(order) + d * order + 1;
    if let Some(short) = train.iter().find(|t| t.len() < needed) {
        return Err(Error::Identifiability(format!(
            "trajectory of length {} is too short for order {order} (needs {needed})",
            short.len()
        )));
    }
    Ok(())
}

fn assemble(train: &SampleSet, design: &Design, solved: Solved) -> VarxModel {
    let (d, m, p) = (design.d, design.m, design.order);
    let b = &solved.coeffs;
    let intercept = (0..d).map(|c| b[(0, c)]).collect();
    let endo: Vec<DMatrix<f64>> = (0..p)
        .map(|i| DMatrix::from_fn(d, d, |r, c| b[(1 + i * d + c, r)]))
        .collect();
    let exo = match design.shared_beta {
        None => (0..p)
            .map(|i| DMatrix::from_fn(d, m, |r, c| b[(1 + p * d + i * m + c, r)]))
            .collect(),
        Some(beta) => endo.iter().map(|a| a * beta).collect(),
    };
    let noise_cov = &solved.rss / solved.n as f64;
    let first = &train.trajectories[0];
    VarxModel {
        order: p,
        intercept,
        endo,
        exo,
        fit_loglik: gaussian_loglik(&noise_cov, solved.n),
        noise_cov,
        n_eff: solved.n,
        shared_beta: design.shared_beta,
        input_labels: first.inputs.labels().to_vec(),
        output_labels: first.outputs.labels().to_vec(),
    }
}

/// Least-squares VARX fit of order `p` on every trajectory of `train`.
pub fn fit(train: &SampleSet, order: usize) -> Result<VarxModel> {
    fit_from(train, order, order)
}

/// As [`fit`], but regressions start at sample `start >= order` of every
/// trajectory so fits of different orders share one estimation sample.
pub fn fit_from(train: &SampleSet, order: usize, start: usize) -> Result<VarxModel> {
    let start = start.max(order);
    check_set(train, order, start)?;
    let design = Design {
        order,
        d: train.output_dim(),
        m: train.input_dim(),
        shared_beta: None,
    };
    let solved = solve_design(train, &design, start)?;
    Ok(assemble(train, &design, solved))
}

/// Restricted fit with `B_i = beta * A_i`; `beta` by golden-section search
/// on the residual determinant after a coarse scan of `[-beta_max, beta_max]`.
pub fn fit_shared_beta(train: &SampleSet, order: usize, beta_max: f64) -> Result<VarxModel> {
    check_set(train, order, order)?;
    let (d, m) = (train.output_dim(), train.input_dim());
    if d != m {
        return Err(Error::Shape(format!(
            "shared exogenous scale needs equal input and output dims, got {m} and {d}"
        )));
    }
    let design = |beta| Design {
        order,
        d,
        m,
        shared_beta: Some(beta),
    };
    let cost = |beta: f64| -> f64 {
        solve_design(train, &design(beta), order)
            .map(|s| s.rss.determinant())
            .unwrap_or(f64::INFINITY)
    };
    let grid: Vec<f64> = (0..=40).map(|i| -beta_max + 2.0 * beta_max * i as f64 / 40.0).collect();
    let costs: Vec<f64> = grid.iter().map(|&b| cost(b)).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| costs[a].total_cmp(&costs[b]))
        .unwrap();
    if !costs[best].is_finite() {
        return Err(Error::SingularDesign("no finite fit over the beta scan".into()));
    }
    let step = grid[1] - grid[0];
    let (mut a, mut b) = (grid[best] - step, grid[best] + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut e) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fe) = (cost(c), cost(e));
    for _ in 0..60 {
        if fc < fe {
            b = e;
            e = c;
            fe = fc;
            c = b - g * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + g * (b - a);
            fe = cost(e);
        }
    }
    let beta = 0.5 * (a + b);
    let solved = solve_design(train, &design(beta), order)?;
    Ok(assemble(train, &design(beta), solved))
}

/// Criterion values of one candidate order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderScore {
    pub order: usize,
    pub aic: f64,
    pub bic: f64,
    pub hqic: f64,
    pub fpe: f64,
}

/// Fits orders `1..=p_max` on a common estimation sample. Failed orders are `None`.
pub fn criterion_curve(train: &SampleSet, p_max: usize) -> Vec<Option<OrderScore>> {
    (1..=p_max)
        .map(|p| {
            let m = fit_from(train, p, p_max).ok()?;
            Some(OrderScore {
                order: p,
                aic: m.aic(),
                bic: m.bic(),
                hqic: m.hqic(),
                fpe: m.fpe().unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Order in `1..=p_max` minimizing `criterion`; ties go to the smaller order.
pub fn select_order_ic(train: &SampleSet, p_max: usize, criterion: Criterion) -> Result<usize> {
    if p_max == 0 {
        return Err(Error::InvalidArgument("p_max must be at least 1".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for p in 1..=p_max {
        let Ok(model) = fit_from(train, p, p_max) else {
            continue;
        };
        let Ok(v) = model.criterion(criterion) else {
            continue;
        };
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((p, v));
        }
    }
    best.map(|(p, _)| p).ok_or(Error::NoValidOrder)
}

/// Smallest `i >= 2` with `||A_i - A_{i-1}||_F < epsilon * ||A_1||_F` in a
/// fit of order `p_max`; `p_max` if the coefficients never settle. With
/// `p_max == 1` there is nothing to compare and the answer is 1.
pub fn select_order_decay(train: &SampleSet, p_max: usize, epsilon: f64) -> Result<usize> {
    if p_max == 0 {
        return Err(Error::InvalidArgument("p_max must be at least 1".into()));
    }
    let model = fit(train, p_max)?;
    Ok(decay_order(&model, epsilon))
}

pub fn decay_order(model: &VarxModel, epsilon: f64) -> usize {
    let scale = model.endo[0].norm();
    model
        .decay_series()
        .iter()
        .position(|&d| d < epsilon * scale)
        .map_or(model.order, |i| i + 2)
}

/// Lagged inverse-correlation diagnostic between two channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagDiagnostic {
    pub labels: (String, String),
    pub max_lag: usize,
    /// `C[i][j] = corr(a_{t-i}, b_{t-j})`.
    #[serde(with = "row_major")]
    pub cross_corr: DMatrix<f64>,
    /// Block of the inverted joint lag-correlation matrix pairing `a_{t-i}` with `b_{t-j}`.
    #[serde(with = "row_major")]
    pub inverse_corr_matrix: DMatrix<f64>,
    pub zero_threshold: f64,
    pub detected_lag: usize,
    /// Set when the correlation matrix was numerically singular before the ridge.
    pub regularized: bool,
}

impl LagDiagnostic {
    /// Largest `|entry|` on each diagonal offset `|i - j| = k` of the inverse block.
    pub fn strip_profile(&self) -> Vec<f64> {
        let l = self.max_lag;
        (0..=l)
            .map(|k| {
                (0..=l - k)
                    .map(|i| {
                        self.inverse_corr_matrix[(i, i + k)]
                            .abs()
                            .max(self.inverse_corr_matrix[(i + k, i)].abs())
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let l = self.max_lag;
        let mut out = String::from("lag");
        for j in 0..=l {
            write!(out, ",{}_{j}", self.labels.1).unwrap();
        }
        out.push('\n');
        for i in 0..=l {
            write!(out, "{}_{i}", self.labels.0).unwrap();
            for j in 0..=l {
                write!(out, ",{}", self.inverse_corr_matrix[(i, j)]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the joint correlation matrix of `(a_t..a_{t-L}, b_t..b_{t-L})`,
/// inverts it with a small ridge, and reads the dependence horizon off the
/// cross block: the largest offset `|i - j|` whose strongest entry is at
/// least `zero_threshold` times the largest magnitude in the inverse.
pub fn lag_diagnostic(
    a: (&str, &[f64]),
    b: (&str, &[f64]),
    max_lag: usize,
    zero_threshold: f64,
) -> Result<LagDiagnostic> {
    let (la, xa) = a;
    let (lb, xb) = b;
    if max_lag == 0 {
        return Err(Error::InvalidArgument("max_lag must be at least 1".into()));
    }
    if xa.len() != xb.len() {
        return Err(Error::Shape(format!("lengths {} and {}", xa.len(), xb.len())));
    }
    if xa.len() < 10 * max_lag {
        return Err(Error::TooShort {
            needed: 10 * max_lag,
            got: xa.len(),
        });
    }
    let l = max_lag;
    let n = xa.len() - l;
    // Column k < L+1 is a lagged by k, column L+1+k is b lagged by k.
    let col = |k: usize| -> &[f64] {
        if k <= l {
            &xa[l - k..l - k + n]
        } else {
            let k = k - l - 1;
            &xb[l - k..l - k + n]
        }
    };
    let dim = 2 * (l + 1);
    let mut corr = DMatrix::<f64>::identity(dim, dim);
    for i in 0..dim {
        for j in i + 1..dim {
            let r = pearson(col(i), col(j)).map_err(|e| Error::DiagnosticFailed(e.to_string()))?;
            corr[(i, j)] = r;
            corr[(j, i)] = r;
        }
    }
    let regularized = corr.clone().cholesky().is_none();
    let ridged = &corr + DMatrix::<f64>::identity(dim, dim) * DIAGNOSTIC_RIDGE;
    let inv = ridged
        .cholesky()
        .ok_or_else(|| Error::DiagnosticFailed("correlation matrix singular beyond the ridge".into()))?
        .inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::DiagnosticFailed("non-finite inverse".into()));
    }
    let cross_corr = corr.view((0, l + 1), (l + 1, l + 1)).into_owned();
    let block = inv.view((0, l + 1), (l + 1, l + 1)).into_owned();
    let peak = inv.amax();
    let mut diag = LagDiagnostic {
        labels: (la.to_string(), lb.to_string()),
        max_lag: l,
        cross_corr,
        inverse_corr_matrix: block,
        zero_threshold,
        detected_lag: 0,
        regularized,
    };
    diag.detected_lag = diag
        .strip_profile()
        .iter()
        .rposition(|&s| s >= zero_threshold * peak)
        .unwrap_or(0);
    Ok(diag)
}

/// Stacked regressors and targets; materialized for diagnostics and tests.
pub fn design_matrices(train: &SampleSet, order: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let design = Design {
        order,
        d: train.output_dim(),
        m: train.input_dim(),
        shared_beta: None,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    design.for_blocks(train, order, |x, y| {
        xs.push(x.clone());
        ys.push(y.clone());
    });
    let rows: usize = xs.iter().map(DMatrix::nrows).sum();
    let mut x = DMatrix::zeros(rows, design.width());
    let mut y = DMatrix::zeros(rows, design.d);
    let mut r0 = 0;
    for (bx, by) in xs.iter().zip(&ys) {
        x.rows_mut(r0, bx.nrows()).copy_from(bx);
        y.rows_mut(r0, by.nrows()).copy_from(by);
        r0 += bx.nrows();
    }
    (x, y)
}

/// Stacked coefficient matrix laid out like [`design_matrices`] columns.
pub fn coefficient_matrix(model: &VarxModel) -> DMatrix<f64> {
    let (d, m, p) = (model.output_dim(), model.input_dim(), model.order);
    let mut b = DMatrix::zeros(1 + p * (d + m), d);
    for r in 0..d {
        b[(0, r)] = model.intercept[r];
        for i in 0..p {
            for c in 0..d {
                b[(1 + i * d + c, r)] = model.endo[i][(r, c)];
            }
            for c in 0..m {
                b[(1 + p * d + i * m + c, r)] = model.exo[i][(r, c)];
            }
        }
    }
    b
}

/// Residuals of one-step predictions on `data`, row per regression sample.
pub fn one_step_residuals(model: &VarxModel, train: &SampleSet) -> DMatrix<f64> {
    let (x, y) = design_matrices(train, model.order);
    y - x * coefficient_matrix(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Role;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    /// Simulates a planted VARX with white Gaussian inputs.
    pub(crate) fn planted(
        endo: &[DMatrix<f64>],
        exo: &[DMatrix<f64>],
        noise: f64,
        len: usize,
        seed: u64,
    ) -> Dataset {
        let (d, m) = (endo[0].nrows(), exo[0].ncols());
        let p = endo.len();
        let mut r = rng::stream(seed, "planted", 0);
        let n = Normal::new(0.0, 1.0).unwrap();
        let burn = 200;
        let xs: Vec<Vec<f64>> = (0..len + burn).map(|_| (0..m).map(|_| n.sample(&mut r)).collect()).collect();
        let mut ys: Vec<Vec<f64>> = vec![vec![0.0; d]; p];
        for t in p..len + burn {
            let mut y: Vec<f64> = (0..d).map(|_| noise * n.sample(&mut r)).collect();
            for i in 1..=p {
                for r_ in 0..d {
                    for c in 0..d {
                        y[r_] += endo[i - 1][(r_, c)] * ys[t - i][c];
                    }
                    for c in 0..m {
                        y[r_] += exo[i - 1][(r_, c)] * xs[t - i][c];
                    }
                }
            }
            ys.push(y);
        }
        let lab = |pre: &str, k: usize| (0..k).map(|i| format!("{pre}{i}")).collect::<Vec<_>>();
        Dataset::new(
            MultiSeries::from_rows(10.0, lab("x", m), &xs[burn..]).unwrap(),
            MultiSeries::from_rows(10.0, lab("y", d), &ys[burn..]).unwrap(),
        )
        .unwrap()
    }

    fn two_lag() -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        (
            vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]),
                DMatrix::from_row_slice(2, 2, &[-0.2, 0.05, 0.1, 0.1]),
            ],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, -0.5]),
                DMatrix::from_row_slice(2, 2, &[0.2, 0.3, 0.0, 0.4]),
            ],
        )
    }

    fn set(d: Dataset) -> SampleSet {
        SampleSet::new(vec![d], Role::Train).unwrap()
    }

    #[test]
    fn noise_free_fit_recovers_coefficients() {
        let (a, b) = two_lag();
        let m = fit(&set(planted(&a, &b, 0.0, 400, 1)), 2).unwrap();
        for i in 0..2 {
            assert!((&m.endo[i] - &a[i]).amax() < 1e-8);
            assert!((&m.exo[i] - &b[i]).amax() < 1e-8);
        }
        assert!(m.intercept.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn noisy_fit_is_close() {
        let (a, b) = two_lag();
        let m = fit(&set(planted(&a, &b, 0.1, 50_000, 2)), 2).unwrap();
        for i in 0..2 {
            assert!((&m.endo[i] - &a[i]).amax() < 1e-2);
            assert!((&m.exo[i] - &b[i]).amax() < 1e-2);
        }
        assert!((m.noise_cov[(0, 0)] - 0.01).abs() < 1e-3);
    }

    #[test]
    fn constant_series_is_singular() {
        let d = Dataset::new(
            MultiSeries::from_channels(10.0, vec![("x", vec![1.0; 100])]).unwrap(),
            MultiSeries::from_channels(10.0, vec![("y", vec![2.0; 100])]).unwrap(),
        )
        .unwrap();
        assert!(matches!(fit(&set(d), 1), Err(Error::SingularDesign(_))));
    }

    #[test]
    fn too_short_is_not_identifiable() {
        let (a, b) = two_lag();
        let d = planted(&a, &b, 0.1, 8, 3);
        assert!(matches!(fit(&set(d), 3), Err(Error::Identifiability(_))));
    }

    #[test]
    fn residuals_are_orthogonal_to_regressors() {
        let (a, b) = two_lag();
        let train = set(planted(&a, &b, 0.3, 2000, 4));
        let m = fit(&train, 3).unwrap();
        let (x, y) = design_matrices(&train, 3);
        let r = &y - &x * coefficient_matrix(&m);
        let xtr = x.transpose() * &r;
        let xty = x.transpose() * &y;
        assert!(xtr.amax() <= 1e-8 * xty.amax());
        let direct = r.transpose() * &r / r.nrows() as f64;
        assert!((direct - &m.noise_cov).amax() < 1e-12);
    }

    #[test]
    fn criteria_identities() {
        let (a, b) = two_lag();
        let m = fit(&set(planted(&a, &b, 0.3, 1000, 5)), 2).unwrap();
        let k = m.n_params() as f64;
        assert_eq!(m.n_params(), 2 * (1 + 2 * 4));
        let n = m.n_eff as f64;
        assert!((m.aic() - m.bic() - (2.0 * k - k * n.ln())).abs() < 1e-9);
        assert!((m.hqic() - m.aic() - 2.0 * k * (n.ln().ln() - 1.0)).abs() < 1e-9);
        let mm = m.regressors_per_equation() as f64;
        let fpe = m.noise_cov.determinant() * ((n + mm) / (n - mm)).powi(2);
        assert!((m.fpe().unwrap() - fpe).abs() <= 1e-12 * fpe);
    }

    #[test]
    fn aic_of_hand_values() {
        assert_eq!(aic(10, -50.0), 120.0);
    }

    #[test]
    fn noise_free_forecast_reproduces_the_plant() {
        let (a, b) = two_lag();
        let data = planted(&a, &b, 0.0, 300, 6);
        let m = fit(&set(data.clone()), 2).unwrap();
        let out = m.emulate(&data, 10).unwrap();
        assert_eq!(out.len(), 290);
        for c in 0..2 {
            for t in 0..290 {
                assert!((out.channel_at(c)[t] - data.outputs.channel_at(c)[t + 10]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn forecast_needs_history() {
        let (a, b) = two_lag();
        let m = fit(&set(planted(&a, &b, 0.1, 300, 7)), 2).unwrap();
        let err = m.forecast(&[vec![0.0, 0.0]], &vec![vec![0.0, 0.0]; 10], 3).unwrap_err();
        assert!(matches!(err, Error::InsufficientHistory { needed: 2, got: 1 }));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (a, b) = two_lag();
        let m = fit(&set(planted(&a, &b, 0.1, 300, 8)), 2).unwrap();
        let back = VarxModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn ic_selection_finds_planted_order() {
        let (a, b) = two_lag();
        let train = set(planted(&a, &b, 0.3, 3000, 9));
        assert_eq!(select_order_ic(&train, 8, Criterion::Bic).unwrap(), 2);
        assert_eq!(select_order_ic(&train, 8, Criterion::Hqic).unwrap(), 2);
        let curve = criterion_curve(&train, 8);
        assert_eq!(curve.len(), 8);
        assert!(curve.iter().all(Option::is_some));
    }

    #[test]
    fn ic_selection_with_nothing_fittable_fails() {
        let d = Dataset::new(
            MultiSeries::from_channels(10.0, vec![("x", vec![1.0; 100])]).unwrap(),
            MultiSeries::from_channels(10.0, vec![("y", vec![2.0; 100])]).unwrap(),
        )
        .unwrap();
        assert!(matches!(select_order_ic(&set(d), 4, Criterion::Aic), Err(Error::NoValidOrder)));
    }

    #[test]
    fn decay_saturates_immediately_for_first_order_dynamics() {
        let a = vec![DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.0, 0.5])];
        let b = vec![DMatrix::from_row_slice(2, 1, &[1.0, 0.5])];
        let train = set(planted(&a, &b, 0.05, 5000, 10));
        let m = fit(&train, 6).unwrap();
        let dec = m.decay_series();
        assert_eq!(dec.len(), 5);
        // ||A_2 - A_1|| is ||A_1|| up to noise, so a tolerance just above one
        // saturates at the first candidate.
        assert_eq!(decay_order(&m, 1.05), 2);
        assert_eq!(select_order_decay(&train, 6, 1.05).unwrap(), 2);
        // Beyond the true order consecutive lags agree to noise level.
        assert_eq!(decay_order(&m, 0.3), 3);
    }

    #[test]
    fn decay_never_settling_returns_p_max() {
        let mut m = fit(&set(planted(&two_lag().0, &two_lag().1, 0.1, 500, 11)), 3).unwrap();
        m.endo = vec![
            DMatrix::from_element(2, 2, 1.0),
            DMatrix::from_element(2, 2, -1.0),
            DMatrix::from_element(2, 2, 1.0),
        ];
        assert_eq!(decay_order(&m, 0.5), 3);
    }

    #[test]
    fn shared_beta_is_recovered() {
        let a = vec![
            DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.0, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.1]),
        ];
        let b: Vec<_> = a.iter().map(|m| m * 0.7).collect();
        let train = set(planted(&a, &b, 0.05, 5000, 12));
        let m = fit_shared_beta(&train, 2, 3.0).unwrap();
        assert!((m.shared_beta.unwrap() - 0.7).abs() < 1e-2);
        assert_eq!(m.n_params(), 2 * (1 + 2 * 2) + 1);
        assert!((&m.exo[1] - &m.endo[1] * m.shared_beta.unwrap()).amax() < 1e-15);
    }

    fn white(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, "white", 0);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut r)).collect()
    }

    #[test]
    fn lag_diagnostic_finds_planted_lag() {
        let a = white(1, 3000);
        let e = white(2, 3000);
        let b: Vec<f64> = (0..3000).map(|t| if t >= 3 { a[t - 3] } else { 0.0 } + 0.1 * e[t]).collect();
        let diag = lag_diagnostic(("a", &a), ("b", &b), 8, DEFAULT_ZERO_THRESHOLD).unwrap();
        assert_eq!(diag.detected_lag, 3);
        assert!(!diag.regularized);
        assert!((diag.cross_corr[(3, 0)] - 1.0 / 1.01f64.sqrt()).abs() < 0.02);
    }

    #[test]
    fn lag_diagnostic_on_independent_noise_is_zero() {
        let diag = lag_diagnostic(("a", &white(3, 3000)), ("b", &white(4, 3000)), 8, 0.05).unwrap();
        assert_eq!(diag.detected_lag, 0);
        assert!(diag.strip_profile().iter().all(|&s| s < 0.05 * 1.1));
    }

    #[test]
    fn lag_diagnostic_on_identical_channels_is_regularized() {
        let a = white(5, 500);
        let diag = lag_diagnostic(("a", &a), ("b", &a), 4, 0.05).unwrap();
        assert!(diag.regularized);
        assert_eq!(diag.detected_lag, 0);
        let csv = diag.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("lag,b_0,b_1"));
    }

    #[test]
    fn lag_diagnostic_rejects_short_input() {
        let a = white(6, 30);
        assert!(matches!(
            lag_diagnostic(("a", &a), ("b", &a), 4, 0.05),
            Err(Error::TooShort { needed: 40, got: 30 })
        ));
    }

    #[test]
    fn decay_with_unbounded_tolerance_picks_two() {
        let (a, b) = two_lag();
        let train = set(planted(&a, &b, 0.1, 1000, 13));
        assert_eq!(select_order_decay(&train, 5, f64::INFINITY).unwrap(), 2);
        assert_eq!(select_order_decay(&train, 1, 0.3).unwrap(), 1);
        assert!(select_order_decay(&train, 0, 0.3).is_err());
    }

    #[test]
    fn output_permutation_permutes_the_fit() {
        let (a, b) = two_lag();
        let data = planted(&a, &b, 0.2, 1500, 14);
        let swapped = Dataset::new(
            data.inputs.clone(),
            MultiSeries::from_channels(
                10.0,
                vec![("y1", data.outputs.channel_at(1).to_vec()), ("y0", data.outputs.channel_at(0).to_vec())],
            )
            .unwrap(),
        )
        .unwrap();
        let m = fit(&set(data), 2).unwrap();
        let s = fit(&set(swapped), 2).unwrap();
        let perm = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        for i in 0..2 {
            assert!((&perm * &m.endo[i] * &perm - &s.endo[i]).amax() < 1e-9);
            assert!((&perm * &m.exo[i] - &s.exo[i]).amax() < 1e-9);
        }
        assert!((&perm * &m.noise_cov * &perm - &s.noise_cov).amax() < 1e-12);
        assert!((m.fit_loglik - s.fit_loglik).abs() < 1e-8);
    }

    #[test]
    fn fit_beats_the_zero_predictor_in_sample() {
        let (a, b) = two_lag();
        let train = set(planted(&a, &b, 1.0, 800, 15));
        for p in 1..=4 {
            let m = fit(&train, p).unwrap();
            let (_, y) = design_matrices(&train, p);
            let rss = one_step_residuals(&m, &train).norm_squared();
            assert!(rss <= y.norm_squared());
        }
    }

    #[test]
    fn zero_dynamics_forecast_is_the_intercept() {
        let (a, b) = two_lag();
        let mut m = fit(&set(planted(&a, &b, 0.1, 300, 16)), 2).unwrap();
        for mat in m.endo.iter_mut().chain(m.exo.iter_mut()) {
            mat.fill(0.0);
        }
        m.intercept = vec![1.5, -0.25];
        let hist = vec![vec![3.0, 4.0], vec![5.0, 6.0]];
        let xs = vec![vec![1.0, 1.0]; 6];
        let out = m.forecast(&hist, &xs, 5).unwrap();
        assert_eq!(out, vec![vec![1.5, -0.25]; 5]);
        assert!(m.forecast(&hist, &xs, 0).unwrap().is_empty());
    }
}
