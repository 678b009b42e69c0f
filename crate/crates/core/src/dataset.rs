//! Supervised datasets built from telemetry: channel selection, first
//! differencing, standardization and CSV persistence.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::MultiSeries;

/// Which terminal quantities are inputs and which are outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `(P, Q) -> (phi, V)`
    PqToVphi,
    /// `(V, phi) -> (P, Q)`
    VphiToPq,
}

impl Direction {
    pub fn input_labels(self) -> [&'static str; 2] {
        match self {
            Direction::PqToVphi => ["P", "Q"],
            Direction::VphiToPq => ["V", "phi"],
        }
    }

    pub fn output_labels(self) -> [&'static str; 2] {
        match self {
            Direction::PqToVphi => ["phi", "V"],
            Direction::VphiToPq => ["P", "Q"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Raw,
    FirstDifference,
    Standardized,
}

/// Mean and standard deviation of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransformStats {
    /// First value of every input and output channel.
    Anchors { inputs: Vec<f64>, outputs: Vec<f64> },
    Moments { inputs: Vec<Moments>, outputs: Vec<Moments> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: MultiSeries,
    pub outputs: MultiSeries,
    pub transform: Transform,
    pub stats: Option<TransformStats>,
}

impl Dataset {
    pub fn new(inputs: MultiSeries, outputs: MultiSeries) -> Result<Self> {
        Self::with_transform(inputs, outputs, Transform::Raw, None)
    }

    pub fn with_transform(
        inputs: MultiSeries,
        outputs: MultiSeries,
        transform: Transform,
        stats: Option<TransformStats>,
    ) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::Shape(format!(
                "inputs have {} samples, outputs {}",
                inputs.len(),
                outputs.len()
            )));
        }
        if (transform == Transform::Raw) != stats.is_none() {
            return Err(Error::InvalidArgument(
                "transform statistics must be present exactly when transformed".into(),
            ));
        }
        Ok(Self {
            inputs,
            outputs,
            transform,
            stats,
        })
    }

    /// Splits raw telemetry into the input and output pair for `direction`.
    pub fn from_series(series: &MultiSeries, direction: Direction) -> Result<Self> {
        Self::new(
            series.select(&direction.input_labels())?,
            series.select(&direction.output_labels())?,
        )
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First-differences both sides, keeping anchors for inversion.
    pub fn differenced(&self) -> Result<Self> {
        if self.transform != Transform::Raw {
            return Err(Error::InvalidArgument("only raw datasets can be differenced".into()));
        }
        let (inputs, a_in) = difference(&self.inputs)?;
        let (outputs, a_out) = difference(&self.outputs)?;
        Self::with_transform(
            inputs,
            outputs,
            Transform::FirstDifference,
            Some(TransformStats::Anchors {
                inputs: a_in,
                outputs: a_out,
            }),
        )
    }

    /// Inverts the stored transform.
    pub fn raw(&self) -> Result<Self> {
        match (&self.transform, &self.stats) {
            (Transform::Raw, _) => Ok(self.clone()),
            (Transform::FirstDifference, Some(TransformStats::Anchors { inputs, outputs })) => {
                Self::new(
                    undifference(&self.inputs, inputs)?,
                    undifference(&self.outputs, outputs)?,
                )
            }
            (Transform::Standardized, Some(TransformStats::Moments { inputs, outputs })) => {
                Self::new(
                    apply_moments(&self.inputs, inputs, Moments::inverse)?,
                    apply_moments(&self.outputs, outputs, Moments::inverse)?,
                )
            }
            _ => Err(Error::InvalidArgument("transform statistics do not match transform".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub trajectories: Vec<Dataset>,
    pub role: Role,
}

impl SampleSet {
    pub fn new(trajectories: Vec<Dataset>, role: Role) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptyInput)?;
        for d in &trajectories[1..] {
            if d.inputs.labels() != first.inputs.labels()
                || d.outputs.labels() != first.outputs.labels()
                || d.inputs.sample_rate() != first.inputs.sample_rate()
            {
                return Err(Error::Shape("trajectories do not share a channel layout".into()));
            }
        }
        Ok(Self { trajectories, role })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Dataset> {
        self.trajectories.iter()
    }

    pub fn differenced(&self) -> Result<Self> {
        Self::new(
            self.iter().map(Dataset::differenced).collect::<Result<_>>()?,
            self.role,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.trajectories[0].inputs.n_channels()
    }

    pub fn output_dim(&self) -> usize {
        self.trajectories[0].outputs.n_channels()
    }
}

/// Increments `x[t+1] - x[t]` of every channel plus the first value of each.
pub fn difference(series: &MultiSeries) -> Result<(MultiSeries, Vec<f64>)> {
    if series.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: series.len(),
        });
    }
    let anchors = series.channels().iter().map(|c| c[0]).collect();
    let data = series
        .channels()
        .iter()
        .map(|c| c.windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    Ok((series.with_data(data)?, anchors))
}

/// Cumulative sum of `increments` started from `anchors`.
pub fn undifference(increments: &MultiSeries, anchors: &[f64]) -> Result<MultiSeries> {
    if anchors.len() != increments.n_channels() {
        return Err(Error::Shape(format!(
            "{} anchors for {} channels",
            anchors.len(),
            increments.n_channels()
        )));
    }
    let data = increments
        .channels()
        .iter()
        .zip(anchors)
        .map(|(c, &a)| {
            let mut out = Vec::with_capacity(c.len() + 1);
            out.push(a);
            let mut acc = a;
            for d in c {
                acc += d;
                out.push(acc);
            }
            out
        })
        .collect();
    increments.with_data(data)
}

fn apply_moments(series: &MultiSeries, stats: &[Moments], f: fn(&Moments, f64) -> f64) -> Result<MultiSeries> {
    if stats.len() != series.n_channels() {
        return Err(Error::Shape(format!(
            "{} moments for {} channels",
            stats.len(),
            series.n_channels()
        )));
    }
    series.with_data(
        series
            .channels()
            .iter()
            .zip(stats)
            .map(|(c, m)| c.iter().map(|&v| f(m, v)).collect())
            .collect(),
    )
}

/// Per-channel standardization fitted on a training set only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub inputs: Vec<Moments>,
    pub outputs: Vec<Moments>,
}

impl Standardizer {
    /// Pooled moments over every trajectory of `train`.
    pub fn fit(train: &SampleSet) -> Result<Self> {
        if train.role != Role::Train {
            return Err(Error::InvalidArgument(
                "standardization statistics must come from a training set".into(),
            ));
        }
        if train.iter().any(|d| d.transform != Transform::Raw) {
            return Err(Error::InvalidArgument("standardize raw data only".into()));
        }
        let pooled = |pick: fn(&Dataset) -> &MultiSeries| -> Result<Vec<Moments>> {
            let first = pick(&train.trajectories[0]);
            (0..first.n_channels())
                .map(|c| {
                    let values = train.iter().flat_map(|d| pick(d).channel_at(c).iter().copied());
                    let m = moments(values);
                    if !(m.std > 1e-12) {
                        return Err(Error::DegenerateChannel(first.labels()[c].clone()));
                    }
                    Ok(m)
                })
                .collect()
        };
        Ok(Self {
            inputs: pooled(|d| &d.inputs)?,
            outputs: pooled(|d| &d.outputs)?,
        })
    }

    pub fn apply_dataset(&self, d: &Dataset) -> Result<Dataset> {
        if d.transform != Transform::Raw {
            return Err(Error::InvalidArgument("standardize raw data only".into()));
        }
        Dataset::with_transform(
            apply_moments(&d.inputs, &self.inputs, Moments::forward)?,
            apply_moments(&d.outputs, &self.outputs, Moments::forward)?,
            Transform::Standardized,
            Some(TransformStats::Moments {
                inputs: self.inputs.clone(),
                outputs: self.outputs.clone(),
            }),
        )
    }

    pub fn apply(&self, set: &SampleSet) -> Result<SampleSet> {
        SampleSet::new(
            set.iter().map(|d| self.apply_dataset(d)).collect::<Result<_>>()?,
            set.role,
        )
    }

    pub fn inputs_forward(&self, s: &MultiSeries) -> Result<MultiSeries> {
        apply_moments(s, &self.inputs, Moments::forward)
    }

    pub fn outputs_inverse(&self, s: &MultiSeries) -> Result<MultiSeries> {
        apply_moments(s, &self.outputs, Moments::inverse)
    }
}

/// Fits on `train` and applies the same statistics to both sets.
pub fn standardize(train: &SampleSet, test: Option<&SampleSet>) -> Result<(Standardizer, SampleSet, Option<SampleSet>)> {
    let st = Standardizer::fit(train)?;
    let tr = st.apply(train)?;
    let te = test.map(|t| st.apply(t)).transpose()?;
    Ok((st, tr, te))
}

/// Population mean and standard deviation, two-pass.
fn moments(values: impl Iterator<Item = f64> + Clone) -> Moments {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    Moments {
        mean,
        std: (ss / n as f64).sqrt(),
    }
}

/// Writes `t,<labels...>` CSV with shortest round-trip decimal values.
pub fn save_csv(series: &MultiSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(series)).map_err(|e| Error::io(path, e))
}

pub fn to_csv(series: &MultiSeries) -> String {
    let mut out = String::from("t");
    for l in series.labels() {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    let dt = series.dt();
    for i in 0..series.len() {
        write!(out, "{}", i as f64 * dt).unwrap();
        for c in series.channels() {
            write!(out, ",{}", c[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<MultiSeries> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<MultiSeries> {
    let err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") {
        return Err(err(1, "header must start with `t`".into()));
    }
    let labels: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    if labels.is_empty() || labels.iter().any(String::is_empty) {
        return Err(err(1, "header has empty channel labels".into()));
    }
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(err(1, format!("duplicate channel label `{l}`")));
        }
    }
    let mut times = Vec::new();
    let mut data = vec![Vec::new(); labels.len()];
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(err(ln, format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let mut parsed = fields.iter().map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(ln, format!("not a finite number: `{f}`")))
        });
        times.push(parsed.next().unwrap()?);
        for c in data.iter_mut() {
            c.push(parsed.next().unwrap()?);
        }
    }
    if times.len() < 2 {
        return Err(err(2, "need at least two rows to infer the sample rate".into()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(err(3, "time column is not increasing".into()));
    }
    for (i, t) in times.iter().enumerate() {
        if (t - times[0] - i as f64 * dt).abs() > 1e-9 * dt.max(1.0) * (i as f64 + 1.0) {
            return Err(err(i + 2, format!("time {t} breaks the fixed step {dt}")));
        }
    }
    MultiSeries::new(snap_rate(1.0 / dt), labels, data)
}

/// Rounds to 12 significant digits, undoing the drift of summed time stamps.
fn snap_rate(rate: f64) -> f64 {
    let scale = 10f64.powi(11 - rate.log10().floor() as i32);
    (rate * scale).round() / scale
}
