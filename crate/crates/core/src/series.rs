//! Uniformly sampled multichannel time series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major container: every channel shares one sample clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeries {
    sample_rate: f64,
    labels: Vec<String>,
    data: Vec<Vec<f64>>,
}

impl MultiSeries {
    pub fn new(sample_rate: f64, labels: Vec<String>, data: Vec<Vec<f64>>) -> Result<Self> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if labels.len() != data.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} channels",
                labels.len(),
                data.len()
            )));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::InvalidArgument(format!("duplicate channel label `{l}`")));
            }
        }
        if let Some(first) = data.first() {
            if let Some((l, c)) = labels.iter().zip(&data).find(|(_, c)| c.len() != first.len()) {
                return Err(Error::Shape(format!(
                    "channel `{l}` has {} samples, expected {}",
                    c.len(),
                    first.len()
                )));
            }
        }
        Ok(Self {
            sample_rate,
            labels,
            data,
        })
    }

    /// Builds from labelled channels given as string slices.
    pub fn from_channels(sample_rate: f64, channels: Vec<(&str, Vec<f64>)>) -> Result<Self> {
        let (labels, data) = channels
            .into_iter()
            .map(|(l, c)| (l.to_string(), c))
            .unzip();
        Self::new(sample_rate, labels, data)
    }

    /// Builds from time-major rows.
    pub fn from_rows(sample_rate: f64, labels: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let width = labels.len();
        let mut data = vec![Vec::with_capacity(rows.len()); width];
        for (t, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Shape(format!(
                    "row {t} has {} values, expected {width}",
                    row.len()
                )));
            }
            for (c, v) in data.iter_mut().zip(row) {
                c.push(*v);
            }
        }
        Self::new(sample_rate, labels, data)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.data.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn channel_at(&self, idx: usize) -> &[f64] {
        &self.data[idx]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn channel(&self, label: &str) -> Result<&[f64]> {
        self.index_of(label)
            .map(|i| self.data[i].as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("no channel `{label}`")))
    }

    /// Row `t` across all channels.
    pub fn row(&self, t: usize) -> Vec<f64> {
        self.data.iter().map(|c| c[t]).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|t| self.row(t)).collect()
    }

    /// New series restricted to `labels`, in that order.
    pub fn select(&self, labels: &[&str]) -> Result<Self> {
        let data = labels
            .iter()
            .map(|l| self.channel(l).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            self.sample_rate,
            labels.iter().map(|l| l.to_string()).collect(),
            data,
        )
    }

    /// Samples `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} out of range for length {}",
                self.len()
            )));
        }
        Self::new(
            self.sample_rate,
            self.labels.clone(),
            self.data.iter().map(|c| c[start..end].to_vec()).collect(),
        )
    }

    pub fn with_data(&self, data: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.sample_rate, self.labels.clone(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_and_duplicate() {
        assert!(MultiSeries::from_channels(10.0, vec![("a", vec![1.0]), ("b", vec![])]).is_err());
        assert!(MultiSeries::from_channels(10.0, vec![("a", vec![1.0]), ("a", vec![2.0])]).is_err());
        assert!(MultiSeries::from_channels(0.0, vec![("a", vec![1.0])]).is_err());
    }

    #[test]
    fn select_and_slice() {
        let s = MultiSeries::from_channels(
            10.0,
            vec![("a", vec![1.0, 2.0, 3.0]), ("b", vec![4.0, 5.0, 6.0])],
        )
        .unwrap();
        let b = s.select(&["b"]).unwrap();
        assert_eq!(b.channel_at(0), &[4.0, 5.0, 6.0]);
        let mid = s.slice(1, 3).unwrap();
        assert_eq!(mid.row(0), vec![2.0, 5.0]);
        assert!(s.slice(2, 4).is_err());
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let s = MultiSeries::from_rows(1.0, vec!["x".into(), "y".into()], &rows).unwrap();
        assert_eq!(s.rows(), rows);
    }
}
