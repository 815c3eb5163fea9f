//! Conversion of raw MBP recordings into scaled lookback/horizon samples.
//!
//! Per series: impute, extract the 9-hour window ending at diagnosis, smooth,
//! scale to `[0, 1]`, then drop windows with too little variability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A patient's MBP recording anchored at one diagnosis time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub patient_id: String,
    /// Minute offsets, strictly increasing.
    pub timestamps: Vec<i64>,
    /// MBP in mmHg; `None` marks a missing reading.
    pub values: Vec<Option<f64>>,
    pub diagnosis_min: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeriesError {
    #[error("series for patient {0}: timestamps and values differ in length")]
    LengthMismatch(String),
    #[error("series for patient {patient}: timestamps not strictly increasing at index {index}")]
    NotIncreasing { patient: String, index: usize },
}

impl RawSeries {
    pub fn new(
        patient_id: impl Into<String>,
        timestamps: Vec<i64>,
        values: Vec<Option<f64>>,
        diagnosis_min: Option<i64>,
    ) -> Result<Self, SeriesError> {
        let patient_id = patient_id.into();
        if timestamps.len() != values.len() {
            return Err(SeriesError::LengthMismatch(patient_id));
        }
        if let Some(index) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(SeriesError::NotIncreasing {
                patient: patient_id,
                index: index + 1,
            });
        }
        Ok(Self {
            patient_id,
            timestamps,
            values,
            diagnosis_min,
        })
    }
}

/// One model-ready sample. Values are scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesWindow {
    pub patient_id: String,
    pub lookback: Vec<f64>,
    pub horizon: Vec<f64>,
    /// Timestamp of the first horizon sample: the boundary past which the
    /// model observes nothing.
    pub cutoff_min: i64,
    /// Timestamp of the last horizon sample.
    pub diagnosis_min: i64,
}

impl TimeSeriesWindow {
    /// `"<patient>@<cutoff>"`, unique within a dataset.
    pub fn id(&self) -> String {
        format!("{}@{}", self.patient_id, self.cutoff_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub step_min: i64,
    pub lookback_steps: usize,
    pub horizon_steps: usize,
    pub smoothing_window: usize,
    pub std_threshold: f64,
    pub scale_max: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            step_min: 5,
            lookback_steps: 72,
            horizon_steps: 36,
            smoothing_window: 3,
            std_threshold: 0.025,
            scale_max: 190.0,
        }
    }
}

impl PipelineConfig {
    pub fn window_steps(&self) -> usize {
        self.lookback_steps + self.horizon_steps
    }

    /// Length of the forecast horizon in minutes.
    pub fn horizon_minutes(&self) -> i64 {
        self.horizon_steps as i64 * self.step_min
    }
}

/// Why a series produced no window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    #[error("no diagnosis time")]
    MissingDiagnosis,
    #[error("every value is missing")]
    AllMissing,
    #[error("series does not cover the extraction window")]
    InsufficientCoverage,
    #[error("standard deviation at or below the variability threshold")]
    LowVariability,
}

/// Replaces missing values with the most recent observation; leading gaps
/// take the first observed value.
pub fn fill_forward(values: &[Option<f64>]) -> Result<Vec<f64>, Rejection> {
    let first = values.iter().flatten().next().copied().ok_or(Rejection::AllMissing)?;
    let mut last = first;
    Ok(values
        .iter()
        .map(|v| {
            if let Some(v) = v {
                last = *v;
            }
            last
        })
        .collect())
}

/// Unscaled window, still in mmHg.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub values: Vec<f64>,
    pub cutoff_min: i64,
    pub diagnosis_min: i64,
}

impl RawWindow {
    pub fn split(&self, lookback_steps: usize) -> (&[f64], &[f64]) {
        self.values.split_at(lookback_steps)
    }
}

/// Samples `lookback + horizon` grid points ending at `diagnosis_min`
/// (inclusive), taking the latest reading at or before each grid time.
///
/// The series must start at or before the first grid point and have a
/// reading within the final sampling interval.
pub fn extract_window(
    timestamps: &[i64],
    values: &[f64],
    diagnosis_min: i64,
    config: &PipelineConfig,
) -> Result<RawWindow, Rejection> {
    let n = config.window_steps();
    if n == 0 || timestamps.is_empty() || timestamps.len() != values.len() {
        return Err(Rejection::InsufficientCoverage);
    }
    let start = diagnosis_min - (n as i64 - 1) * config.step_min;
    let first = timestamps[0];
    let last = timestamps[timestamps.len() - 1];
    if first > start || last <= diagnosis_min - config.step_min {
        return Err(Rejection::InsufficientCoverage);
    }
    let window = (0..n)
        .map(|j| {
            let t = start + j as i64 * config.step_min;
            let idx = timestamps.partition_point(|&ts| ts <= t);
            values[idx - 1]
        })
        .collect();
    Ok(RawWindow {
        values: window,
        cutoff_min: start + config.lookback_steps as i64 * config.step_min,
        diagnosis_min,
    })
}

/// Trailing moving average; the first `window - 1` positions average the
/// available prefix.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let span = &values[(i + 1).saturating_sub(window)..=i];
            let mean = span.iter().sum::<f64>() / span.len() as f64;
            let (lo, hi) = span
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            mean.clamp(lo, hi)
        })
        .collect()
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `true` (accept) iff the population standard deviation exceeds `threshold`.
pub fn variability_filter(values: &[f64], threshold: f64) -> bool {
    population_std(values) > threshold
}

/// `v / max` after clipping to `[0, max]`; also returns how many values were clipped.
pub fn minmax_scale(values: &[f64], max: f64) -> (Vec<f64>, usize) {
    let mut clipped = 0;
    let scaled = values
        .iter()
        .map(|&v| {
            let c = v.clamp(0.0, max);
            if c != v {
                clipped += 1;
            }
            c / max
        })
        .collect();
    (scaled, clipped)
}

pub fn inverse_scale(values: &[f64], max: f64) -> Vec<f64> {
    values.iter().map(|v| v * max).collect()
}

/// Accounting for one pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub total: usize,
    pub accepted: usize,
    pub missing_diagnosis: usize,
    pub all_missing: usize,
    pub insufficient_coverage: usize,
    pub low_variability: usize,
    /// Raw values outside `[0, scale_max]` that were clipped in accepted or
    /// variability-rejected windows.
    pub clipped_values: usize,
}

impl PipelineReport {
    pub fn rejected(&self) -> usize {
        self.missing_diagnosis + self.all_missing + self.insufficient_coverage + self.low_variability
    }

    fn record(&mut self, reason: Rejection) {
        match reason {
            Rejection::MissingDiagnosis => self.missing_diagnosis += 1,
            Rejection::AllMissing => self.all_missing += 1,
            Rejection::InsufficientCoverage => self.insufficient_coverage += 1,
            Rejection::LowVariability => self.low_variability += 1,
        }
    }

    /// Associative merge of two partial reports.
    pub fn merge(&mut self, other: &PipelineReport) {
        self.total += other.total;
        self.accepted += other.accepted;
        self.missing_diagnosis += other.missing_diagnosis;
        self.all_missing += other.all_missing;
        self.insufficient_coverage += other.insufficient_coverage;
        self.low_variability += other.low_variability;
        self.clipped_values += other.clipped_values;
    }
}

/// Runs the full pipeline on one series. The second element counts clipped values.
pub fn process_series(
    series: &RawSeries,
    config: &PipelineConfig,
) -> (Result<TimeSeriesWindow, Rejection>, usize) {
    let diagnosis = match series.diagnosis_min {
        Some(d) => d,
        None => return (Err(Rejection::MissingDiagnosis), 0),
    };
    let filled = match fill_forward(&series.values) {
        Ok(v) => v,
        Err(e) => return (Err(e), 0),
    };
    let raw = match extract_window(&series.timestamps, &filled, diagnosis, config) {
        Ok(w) => w,
        Err(e) => return (Err(e), 0),
    };
    let smoothed = moving_average(&raw.values, config.smoothing_window);
    let (scaled, clipped) = minmax_scale(&smoothed, config.scale_max);
    if !variability_filter(&scaled, config.std_threshold) {
        return (Err(Rejection::LowVariability), clipped);
    }
    let (lookback, horizon) = scaled.split_at(config.lookback_steps);
    (
        Ok(TimeSeriesWindow {
            patient_id: series.patient_id.clone(),
            lookback: lookback.to_vec(),
            horizon: horizon.to_vec(),
            cutoff_min: raw.cutoff_min,
            diagnosis_min: raw.diagnosis_min,
        }),
        clipped,
    )
}

/// Processes every series in input order.
pub fn run_pipeline(series: &[RawSeries], config: &PipelineConfig) -> (Vec<TimeSeriesWindow>, PipelineReport) {
    let mut windows = Vec::new();
    let mut report = PipelineReport::default();
    for s in series {
        report.total += 1;
        let (outcome, clipped) = process_series(s, config);
        report.clipped_values += clipped;
        match outcome {
            Ok(w) => {
                report.accepted += 1;
                windows.push(w);
            }
            Err(reason) => report.record(reason),
        }
    }
    (windows, report)
}
