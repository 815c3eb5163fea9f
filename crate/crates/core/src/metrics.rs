//! Point-forecast error metrics, the persistence baseline and evaluation
//! reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, NBeatsModel};
use crate::preprocess::TimeSeriesWindow;

/// Floor for `|actual|` in the MAPE denominator.
pub const MAPE_EPSILON: f64 = 1e-8;

/// Name of the baseline row in every [`EvalReport`].
pub const PERSISTENCE: &str = "Persistence";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: actual has {actual}, forecast has {forecast}")]
    LengthMismatch { actual: usize, forecast: usize },
    #[error("metric needs non-empty input")]
    Empty,
    #[error("no test windows to evaluate")]
    EmptyTestSet,
    #[error("model {name}: {source}")]
    Model {
        name: String,
        #[source]
        source: ModelError,
    },
}

fn check_pair(actual: &[f64], forecast: &[f64]) -> Result<(), MetricsError> {
    if actual.len() != forecast.len() {
        return Err(MetricsError::LengthMismatch {
            actual: actual.len(),
            forecast: forecast.len(),
        });
    }
    if actual.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn mse(actual: &[f64], forecast: &[f64]) -> Result<f64, MetricsError> {
    check_pair(actual, forecast)?;
    let sum: f64 = actual.iter().zip(forecast).map(|(a, f)| (a - f) * (a - f)).sum();
    Ok(sum / actual.len() as f64)
}

/// Mean absolute percentage error, in percent.
pub fn mape(actual: &[f64], forecast: &[f64]) -> Result<f64, MetricsError> {
    check_pair(actual, forecast)?;
    let sum: f64 = actual
        .iter()
        .zip(forecast)
        .map(|(a, f)| (a - f).abs() / a.abs().max(MAPE_EPSILON))
        .sum();
    Ok(100.0 * sum / actual.len() as f64)
}

/// Unconstrained DTW with absolute-difference point cost. Returns the
/// cumulative cost of the cheapest monotone path from `(0, 0)` to
/// `(n-1, m-1)`, not normalized by path length.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut curr = vec![f64::INFINITY; m];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            let cost = (ai - bj).abs();
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => curr[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(curr[j - 1]).min(prev[j - 1]),
            };
            curr[j] = best + cost;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m - 1])
}

/// Repeats the last lookback value `horizon` times.
pub fn persistence_forecast(lookback: &[f64], horizon: usize) -> Vec<f64> {
    let last = lookback.last().copied().unwrap_or(0.0);
    vec![last; horizon]
}

/// Anything that maps a lookback segment to a horizon forecast.
pub trait Forecaster {
    fn forecast(&self, lookback: &[f64], horizon: usize) -> Result<Vec<f64>, ModelError>;
}

pub struct Persistence;

impl Forecaster for Persistence {
    fn forecast(&self, lookback: &[f64], horizon: usize) -> Result<Vec<f64>, ModelError> {
        Ok(persistence_forecast(lookback, horizon))
    }
}

impl Forecaster for NBeatsModel {
    fn forecast(&self, lookback: &[f64], _horizon: usize) -> Result<Vec<f64>, ModelError> {
        NBeatsModel::forecast(self, lookback)
    }
}

impl<F> Forecaster for F
where
    F: Fn(&[f64], usize) -> Vec<f64>,
{
    fn forecast(&self, lookback: &[f64], horizon: usize) -> Result<Vec<f64>, ModelError> {
        Ok(self(lookback, horizon))
    }
}

/// Aggregate scores of one model; MSE and DTW in raw scaled units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub mse: f64,
    pub mape: f64,
    pub dtw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub model: String,
    pub sample: String,
    pub mse: f64,
    pub mape: f64,
    pub dtw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples_evaluated: usize,
    pub rows: Vec<EvalRow>,
    pub details: Vec<SampleScore>,
}

/// Scores the persistence baseline and every named model on `test_set`.
/// Aggregates are arithmetic means accumulated in sample order.
pub fn evaluate(
    models: &[(&str, &dyn Forecaster)],
    test_set: &[TimeSeriesWindow],
) -> Result<EvalReport, MetricsError> {
    if test_set.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let baseline: (&str, &dyn Forecaster) = (PERSISTENCE, &Persistence);
    let mut rows = Vec::with_capacity(models.len() + 1);
    let mut details = Vec::with_capacity((models.len() + 1) * test_set.len());
    for &(name, model) in std::iter::once(&baseline).chain(models) {
        let mut sums = [0.0; 3];
        for window in test_set {
            let forecast = model
                .forecast(&window.lookback, window.horizon.len())
                .map_err(|source| MetricsError::Model {
                    name: name.to_string(),
                    source,
                })?;
            let score = SampleScore {
                model: name.to_string(),
                sample: window.id(),
                mse: mse(&window.horizon, &forecast)?,
                mape: mape(&window.horizon, &forecast)?,
                dtw: dtw(&window.horizon, &forecast)?,
            };
            sums[0] += score.mse;
            sums[1] += score.mape;
            sums[2] += score.dtw;
            details.push(score);
        }
        let n = test_set.len() as f64;
        rows.push(EvalRow {
            model: name.to_string(),
            mse: sums[0] / n,
            mape: sums[1] / n,
            dtw: sums[2] / n,
        });
    }
    Ok(EvalReport {
        samples_evaluated: test_set.len(),
        rows,
        details,
    })
}

impl EvalReport {
    pub fn row(&self, model: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Human-readable table with the columns Model Configuration, MSE, MAPE, DTW.
    pub fn to_text_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .chain(std::iter::once("Model Configuration".len()))
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {} test samples; MSE and DTW in raw scaled units (multiply by 1e4 and 1e3 for the conventional 1e-4 / 1e-3 display); MAPE in percent",
            self.samples_evaluated
        );
        let _ = writeln!(out, "{:<width$} | {:>12} | {:>10} | {:>12}", "Model Configuration", "MSE", "MAPE", "DTW");
        let _ = writeln!(out, "{}", "-".repeat(width + 43));
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$} | {:>12.6e} | {:>10.4} | {:>12.6e}", r.model, r.mse, r.mape, r.dtw);
        }
        out
    }

    /// Aggregate rows as delimited text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,mse,mape,dtw\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.model, r.mse, r.mape, r.dtw);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
