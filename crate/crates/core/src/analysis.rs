//! Trend-mismatch study: compare the model's trend partial with a polynomial
//! fit of what actually happened, flag the worst quartile by DTW, look for
//! drug infusions after the cut-off and compare mortality across groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::build_trend_basis;
use crate::metrics::{dtw, MetricsError};
use crate::model::{BasisKind, Configuration, ModelError, NBeatsModel};
use crate::preprocess::TimeSeriesWindow;
use crate::tensor::least_squares;

/// Default share of records flagged as mismatched.
pub const TOP_QUANTILE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("trend analysis needs an interpretable model")]
    UnsupportedConfiguration,
    #[error("horizon of length {horizon} cannot determine a degree-{degree} polynomial")]
    HorizonTooShort { horizon: usize, degree: usize },
    #[error("missing outcome for patients: {}", .0.join(", "))]
    MissingOutcomes(Vec<String>),
    #[error("quantile {0} outside (0, 1]")]
    BadQuantile(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// An infusion interval `[start_min, end_min)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugEvent {
    pub patient_id: String,
    pub drug_name: String,
    pub start_min: i64,
    pub end_min: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeLabel {
    pub patient_id: String,
    pub died: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRecord {
    pub window_id: String,
    pub patient_id: String,
    pub cutoff_min: i64,
    /// Scaled lookback followed by scaled horizon.
    pub observed: Vec<f64>,
    pub forecast_trend: Vec<f64>,
    pub actual_trend: Vec<f64>,
    pub trend_dtw: f64,
    pub drug_events: Vec<DrugEvent>,
    pub in_top_quartile: bool,
}

/// The trend-stack partial of an interpretable model.
pub fn forecast_trend(model: &NBeatsModel, window: &TimeSeriesWindow) -> Result<Vec<f64>, AnalysisError> {
    if model.configuration() != Configuration::Interpretable {
        return Err(AnalysisError::UnsupportedConfiguration);
    }
    let decomposition = model.forward(&window.lookback)?;
    decomposition
        .partial("trend")
        .map(<[f64]>::to_vec)
        .ok_or(AnalysisError::UnsupportedConfiguration)
}

/// Least-squares polynomial of degree `degree` fitted to `horizon` on the
/// normalized grid and evaluated on the same grid.
pub fn actual_trend(horizon: &[f64], degree: usize) -> Result<Vec<f64>, AnalysisError> {
    if horizon.len() <= degree {
        return Err(AnalysisError::HorizonTooShort {
            horizon: horizon.len(),
            degree,
        });
    }
    let basis = build_trend_basis(horizon.len(), degree).map_err(ModelError::from)?;
    let coefficients = least_squares(&basis, horizon).map_err(ModelError::from)?;
    Ok(basis.matvec(&coefficients).map_err(ModelError::from)?)
}

/// Flags the `⌈quantile·N⌉` records with the largest `trend_dtw`; ties keep
/// input order. Returns the number flagged.
pub fn rank_mismatch(records: &mut [MismatchRecord], quantile: f64) -> Result<usize, AnalysisError> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(AnalysisError::BadQuantile(quantile));
    }
    let n = records.len();
    let flagged = ((quantile * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal scores keep their input order.
    order.sort_by(|&a, &b| records[b].trend_dtw.total_cmp(&records[a].trend_dtw));
    for r in records.iter_mut() {
        r.in_top_quartile = false;
    }
    for &i in &order[..flagged] {
        records[i].in_top_quartile = true;
    }
    Ok(flagged)
}

/// Events of the record's patient whose `[start, end)` intersects the
/// forecast interval `[cutoff, cutoff + horizon_minutes)`.
pub fn drug_overlap(record: &MismatchRecord, events: &[DrugEvent], horizon_minutes: i64) -> Vec<DrugEvent> {
    let (lo, hi) = (record.cutoff_min, record.cutoff_min + horizon_minutes);
    events
        .iter()
        .filter(|e| e.patient_id == record.patient_id && e.start_min < hi && e.end_min > lo)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub patients: usize,
    pub deaths: usize,
    /// `deaths / patients`; `None` for an empty group.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalitySplit {
    /// Records outside the flagged quantile.
    pub matched: GroupRate,
    /// Flagged records.
    pub mismatched: GroupRate,
}

/// Per-patient mortality in the matched and mismatched groups. A patient with
/// windows in both groups counts once in each.
pub fn mortality_split(records: &[MismatchRecord], outcomes: &[OutcomeLabel]) -> Result<MortalitySplit, AnalysisError> {
    let died: BTreeMap<&str, bool> = outcomes.iter().map(|o| (o.patient_id.as_str(), o.died)).collect();
    let missing: BTreeSet<String> = records
        .iter()
        .filter(|r| !died.contains_key(r.patient_id.as_str()))
        .map(|r| r.patient_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(AnalysisError::MissingOutcomes(missing.into_iter().collect()));
    }
    let group = |flagged: bool| {
        let patients: BTreeSet<&str> = records
            .iter()
            .filter(|r| r.in_top_quartile == flagged)
            .map(|r| r.patient_id.as_str())
            .collect();
        let deaths = patients.iter().filter(|p| died[*p]).count();
        GroupRate {
            patients: patients.len(),
            deaths,
            rate: (!patients.is_empty()).then(|| deaths as f64 / patients.len() as f64),
        }
    };
    Ok(MortalitySplit {
        matched: group(false),
        mismatched: group(true),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub quantile: f64,
    pub flagged: usize,
    pub trend_degree: usize,
    pub step_min: i64,
    pub lookback_steps: usize,
    pub scale_max: f64,
    pub records: Vec<MismatchRecord>,
    pub mortality: Option<MortalitySplit>,
}

/// Layout information the report needs to map samples back to clock time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisSettings {
    pub quantile: f64,
    pub step_min: i64,
    pub scale_max: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            quantile: TOP_QUANTILE,
            step_min: 5,
            scale_max: 190.0,
        }
    }
}

/// Builds a [`MismatchRecord`] for every window, ranks them and, when
/// outcomes are supplied, splits mortality by group.
pub fn analyze(
    model: &NBeatsModel,
    windows: &[TimeSeriesWindow],
    events: &[DrugEvent],
    outcomes: Option<&[OutcomeLabel]>,
    settings: AnalysisSettings,
) -> Result<AnalysisReport, AnalysisError> {
    if model.configuration() != Configuration::Interpretable {
        return Err(AnalysisError::UnsupportedConfiguration);
    }
    let degree = model
        .stacks
        .iter()
        .find_map(|s| match s.kind {
            BasisKind::Trend { degree } => Some(degree),
            _ => None,
        })
        .ok_or(AnalysisError::UnsupportedConfiguration)?;
    let horizon_minutes = model.horizon() as i64 * settings.step_min;

    let mut records = Vec::with_capacity(windows.len());
    for w in windows {
        let forecast = forecast_trend(model, w)?;
        let actual = actual_trend(&w.horizon, degree)?;
        let mut record = MismatchRecord {
            window_id: w.id(),
            patient_id: w.patient_id.clone(),
            cutoff_min: w.cutoff_min,
            observed: w.lookback.iter().chain(&w.horizon).copied().collect(),
            trend_dtw: dtw(&actual, &forecast)?,
            forecast_trend: forecast,
            actual_trend: actual,
            drug_events: Vec::new(),
            in_top_quartile: false,
        };
        record.drug_events = drug_overlap(&record, events, horizon_minutes);
        records.push(record);
    }
    let flagged = if records.is_empty() {
        0
    } else {
        rank_mismatch(&mut records, settings.quantile)?
    };
    let mortality = outcomes.map(|o| mortality_split(&records, o)).transpose()?;
    Ok(AnalysisReport {
        quantile: settings.quantile,
        flagged,
        trend_degree: degree,
        step_min: settings.step_min,
        lookback_steps: model.lookback(),
        scale_max: settings.scale_max,
        records,
        mortality,
    })
}

impl AnalysisReport {
    pub fn record(&self, window_id: &str) -> Option<&MismatchRecord> {
        self.records.iter().find(|r| r.window_id == window_id)
    }

    /// Share of flagged and unflagged records that overlap any drug event.
    pub fn drug_fractions(&self) -> (f64, f64) {
        let frac = |flagged: bool| {
            let group: Vec<_> = self.records.iter().filter(|r| r.in_top_quartile == flagged).collect();
            if group.is_empty() {
                0.0
            } else {
                group.iter().filter(|r| !r.drug_events.is_empty()).count() as f64 / group.len() as f64
            }
        };
        (frac(true), frac(false))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-record table followed by group summaries.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# trend mismatch: {} records, top {:.0}% by trend DTW flagged ({} records)",
            self.records.len(),
            self.quantile * 100.0,
            self.flagged
        );
        let _ = writeln!(out, "window,trend_dtw,flagged,drugs_after_cutoff");
        for r in &self.records {
            let drugs: Vec<&str> = r.drug_events.iter().map(|e| e.drug_name.as_str()).collect();
            let _ = writeln!(
                out,
                "{},{:.6e},{},{}",
                r.window_id,
                r.trend_dtw,
                if r.in_top_quartile { "yes" } else { "no" },
                drugs.join(";")
            );
        }
        let (flagged, unflagged) = self.drug_fractions();
        let _ = writeln!(
            out,
            "drug-overlap fraction: flagged {:.3}, unflagged {:.3}",
            flagged, unflagged
        );
        if let Some(m) = &self.mortality {
            let fmt = |g: &GroupRate| match g.rate {
                Some(r) => format!("{:.1}% ({}/{} patients)", r * 100.0, g.deaths, g.patients),
                None => "n/a (no patients)".to_string(),
            };
            let _ = writeln!(out, "mortality, trends matched:    {}", fmt(&m.matched));
            let _ = writeln!(out, "mortality, trends mismatched: {}", fmt(&m.mismatched));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::seeded_rng;

    fn record(patient: &str, score: f64) -> MismatchRecord {
        MismatchRecord {
            window_id: format!("{patient}@0"),
            patient_id: patient.into(),
            cutoff_min: 0,
            observed: vec![],
            forecast_trend: vec![],
            actual_trend: vec![],
            trend_dtw: score,
            drug_events: vec![],
            in_top_quartile: false,
        }
    }

    fn event(start: i64, end: i64) -> DrugEvent {
        DrugEvent {
            patient_id: "p".into(),
            drug_name: "norepinephrine".into(),
            start_min: start,
            end_min: end,
        }
    }

    #[test]
    fn actual_trend_examples() {
        // Exact polynomial is reproduced.
        let h = 12;
        let poly: Vec<f64> = (0..h)
            .map(|j| {
                let t = j as f64 / h as f64;
                0.4 - 0.3 * t + 0.7 * t * t
            })
            .collect();
        let fit = actual_trend(&poly, 2).unwrap();
        for (a, b) in fit.iter().zip(&poly) {
            assert!((a - b).abs() < 1e-9);
        }
        for p in 0..4 {
            let fit = actual_trend(&[0.6; 8], p).unwrap();
            assert!(fit.iter().all(|v| (v - 0.6).abs() < 1e-12));
        }
        assert!(matches!(
            actual_trend(&[0.1, 0.2], 2),
            Err(AnalysisError::HorizonTooShort { .. })
        ));
    }

    #[test]
    fn actual_trend_line_through_alternating_horizon() {
        // Slope 0.8 and intercept 0.2 on t = [0, ¼, ½, ¾], worked by hand and
        // confirmed by the grid search in tests/analysis_oracles.rs.
        let fit = actual_trend(&[0.0, 1.0, 0.0, 1.0], 1).unwrap();
        for (a, b) in fit.iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert!((a - b).abs() < 1e-12, "{fit:?}");
        }
    }

    #[test]
    fn rank_examples() {
        let mut rs: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|&s| record("p", s)).collect();
        assert_eq!(rank_mismatch(&mut rs, 0.25).unwrap(), 1);
        assert_eq!(rs.iter().map(|r| r.in_top_quartile).collect::<Vec<_>>(), [false, false, false, true]);

        let mut ties: Vec<_> = (0..8).map(|_| record("p", 0.5)).collect();
        assert_eq!(rank_mismatch(&mut ties, 0.25).unwrap(), 2);
        assert!(ties[0].in_top_quartile && ties[1].in_top_quartile);
        assert!(ties[2..].iter().all(|r| !r.in_top_quartile));

        let mut one = vec![record("p", 0.1)];
        assert_eq!(rank_mismatch(&mut one, 0.25).unwrap(), 1);
        assert!(one[0].in_top_quartile);

        assert!(rank_mismatch(&mut one, 0.0).is_err());
    }

    #[test]
    fn overlap_boundaries() {
        let mut r = record("p", 0.0);
        r.cutoff_min = 1000;
        let events = vec![event(100, 900), event(1010, 1100), event(800, 1000), event(1180, 1300), event(1179, 1181)];
        let hits = drug_overlap(&r, &events, 180);
        assert_eq!(hits, vec![event(1010, 1100), event(1179, 1181)]);
        let other = DrugEvent {
            patient_id: "q".into(),
            ..event(1010, 1100)
        };
        assert!(drug_overlap(&r, &[other], 180).is_empty());
    }

    fn outcome(p: &str, died: bool) -> OutcomeLabel {
        OutcomeLabel {
            patient_id: p.into(),
            died,
        }
    }

    #[test]
    fn mortality_examples() {
        let mut rs = vec![
            record("a", 0.1),
            record("b", 0.1),
            record("c", 0.1),
            record("d", 0.1),
            record("e", 0.9),
            record("f", 0.9),
        ];
        rs[4].in_top_quartile = true;
        rs[5].in_top_quartile = true;
        let outcomes = [
            outcome("a", true),
            outcome("b", true),
            outcome("c", true),
            outcome("d", false),
            outcome("e", true),
            outcome("f", false),
        ];
        let m = mortality_split(&rs, &outcomes).unwrap();
        assert_eq!(m.matched.rate, Some(0.75));
        assert_eq!(m.mismatched.rate, Some(0.5));

        let all_died: Vec<_> = outcomes.iter().map(|o| outcome(&o.patient_id, true)).collect();
        let m = mortality_split(&rs, &all_died).unwrap();
        assert_eq!((m.matched.rate, m.mismatched.rate), (Some(1.0), Some(1.0)));

        let err = mortality_split(&rs, &outcomes[..3]).unwrap_err();
        assert_eq!(
            err,
            AnalysisError::MissingOutcomes(vec!["d".into(), "e".into(), "f".into()])
        );
    }

    #[test]
    fn mortality_counts_patients_not_windows() {
        let mut rs = vec![record("a", 0.0), record("a", 0.0), record("b", 0.0), record("a", 1.0)];
        rs[3].in_top_quartile = true;
        let m = mortality_split(&rs, &[outcome("a", true), outcome("b", false)]).unwrap();
        assert_eq!((m.matched.patients, m.matched.deaths), (2, 1));
        assert_eq!((m.mismatched.patients, m.mismatched.deaths), (1, 1));
    }

    fn tiny(configuration: Configuration) -> ModelConfig {
        ModelConfig {
            configuration,
            lookback: 8,
            horizon: 4,
            hidden_width: 6,
            trend_degree: 1,
            trend_blocks: 1,
            seasonality_blocks: 1,
            generic_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn window(x: f64) -> TimeSeriesWindow {
        TimeSeriesWindow {
            patient_id: "p".into(),
            lookback: vec![x; 8],
            horizon: vec![x, x + 0.1, x, x + 0.1],
            cutoff_min: 0,
            diagnosis_min: 15,
        }
    }

    #[test]
    fn forecast_trend_requires_interpretable() {
        let generic = NBeatsModel::zeroed(tiny(Configuration::Generic)).unwrap();
        assert_eq!(
            forecast_trend(&generic, &window(0.5)),
            Err(AnalysisError::UnsupportedConfiguration)
        );
        let zero = NBeatsModel::zeroed(tiny(Configuration::Interpretable)).unwrap();
        assert_eq!(forecast_trend(&zero, &window(0.5)).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn trend_and_seasonality_sum_to_total() {
        let m = NBeatsModel::new(tiny(Configuration::Interpretable), &mut seeded_rng(7)).unwrap();
        let w = window(0.4);
        let trend = forecast_trend(&m, &w).unwrap();
        let d = m.forward(&w.lookback).unwrap();
        let season = d.partial("seasonality").unwrap();
        for i in 0..4 {
            assert_eq!(trend[i] + season[i], d.total[i]);
        }
    }

    #[test]
    fn analyze_flags_quartile_and_reports() {
        let m = NBeatsModel::new(tiny(Configuration::Interpretable), &mut seeded_rng(7)).unwrap();
        let windows: Vec<_> = (0..8).map(|i| window(0.1 * i as f64)).collect();
        let report = analyze(&m, &windows, &[], None, AnalysisSettings::default()).unwrap();
        assert_eq!(report.flagged, 2);
        assert_eq!(report.records.iter().filter(|r| r.in_top_quartile).count(), 2);
        assert!(report.records.iter().all(|r| r.drug_events.is_empty()));
        assert!(report.summary().contains("top 25%"));
        let generic = NBeatsModel::zeroed(tiny(Configuration::Generic)).unwrap();
        assert!(analyze(&generic, &windows, &[], None, AnalysisSettings::default()).is_err());
    }
}
