//! CSV ingestion and export, synthetic cohorts and patient-level splits.
//!
//! File schemas (UTF-8, comma separated, header row required):
//!
//! | file            | header                                   |
//! |-----------------|------------------------------------------|
//! | series.csv      | `patient_id,offset_min,mbp`              |
//! | diagnoses.csv   | `patient_id,diagnosis_min`               |
//! | events.csv      | `patient_id,drug_name,start_min,end_min` |
//! | outcomes.csv    | `patient_id,died`                        |
//!
//! An empty `mbp` cell or `∅` marks a missing reading. `died` accepts
//! `0`/`1`/`true`/`false` and is written as `0`/`1`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{DrugEvent, OutcomeLabel};
use crate::preprocess::RawSeries;
use crate::tensor::{seeded_rng, SeededRng};

pub const SERIES_HEADER: [&str; 3] = ["patient_id", "offset_min", "mbp"];
pub const DIAGNOSES_HEADER: [&str; 2] = ["patient_id", "diagnosis_min"];
pub const EVENTS_HEADER: [&str; 4] = ["patient_id", "drug_name", "start_min", "end_min"];
pub const OUTCOMES_HEADER: [&str; 2] = ["patient_id", "died"];

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: header must be `{expected}`, found `{found}`")]
    Header {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: {message}")]
    Row {
        path: String,
        line: u64,
        message: String,
    },
    #[error("unknown patient {patient} referenced in {file}")]
    UnknownPatient { patient: String, file: &'static str },
    #[error("need at least {needed} patients to split, have {available}")]
    TooFewPatients { needed: usize, available: usize },
    #[error("invalid split fractions {0:?}: must be positive and sum to 1")]
    BadFractions([f64; 3]),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub patient_id: String,
    pub diagnosis_min: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub format_version: u32,
}

/// Everything known about a cohort. `series` holds one recording per patient
/// (without diagnosis time); [`DatasetBundle::episodes`] pairs them with
/// every diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub series: Vec<RawSeries>,
    pub diagnoses: Vec<Diagnosis>,
    pub events: Vec<DrugEvent>,
    pub outcomes: Vec<OutcomeLabel>,
    pub provenance: Provenance,
}

impl DatasetBundle {
    /// Checks that every diagnosis, event and outcome names a known patient.
    pub fn validate(&self) -> Result<(), DataError> {
        let known: BTreeSet<&str> = self.series.iter().map(|s| s.patient_id.as_str()).collect();
        let unknown = |id: &str, file| {
            if known.contains(id) {
                Ok(())
            } else {
                Err(DataError::UnknownPatient {
                    patient: id.to_string(),
                    file,
                })
            }
        };
        for d in &self.diagnoses {
            unknown(&d.patient_id, "diagnoses")?;
        }
        for e in &self.events {
            unknown(&e.patient_id, "events")?;
        }
        for o in &self.outcomes {
            unknown(&o.patient_id, "outcomes")?;
        }
        Ok(())
    }

    /// One series per diagnosis, in diagnosis order. Patients without any
    /// diagnosis yield one series with no diagnosis time.
    pub fn episodes(&self) -> Vec<RawSeries> {
        let mut by_patient: HashMap<&str, Vec<i64>> = HashMap::new();
        for d in &self.diagnoses {
            by_patient.entry(d.patient_id.as_str()).or_default().push(d.diagnosis_min);
        }
        let mut out = Vec::new();
        for s in &self.series {
            match by_patient.get(s.patient_id.as_str()) {
                Some(times) => out.extend(times.iter().map(|&t| RawSeries {
                    diagnosis_min: Some(t),
                    ..s.clone()
                })),
                None => out.push(RawSeries {
                    diagnosis_min: None,
                    ..s.clone()
                }),
            }
        }
        out
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.series.iter().map(|s| s.patient_id.clone()).collect()
    }

    /// Sub-bundle restricted to `patients`, preserving record order.
    pub fn restrict(&self, patients: &BTreeSet<String>) -> DatasetBundle {
        DatasetBundle {
            series: self.series.iter().filter(|s| patients.contains(&s.patient_id)).cloned().collect(),
            diagnoses: self.diagnoses.iter().filter(|d| patients.contains(&d.patient_id)).cloned().collect(),
            events: self.events.iter().filter(|e| patients.contains(&e.patient_id)).cloned().collect(),
            outcomes: self.outcomes.iter().filter(|o| patients.contains(&o.patient_id)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }
}

fn read_file(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), DataError> {
    fs::write(path, contents).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parsed rows with their 1-based line numbers.
fn parse_rows(text: &str, origin: &str, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let found = reader
        .headers()
        .map_err(|e| DataError::Row {
            path: origin.into(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(DataError::Header {
            path: origin.into(),
            expected: header.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Row {
            path: origin.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DataError::Row {
                path: origin.into(),
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn row_error(origin: &str, line: u64, message: impl Into<String>) -> DataError {
    DataError::Row {
        path: origin.into(),
        line,
        message: message.into(),
    }
}

fn parse_id(origin: &str, line: u64, s: &str) -> Result<String, DataError> {
    if s.is_empty() {
        Err(row_error(origin, line, "empty patient_id"))
    } else {
        Ok(s.to_string())
    }
}

fn parse_int(origin: &str, line: u64, column: &str, s: &str) -> Result<i64, DataError> {
    s.trim()
        .parse()
        .map_err(|_| row_error(origin, line, format!("{column}: `{s}` is not an integer")))
}

pub fn parse_series_csv(text: &str, origin: &str) -> Result<Vec<RawSeries>, DataError> {
    let rows = parse_rows(text, origin, &SERIES_HEADER)?;
    let mut order: Vec<String> = Vec::new();
    let mut samples: HashMap<String, Vec<(i64, Option<f64>, u64)>> = HashMap::new();
    for (line, f) in rows {
        let id = parse_id(origin, line, &f[0])?;
        let offset = parse_int(origin, line, "offset_min", &f[1])?;
        let raw = f[2].trim();
        let mbp = if raw.is_empty() || raw == "∅" {
            None
        } else {
            let v: f64 = raw
                .parse()
                .map_err(|_| row_error(origin, line, format!("mbp: `{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(row_error(origin, line, format!("mbp: `{raw}` is not finite")));
            }
            Some(v)
        };
        let entry = samples.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Vec::new()
        });
        entry.push((offset, mbp, line));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = samples.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.0);
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(row_error(
                origin,
                w[1].2.max(w[0].2),
                format!("duplicate sample for patient {id} at offset {}", w[0].0),
            ));
        }
        let (timestamps, values) = rows.into_iter().map(|(t, v, _)| (t, v)).unzip();
        out.push(RawSeries {
            patient_id: id,
            timestamps,
            values,
            diagnosis_min: None,
        });
    }
    Ok(out)
}

pub fn parse_diagnoses_csv(text: &str, origin: &str) -> Result<Vec<Diagnosis>, DataError> {
    let mut seen = BTreeSet::new();
    parse_rows(text, origin, &DIAGNOSES_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let d = Diagnosis {
                patient_id: parse_id(origin, line, &f[0])?,
                diagnosis_min: parse_int(origin, line, "diagnosis_min", &f[1])?,
            };
            if !seen.insert((d.patient_id.clone(), d.diagnosis_min)) {
                return Err(row_error(origin, line, "duplicate diagnosis"));
            }
            Ok(d)
        })
        .collect()
}

pub fn parse_events_csv(text: &str, origin: &str) -> Result<Vec<DrugEvent>, DataError> {
    parse_rows(text, origin, &EVENTS_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let e = DrugEvent {
                patient_id: parse_id(origin, line, &f[0])?,
                drug_name: f[1].clone(),
                start_min: parse_int(origin, line, "start_min", &f[2])?,
                end_min: parse_int(origin, line, "end_min", &f[3])?,
            };
            if e.drug_name.is_empty() {
                return Err(row_error(origin, line, "empty drug_name"));
            }
            if e.start_min >= e.end_min {
                return Err(row_error(
                    origin,
                    line,
                    format!("start_min {} must be before end_min {}", e.start_min, e.end_min),
                ));
            }
            Ok(e)
        })
        .collect()
}

pub fn parse_outcomes_csv(text: &str, origin: &str) -> Result<Vec<OutcomeLabel>, DataError> {
    let mut seen = BTreeSet::new();
    parse_rows(text, origin, &OUTCOMES_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let patient_id = parse_id(origin, line, &f[0])?;
            let died = match f[1].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(row_error(origin, line, format!("died: `{other}` is not 0/1"))),
            };
            if !seen.insert(patient_id.clone()) {
                return Err(row_error(origin, line, format!("duplicate outcome for patient {patient_id}")));
            }
            Ok(OutcomeLabel { patient_id, died })
        })
        .collect()
}

pub fn load_series_csv(path: impl AsRef<Path>) -> Result<Vec<RawSeries>, DataError> {
    let path = path.as_ref();
    parse_series_csv(&read_file(path)?, &path.display().to_string())
}

pub fn load_diagnoses_csv(path: impl AsRef<Path>) -> Result<Vec<Diagnosis>, DataError> {
    let path = path.as_ref();
    parse_diagnoses_csv(&read_file(path)?, &path.display().to_string())
}

pub fn load_events_csv(path: impl AsRef<Path>) -> Result<Vec<DrugEvent>, DataError> {
    let path = path.as_ref();
    parse_events_csv(&read_file(path)?, &path.display().to_string())
}

pub fn load_outcomes_csv(path: impl AsRef<Path>) -> Result<Vec<OutcomeLabel>, DataError> {
    let path = path.as_ref();
    parse_outcomes_csv(&read_file(path)?, &path.display().to_string())
}

pub fn series_to_csv(series: &[RawSeries]) -> String {
    let mut out = SERIES_HEADER.join(",") + "\n";
    for s in series {
        for (t, v) in s.timestamps.iter().zip(&s.values) {
            match v {
                Some(v) => writeln!(out, "{},{},{}", s.patient_id, t, v),
                None => writeln!(out, "{},{},", s.patient_id, t),
            }
            .expect("write to string");
        }
    }
    out
}

pub fn diagnoses_to_csv(diagnoses: &[Diagnosis]) -> String {
    let mut out = DIAGNOSES_HEADER.join(",") + "\n";
    for d in diagnoses {
        let _ = writeln!(out, "{},{}", d.patient_id, d.diagnosis_min);
    }
    out
}

pub fn events_to_csv(events: &[DrugEvent]) -> String {
    let mut out = EVENTS_HEADER.join(",") + "\n";
    for e in events {
        let _ = writeln!(out, "{},{},{},{}", e.patient_id, e.drug_name, e.start_min, e.end_min);
    }
    out
}

pub fn outcomes_to_csv(outcomes: &[OutcomeLabel]) -> String {
    let mut out = OUTCOMES_HEADER.join(",") + "\n";
    for o in outcomes {
        let _ = writeln!(out, "{},{}", o.patient_id, u8::from(o.died));
    }
    out
}

pub const SERIES_FILE: &str = "series.csv";
pub const DIAGNOSES_FILE: &str = "diagnoses.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const OUTCOMES_FILE: &str = "outcomes.csv";

/// Reads `series.csv` and `diagnoses.csv` from `dir`; events and outcomes
/// come from explicit paths when given.
pub fn load_bundle(dir: &Path, events: Option<&Path>, outcomes: Option<&Path>) -> Result<DatasetBundle, DataError> {
    let bundle = DatasetBundle {
        series: load_series_csv(dir.join(SERIES_FILE))?,
        diagnoses: load_diagnoses_csv(dir.join(DIAGNOSES_FILE))?,
        events: events.map(load_events_csv).transpose()?.unwrap_or_default(),
        outcomes: outcomes.map(load_outcomes_csv).transpose()?.unwrap_or_default(),
        provenance: Provenance {
            source: dir.display().to_string(),
            format_version: BUNDLE_FORMAT_VERSION,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes all four CSV files into `dir`, creating it if needed.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join(SERIES_FILE), &series_to_csv(&bundle.series))?;
    write_file(&dir.join(DIAGNOSES_FILE), &diagnoses_to_csv(&bundle.diagnoses))?;
    write_file(&dir.join(EVENTS_FILE), &events_to_csv(&bundle.events))?;
    write_file(&dir.join(OUTCOMES_FILE), &outcomes_to_csv(&bundle.outcomes))?;
    Ok(())
}

/// Splits patients into train/valid/test. Sizes use largest-remainder
/// rounding of `fractions · patients`; membership is a seeded shuffle of the
/// sorted patient ids.
pub fn split_by_patient(
    bundle: &DatasetBundle,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[DatasetBundle; 3], DataError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| f.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let mut ids: Vec<String> = bundle
        .patient_ids()
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = ids.len();
    if n < fractions.len() {
        return Err(DataError::TooFewPatients {
            needed: fractions.len(),
            available: n,
        });
    }
    let sizes = largest_remainder(n, &fractions);
    seeded_rng(seed).shuffle(&mut ids);

    let mut start = 0;
    let parts: Vec<DatasetBundle> = sizes
        .iter()
        .map(|&k| {
            let members: BTreeSet<String> = ids[start..start + k].iter().cloned().collect();
            start += k;
            bundle.restrict(&members)
        })
        .collect();
    Ok(parts.try_into().expect("three parts"))
}

/// Integer sizes summing to `n`, closest to `n · fractions` by largest remainder.
/// Ties go to the earlier part.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut by_remainder: Vec<usize> = (0..fractions.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in by_remainder.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Shape of the drug effect added to MBP from the infusion start onwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrugEffectShape {
    /// Full magnitude from the infusion start.
    Step,
    /// Linear rise reaching full magnitude at the infusion end.
    Ramp,
}

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub patients: usize,
    pub episodes_per_patient: usize,
    pub seed: u64,
    pub step_min: i64,
    /// Samples per extraction window (lookback + horizon).
    pub window_steps: usize,
    pub horizon_steps: usize,
    /// Extra recording before each window, minutes.
    pub lead_min: i64,
    /// Distance between consecutive episode starts, minutes.
    pub episode_spacing_min: i64,
    pub baseline_range: [f64; 2],
    /// mmHg per hour.
    pub slope_range: [f64; 2],
    pub amplitude_range: [f64; 2],
    /// Seasonal period, minutes.
    pub period_range: [f64; 2],
    pub noise_std: f64,
    pub missing_rate: f64,
    pub drug_probability: f64,
    /// Infusion start relative to the forecast cut-off, minutes.
    pub drug_onset_min: i64,
    pub drug_duration_min: i64,
    /// mmHg.
    pub drug_magnitude: f64,
    pub drug_shape: DrugEffectShape,
    pub drug_names: Vec<String>,
    /// Death probability for a patient with no drug-affected episode.
    pub mortality_base: f64,
    /// Added to the death log-odds per unit share of drug-affected episodes.
    pub mortality_link: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            patients: 200,
            episodes_per_patient: 3,
            seed: 0,
            step_min: 5,
            window_steps: 108,
            horizon_steps: 36,
            lead_min: 60,
            episode_spacing_min: 720,
            baseline_range: [65.0, 95.0],
            slope_range: [-5.0, 5.0],
            amplitude_range: [2.0, 10.0],
            period_range: [60.0, 240.0],
            noise_std: 1.5,
            missing_rate: 0.02,
            drug_probability: 0.3,
            drug_onset_min: 30,
            drug_duration_min: 120,
            drug_magnitude: 20.0,
            drug_shape: DrugEffectShape::Step,
            drug_names: vec!["norepinephrine".into(), "vasopressin".into()],
            mortality_base: 0.92,
            mortality_link: -0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::BadSpec(m.to_string()));
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.patients == 0 || self.episodes_per_patient == 0 {
            return bad("patients and episodes_per_patient must be positive");
        }
        if self.step_min <= 0 || self.window_steps == 0 || self.horizon_steps >= self.window_steps {
            return bad("step_min, window_steps and horizon_steps are inconsistent");
        }
        let window_min = (self.window_steps as i64 - 1) * self.step_min;
        if self.lead_min < 0 || self.episode_spacing_min <= self.lead_min + window_min {
            return bad("episode_spacing_min must exceed lead_min plus the window span");
        }
        if ![self.baseline_range, self.slope_range, self.amplitude_range, self.period_range]
            .into_iter()
            .all(range_ok)
        {
            return bad("ranges must be finite with low <= high");
        }
        if self.period_range[0] <= 0.0 {
            return bad("period_range must be positive");
        }
        for p in [self.missing_rate, self.drug_probability, self.mortality_base] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.noise_std < 0.0 || self.drug_duration_min <= 0 || self.drug_names.is_empty() {
            return bad("noise_std >= 0, drug_duration_min > 0 and a drug name are required");
        }
        Ok(())
    }

    fn cutoff_offset(&self) -> i64 {
        self.lead_min + (self.window_steps - self.horizon_steps) as i64 * self.step_min
    }
}

fn draw(rng: &mut SeededRng, range: [f64; 2]) -> f64 {
    rng.uniform(range[0], range[1])
}

/// Deterministic synthetic cohort: every episode is baseline + linear trend +
/// sinusoid + Gaussian noise, optionally with a vasoactive infusion starting
/// after the forecast cut-off that shifts MBP by `drug_magnitude`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle, DataError> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let width = format!("{}", spec.patients - 1).len();
    let span = spec.lead_min + (spec.window_steps as i64 - 1) * spec.step_min;
    let samples = (span / spec.step_min + 1) as usize;

    let mut bundle = DatasetBundle {
        series: Vec::with_capacity(spec.patients),
        diagnoses: Vec::new(),
        events: Vec::new(),
        outcomes: Vec::with_capacity(spec.patients),
        provenance: Provenance {
            source: format!("synthetic(seed={})", spec.seed),
            format_version: BUNDLE_FORMAT_VERSION,
        },
    };

    for p in 0..spec.patients {
        let id = format!("S{:0width$}", p, width = width);
        let mut timestamps = Vec::with_capacity(samples * spec.episodes_per_patient);
        let mut values = Vec::with_capacity(samples * spec.episodes_per_patient);
        let mut affected = 0usize;
        for e in 0..spec.episodes_per_patient {
            let start = e as i64 * spec.episode_spacing_min;
            let baseline = draw(&mut rng, spec.baseline_range);
            let slope = draw(&mut rng, spec.slope_range);
            let amplitude = draw(&mut rng, spec.amplitude_range);
            let period = draw(&mut rng, spec.period_range);
            let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            let cutoff = start + spec.cutoff_offset();
            let drug = rng.bernoulli(spec.drug_probability).then(|| {
                let name = spec.drug_names[rng.index(spec.drug_names.len())].clone();
                DrugEvent {
                    patient_id: id.clone(),
                    drug_name: name,
                    start_min: cutoff + spec.drug_onset_min,
                    end_min: cutoff + spec.drug_onset_min + spec.drug_duration_min,
                }
            });
            for k in 0..samples {
                let t = start + k as i64 * spec.step_min;
                let hours = (t - start) as f64 / 60.0;
                let mut v = baseline
                    + slope * hours
                    + amplitude * (2.0 * std::f64::consts::PI * (t - start) as f64 / period + phase).sin()
                    + spec.noise_std * rng.normal();
                if let Some(d) = &drug {
                    if t >= d.start_min {
                        let share = match spec.drug_shape {
                            DrugEffectShape::Step => 1.0,
                            DrugEffectShape::Ramp => {
                                ((t - d.start_min) as f64 / (d.end_min - d.start_min) as f64).min(1.0)
                            }
                        };
                        v += spec.drug_magnitude * share;
                    }
                }
                let missing = rng.bernoulli(spec.missing_rate);
                timestamps.push(t);
                values.push((!missing).then_some(v));
            }
            bundle.diagnoses.push(Diagnosis {
                patient_id: id.clone(),
                diagnosis_min: start + span,
            });
            if let Some(d) = drug {
                affected += 1;
                bundle.events.push(d);
            }
        }
        let share = affected as f64 / spec.episodes_per_patient as f64;
        let base = spec.mortality_base.clamp(1e-9, 1.0 - 1e-9);
        let logit = (base / (1.0 - base)).ln() + spec.mortality_link * share;
        let died = rng.bernoulli(1.0 / (1.0 + (-logit).exp()));
        bundle.series.push(RawSeries {
            patient_id: id.clone(),
            timestamps,
            values,
            diagnosis_min: None,
        });
        bundle.outcomes.push(OutcomeLabel { patient_id: id, died });
    }
    Ok(bundle)
}
