//! Command-line front end. Parsing lives here so the binary stays a thin
//! shell and the commands can be driven from tests.

use std::collections::BTreeSet;
use std::error::Error;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{analyze, AnalysisReport};
use crate::config::AppConfig;
use crate::data::{generate_synthetic, load_bundle, split_by_patient, write_bundle, DatasetBundle};
use crate::metrics::{evaluate, Forecaster};
use crate::model::NBeatsModel;
use crate::model_io::{load_model, save_model};
use crate::plot::{render_record, PlotLayout};
use crate::preprocess::{inverse_scale, run_pipeline, PipelineReport, TimeSeriesWindow};
use crate::tensor::seeded_rng;
use crate::train::train;

pub type CliResult<T = ()> = Result<T, Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(name = "nbeats", version, about = "N-BEATS forecasting of ICU mean blood pressure")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort as CSV files.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split; writes the model and `<out>.loss.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: DataArgs,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-window forecasts (mmHg) with their stack decomposition as CSV.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score persistence and each model; writes `<out>.txt` and `<out>.json`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: DataArgs,
        /// Model file; repeat for several models.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Output prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trend-mismatch analysis; writes `<out>.txt` and `<out>.json`.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        outcomes: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Output prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render analysed windows as SVG.
    Plot {
        /// JSON written by `analyze`.
        #[arg(long)]
        analysis: PathBuf,
        /// Window id (`patient@cutoff`); without it every flagged window is drawn.
        #[arg(long)]
        record: Option<String>,
        /// SVG file with --record, otherwise a directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding series.csv and diagnoses.csv.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Valid,
    Test,
    All,
}

impl Common {
    fn config(&self) -> CliResult<AppConfig> {
        let config = match &self.config {
            Some(path) => AppConfig::load(path)?,
            None => AppConfig::default(),
        };
        Ok(match self.seed {
            Some(seed) => config.with_seed(seed),
            None => config,
        })
    }
}

fn select(bundle: &DatasetBundle, config: &AppConfig, split: SplitName) -> CliResult<DatasetBundle> {
    let [train, valid, test] = split_by_patient(bundle, config.split.fractions(), config.split.seed)?;
    Ok(match split {
        SplitName::Train => train,
        SplitName::Valid => valid,
        SplitName::Test => test,
        SplitName::All => bundle.clone(),
    })
}

fn windows(bundle: &DatasetBundle, config: &AppConfig, label: &str) -> (Vec<TimeSeriesWindow>, PipelineReport) {
    let (windows, report) = run_pipeline(&bundle.episodes(), &config.pipeline);
    eprintln!(
        "{label}: {} episodes, {} windows accepted ({} missing diagnosis, {} all missing, {} short coverage, {} low variability, {} values clipped)",
        report.total,
        report.accepted,
        report.missing_diagnosis,
        report.all_missing,
        report.insufficient_coverage,
        report.low_variability,
        report.clipped_values
    );
    (windows, report)
}

fn load_checked(path: &Path, config: &AppConfig) -> CliResult<NBeatsModel> {
    let model = load_model(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let p = &config.pipeline;
    if model.lookback() != p.lookback_steps || model.horizon() != p.horizon_steps {
        return Err(format!(
            "{}: model lookback/horizon {}/{} incompatible with data windows {}/{}",
            path.display(),
            model.lookback(),
            model.horizon(),
            p.lookback_steps,
            p.horizon_steps
        )
        .into());
    }
    Ok(model)
}

fn write(path: &Path, contents: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).map_err(|e| format!("writing {}: {e}", path.display()).into())
}

/// `prefix` with `suffix` appended to its file name.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth { common, out } => {
            let config = common.config()?;
            let bundle = generate_synthetic(&config.synthetic)?;
            write_bundle(&bundle, &out)?;
            eprintln!(
                "wrote {} patients, {} episodes, {} drug events to {}",
                bundle.series.len(),
                bundle.diagnoses.len(),
                bundle.events.len(),
                out.display()
            );
        }
        Command::Train { common, input, out } => {
            let config = common.config()?;
            let bundle = load_bundle(&input.data, None, None)?;
            let (train_set, _) = windows(&select(&bundle, &config, SplitName::Train)?, &config, "train");
            let (valid_set, _) = windows(&select(&bundle, &config, SplitName::Valid)?, &config, "valid");
            let mut model = NBeatsModel::new(config.model.clone(), &mut seeded_rng(config.training.seed))?;
            let report = train(&mut model, &train_set, &valid_set, &config.training)?;
            save_model(&model, &out)?;
            write(&with_suffix(&out, ".loss.csv"), &report.to_csv())?;
            eprintln!(
                "trained {} epochs; best epoch {:?}, validation MSE {:?}",
                report.history.len(),
                report.best_epoch,
                report.best_valid_mse
            );
        }
        Command::Forecast {
            common,
            input,
            model,
            split,
            out,
        } => {
            let config = common.config()?;
            let model = load_checked(&model, &config)?;
            let bundle = load_bundle(&input.data, None, None)?;
            let (set, _) = windows(&select(&bundle, &config, split)?, &config, "forecast");
            let scale = config.pipeline.scale_max;
            let names: Vec<String> = (0..model.stacks.len()).map(|i| model.stack_name(i)).collect();
            let mut csv = format!("window_id,step,actual,forecast,{}\n", names.join(","));
            for w in &set {
                let d = model.forward(&w.lookback)?;
                let actual = inverse_scale(&w.horizon, scale);
                let total = inverse_scale(&d.total, scale);
                let partials: Vec<Vec<f64>> = d.partials.iter().map(|(_, p)| inverse_scale(p, scale)).collect();
                for k in 0..total.len() {
                    let _ = write!(csv, "{},{},{},{}", w.id(), k, actual[k], total[k]);
                    for p in &partials {
                        let _ = write!(csv, ",{}", p[k]);
                    }
                    csv.push('\n');
                }
            }
            write(&out, &csv)?;
        }
        Command::Evaluate {
            common,
            input,
            model,
            split,
            out,
        } => {
            let config = common.config()?;
            let models = model
                .iter()
                .map(|p| load_checked(p, &config))
                .collect::<CliResult<Vec<_>>>()?;
            let names = model_names(&model, &models);
            let bundle = load_bundle(&input.data, None, None)?;
            let (set, _) = windows(&select(&bundle, &config, split)?, &config, "evaluate");
            let named: Vec<(&str, &dyn Forecaster)> = names
                .iter()
                .zip(&models)
                .map(|(n, m)| (n.as_str(), m as &dyn Forecaster))
                .collect();
            let report = evaluate(&named, &set)?;
            write(&with_suffix(&out, ".txt"), &report.to_text_table())?;
            write(&with_suffix(&out, ".json"), &report.to_json())?;
            print!("{}", report.to_text_table());
        }
        Command::Analyze {
            common,
            input,
            model,
            events,
            outcomes,
            split,
            out,
        } => {
            let config = common.config()?;
            let model = load_checked(&model, &config)?;
            let bundle = load_bundle(&input.data, events.as_deref(), outcomes.as_deref())?;
            let part = select(&bundle, &config, split)?;
            let (set, _) = windows(&part, &config, "analyze");
            let outcomes = outcomes.is_some().then_some(part.outcomes.as_slice());
            let report = analyze(&model, &set, &part.events, outcomes, config.analysis_settings())?;
            write(&with_suffix(&out, ".txt"), &report.summary())?;
            write(&with_suffix(&out, ".json"), &report.to_json())?;
            print!("{}", report.summary());
        }
        Command::Plot { analysis, record, out } => {
            let text = fs::read_to_string(&analysis).map_err(|e| format!("{}: {e}", analysis.display()))?;
            let report: AnalysisReport = serde_json::from_str(&text)?;
            let layout = PlotLayout::from(&report);
            match record {
                Some(id) => {
                    let r = report.record(&id).ok_or_else(|| format!("unknown record id {id}"))?;
                    write(&out, &render_record(r, layout))?;
                }
                None => {
                    fs::create_dir_all(&out)?;
                    for r in report.records.iter().filter(|r| r.in_top_quartile) {
                        write(&out.join(svg_file_name(&r.window_id)), &render_record(r, layout))?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Configuration labels, disambiguated by file stem when repeated.
fn model_names(paths: &[PathBuf], models: &[NBeatsModel]) -> Vec<String> {
    let labels: Vec<&str> = models.iter().map(|m| m.configuration().label()).collect();
    let mut seen = BTreeSet::new();
    let repeated: BTreeSet<&str> = labels.iter().copied().filter(|l| !seen.insert(*l)).collect();
    labels
        .iter()
        .zip(paths)
        .map(|(label, path)| {
            if repeated.contains(label) {
                let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
                format!("{label} ({stem})")
            } else {
                label.to_string()
            }
        })
        .collect()
}

/// Window ids contain `@`; keep file names portable.
pub fn svg_file_name(window_id: &str) -> String {
    let safe: String = window_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.svg")
}
