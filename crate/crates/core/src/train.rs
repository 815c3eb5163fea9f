//! Mini-batch Adam training with early stopping on validation MSE.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, NBeatsModel};
use crate::preprocess::TimeSeriesWindow;
use crate::tensor::{seeded_rng, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    /// Seeds batch shuffling; weight initialization takes its own stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 64,
            max_epochs: 500,
            patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("window {window}: expected lookback {lookback} and horizon {horizon}, got {got_lookback} and {got_horizon}")]
    WindowShape {
        window: String,
        lookback: usize,
        horizon: usize,
        got_lookback: usize,
        got_horizon: usize,
    },
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("non-finite training loss at epoch {epoch}, batch {batch}; try a smaller learning rate")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    /// Epoch whose weights were kept, `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_valid_mse: Option<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,valid_mse\n");
        for e in &self.history {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.valid_mse));
        }
        out
    }
}

fn check_windows(model: &NBeatsModel, windows: &[TimeSeriesWindow], name: &'static str) -> Result<(), TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptySet(name));
    }
    for w in windows {
        if w.lookback.len() != model.lookback() || w.horizon.len() != model.horizon() {
            return Err(TrainError::WindowShape {
                window: w.id(),
                lookback: model.lookback(),
                horizon: model.horizon(),
                got_lookback: w.lookback.len(),
                got_horizon: w.horizon.len(),
            });
        }
    }
    Ok(())
}

fn pairs(windows: &[TimeSeriesWindow]) -> impl Iterator<Item = (&[f64], &[f64])> {
    windows.iter().map(|w| (w.lookback.as_slice(), w.horizon.as_slice()))
}

/// Trains `model` in place and leaves it holding the weights of the epoch
/// with the lowest validation MSE.
pub fn train(
    model: &mut NBeatsModel,
    train_set: &[TimeSeriesWindow],
    valid_set: &[TimeSeriesWindow],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    check_windows(model, train_set, "training")?;
    check_windows(model, valid_set, "validation")?;
    if config.batch_size == 0 {
        return Err(TrainError::ZeroBatch);
    }

    let group_lengths: Vec<usize> = model.parameter_slices().iter().map(|s| s.len()).collect();
    let mut adam = AdamState::new(config.adam(), &group_lengths);
    // Stream distinct from the one that initialized the weights.
    let mut rng = seeded_rng(config.seed ^ 0x5eed_ba7c_4e5f_u64);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, NBeatsModel)> = None;
    let mut stale = 0usize;

    for epoch in 0..config.max_epochs {
        rng.shuffle(&mut order);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| (train_set[i].lookback.as_slice(), train_set[i].horizon.as_slice()));
            let (loss, grad) = model.loss_and_gradient(batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            weighted += loss * chunk.len() as f64;
            let grads = grad.parameter_slices();
            let mut params = model.parameter_slices_mut();
            adam.update(&mut params, &grads).map_err(ModelError::from)?;
        }
        let train_mse = weighted / train_set.len() as f64;
        let valid_mse = model.loss(pairs(valid_set))?;
        if !valid_mse.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        history.push(EpochLoss {
            epoch,
            train_mse,
            valid_mse,
        });

        let improved = best.as_ref().is_none_or(|(_, v, _)| valid_mse < *v);
        if improved {
            best = Some((epoch, valid_mse, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, best_valid_mse) = match best {
        Some((epoch, mse, weights)) => {
            *model = weights;
            (Some(epoch), Some(mse))
        }
        None => (None, None),
    };
    Ok(TrainReport {
        history,
        best_epoch,
        best_valid_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Configuration, ModelConfig};

    fn constant_windows(n: usize, offset: u64) -> Vec<TimeSeriesWindow> {
        let mut rng = seeded_rng(offset);
        (0..n)
            .map(|i| {
                let c = rng.uniform(0.3, 0.7);
                TimeSeriesWindow {
                    patient_id: format!("p{i}"),
                    lookback: vec![c; 8],
                    horizon: vec![c; 4],
                    cutoff_min: 0,
                    diagnosis_min: 0,
                }
            })
            .collect()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            configuration: Configuration::Interpretable,
            lookback: 8,
            horizon: 4,
            hidden_width: 16,
            trend_blocks: 1,
            seasonality_blocks: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn learns_constant_windows() {
        let train_set = constant_windows(64, 1);
        let valid_set = constant_windows(16, 2);
        let mut model = NBeatsModel::new(tiny(), &mut seeded_rng(3)).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            max_epochs: 200,
            patience: 200,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &train_set, &valid_set, &config).unwrap();
        let best = report.best_valid_mse.unwrap();
        assert!(best < 1e-6, "validation MSE {best}");
        assert!(report.history.len() <= 200);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut model = NBeatsModel::new(tiny(), &mut seeded_rng(3)).unwrap();
        let before = model.clone();
        let config = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &constant_windows(4, 1), &constant_windows(2, 2), &config).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(report.best_epoch, None);
        assert_eq!(model, before);
    }

    #[test]
    fn fixed_seed_replays_bit_exactly() {
        let run = || {
            let mut model = NBeatsModel::new(tiny(), &mut seeded_rng(5)).unwrap();
            let config = TrainConfig {
                batch_size: 8,
                max_epochs: 5,
                seed: 9,
                ..TrainConfig::default()
            };
            let report = train(&mut model, &constant_windows(20, 1), &constant_windows(5, 2), &config).unwrap();
            report
                .history
                .iter()
                .map(|e| (e.train_mse.to_bits(), e.valid_mse.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_empty_and_mismatched_sets() {
        let mut model = NBeatsModel::new(tiny(), &mut seeded_rng(3)).unwrap();
        let cfg = TrainConfig::default();
        assert_eq!(
            train(&mut model, &[], &constant_windows(2, 2), &cfg),
            Err(TrainError::EmptySet("training"))
        );
        let mut bad = constant_windows(1, 2);
        bad[0].horizon.push(0.5);
        assert!(matches!(
            train(&mut model, &constant_windows(2, 1), &bad, &cfg),
            Err(TrainError::WindowShape { .. })
        ));
    }

    #[test]
    fn diverging_run_reports_non_finite_loss() {
        let mut model = NBeatsModel::new(tiny(), &mut seeded_rng(3)).unwrap();
        let mut windows = constant_windows(4, 1);
        windows[0].horizon[0] = f64::NAN;
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &windows, &constant_windows(2, 2), &cfg),
            Err(TrainError::NonFiniteLoss { epoch: 0, .. })
        ));
    }
}
