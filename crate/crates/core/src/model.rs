//! N-BEATS blocks, stacks and the doubly residual composition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{build_seasonality_basis, build_trend_basis, BasisError};
use crate::tensor::{Activation, DenseLayer, Matrix, SeededRng, ShapeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("operation requires the interpretable configuration")]
    UnsupportedConfiguration,
}

/// Which of the two N-BEATS layouts a model follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Configuration {
    Generic,
    Interpretable,
}

impl Configuration {
    pub fn label(self) -> &'static str {
        match self {
            Configuration::Generic => "Generic",
            Configuration::Interpretable => "Interpretable",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub configuration: Configuration,
    pub lookback: usize,
    pub horizon: usize,
    pub hidden_width: usize,
    pub trunk_layers: usize,
    pub trend_degree: usize,
    pub trend_blocks: usize,
    pub seasonality_blocks: usize,
    pub generic_stacks: usize,
    pub generic_blocks: usize,
    pub generic_basis_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            configuration: Configuration::Interpretable,
            lookback: 72,
            horizon: 36,
            hidden_width: 128,
            trunk_layers: 4,
            trend_degree: 2,
            trend_blocks: 3,
            seasonality_blocks: 3,
            generic_stacks: 1,
            generic_blocks: 6,
            generic_basis_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.lookback < 2 || self.horizon < 2 {
            return fail(format!(
                "lookback ({}) and horizon ({}) must both be at least 2",
                self.lookback, self.horizon
            ));
        }
        if self.hidden_width == 0 || self.trunk_layers == 0 {
            return fail("hidden_width and trunk_layers must be positive".into());
        }
        match self.configuration {
            Configuration::Interpretable => {
                if self.trend_degree > 4 {
                    return fail(format!("trend_degree {} outside 0..=4", self.trend_degree));
                }
                if self.trend_blocks == 0 || self.seasonality_blocks == 0 {
                    return fail("interpretable stacks need at least one block each".into());
                }
            }
            Configuration::Generic => {
                if self.generic_stacks == 0 || self.generic_blocks == 0 || self.generic_basis_dim == 0 {
                    return fail("generic stacks, blocks and basis dimension must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// How a block maps its θ coefficients onto the two grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// Learned linear map of dimension `dim`.
    Generic { dim: usize },
    /// Polynomial of degree ≤ `degree` in normalized time.
    Trend { degree: usize },
    /// Fourier harmonics in normalized time.
    Seasonality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisLayer {
    pub kind: BasisKind,
    /// `lookback × k_b`
    pub backcast: Matrix,
    /// `horizon × k_f`
    pub forecast: Matrix,
}

impl BasisLayer {
    pub fn new(
        kind: BasisKind,
        lookback: usize,
        horizon: usize,
        rng: Option<&mut SeededRng>,
    ) -> Result<Self, ModelError> {
        let (backcast, forecast) = match kind {
            BasisKind::Trend { degree } => (
                build_trend_basis(lookback, degree)?,
                build_trend_basis(horizon, degree)?,
            ),
            BasisKind::Seasonality => (
                build_seasonality_basis(lookback)?,
                build_seasonality_basis(horizon)?,
            ),
            BasisKind::Generic { dim } => match rng {
                Some(rng) => (
                    Matrix::glorot(lookback, dim, rng),
                    Matrix::glorot(horizon, dim, rng),
                ),
                None => (Matrix::zeros(lookback, dim), Matrix::zeros(horizon, dim)),
            },
        };
        Ok(Self {
            kind,
            backcast,
            forecast,
        })
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.kind, BasisKind::Generic { .. })
    }
}

/// Fully connected trunk, two θ heads and a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub trunk: Vec<DenseLayer>,
    pub theta_backcast: DenseLayer,
    pub theta_forecast: DenseLayer,
    pub basis: BasisLayer,
}

/// Intermediate values of one block forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    theta_b: Vec<f64>,
    theta_f: Vec<f64>,
    pub(crate) backcast: Vec<f64>,
    pub(crate) forecast: Vec<f64>,
}

impl Block {
    fn build(
        kind: BasisKind,
        config: &ModelConfig,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<Self, ModelError> {
        let width = config.hidden_width;
        let mut trunk = Vec::with_capacity(config.trunk_layers);
        for i in 0..config.trunk_layers {
            let inputs = if i == 0 { config.lookback } else { width };
            trunk.push(match rng.as_deref_mut() {
                Some(r) => DenseLayer::init(inputs, width, Activation::Relu, r),
                None => DenseLayer::zeroed(inputs, width, Activation::Relu),
            });
        }
        let basis = BasisLayer::new(kind, config.lookback, config.horizon, rng.as_deref_mut())?;
        let (kb, kf) = (basis.backcast.cols(), basis.forecast.cols());
        let (theta_backcast, theta_forecast) = match rng {
            Some(r) => (
                DenseLayer::init(width, kb, Activation::Identity, r),
                DenseLayer::init(width, kf, Activation::Identity, r),
            ),
            None => (
                DenseLayer::zeroed(width, kb, Activation::Identity),
                DenseLayer::zeroed(width, kf, Activation::Identity),
            ),
        };
        Ok(Self {
            trunk,
            theta_backcast,
            theta_forecast,
            basis,
        })
    }

    pub fn lookback(&self) -> usize {
        self.basis.backcast.rows()
    }

    pub fn horizon(&self) -> usize {
        self.basis.forecast.rows()
    }

    /// Returns `(backcast, forecast)` for input `x` of length `lookback`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if x.len() != self.lookback() {
            return Err(ShapeError::Length {
                op: "block_forward",
                expected: self.lookback(),
                actual: x.len(),
            }
            .into());
        }
        let trace = self.trace(x);
        Ok((trace.backcast, trace.forecast))
    }

    pub(crate) fn trace(&self, x: &[f64]) -> BlockTrace {
        let mut pre = Vec::with_capacity(self.trunk.len());
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let input = act.last().map_or(x, Vec::as_slice);
            let mut z = vec![0.0; layer.outputs()];
            let mut a = vec![0.0; layer.outputs()];
            layer.forward_into(input, &mut z, &mut a);
            pre.push(z);
            act.push(a);
        }
        let hidden = act.last().map_or(x, Vec::as_slice);
        let mut theta_b = vec![0.0; self.theta_backcast.outputs()];
        let mut theta_f = vec![0.0; self.theta_forecast.outputs()];
        let mut scratch = vec![0.0; theta_b.len().max(theta_f.len())];
        self.theta_backcast
            .forward_into(hidden, &mut scratch[..theta_b.len()], &mut theta_b);
        self.theta_forecast
            .forward_into(hidden, &mut scratch[..theta_f.len()], &mut theta_f);
        let mut backcast = vec![0.0; self.lookback()];
        let mut forecast = vec![0.0; self.horizon()];
        self.basis.backcast.matvec_into(&theta_b, &mut backcast);
        self.basis.forecast.matvec_into(&theta_f, &mut forecast);
        BlockTrace {
            input: x.to_vec(),
            pre,
            act,
            theta_b,
            theta_f,
            backcast,
            forecast,
        }
    }

    /// Accumulates parameter gradients into `grad` and the input gradient into
    /// `input_grad`, given gradients with respect to this block's outputs.
    fn backward(
        &self,
        trace: &BlockTrace,
        backcast_grad: &[f64],
        forecast_grad: &[f64],
        grad: &mut Block,
        input_grad: &mut [f64],
    ) {
        let mut g_theta_b = vec![0.0; trace.theta_b.len()];
        let mut g_theta_f = vec![0.0; trace.theta_f.len()];
        self.basis
            .backcast
            .matvec_transposed_acc(backcast_grad, &mut g_theta_b);
        self.basis
            .forecast
            .matvec_transposed_acc(forecast_grad, &mut g_theta_f);
        if self.basis.is_learned() {
            grad.basis.backcast.add_outer(backcast_grad, &trace.theta_b);
            grad.basis.forecast.add_outer(forecast_grad, &trace.theta_f);
        }

        let hidden = trace.act.last().map_or(trace.input.as_slice(), Vec::as_slice);
        let mut g_hidden = vec![0.0; hidden.len()];
        self.theta_backcast.backward_acc(
            hidden,
            &trace.theta_b,
            &mut g_theta_b,
            &mut grad.theta_backcast,
            Some(&mut g_hidden),
        );
        self.theta_forecast.backward_acc(
            hidden,
            &trace.theta_f,
            &mut g_theta_f,
            &mut grad.theta_forecast,
            Some(&mut g_hidden),
        );

        let mut upstream = g_hidden;
        for (i, layer) in self.trunk.iter().enumerate().rev() {
            let input = if i == 0 {
                trace.input.as_slice()
            } else {
                trace.act[i - 1].as_slice()
            };
            if i == 0 {
                layer.backward_acc(input, &trace.pre[i], &mut upstream, &mut grad.trunk[i], Some(input_grad));
            } else {
                let mut next = vec![0.0; input.len()];
                layer.backward_acc(input, &trace.pre[i], &mut upstream, &mut grad.trunk[i], Some(&mut next));
                upstream = next;
            }
        }
    }

    fn parameter_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.trunk {
            out.extend(layer.parameter_slices());
        }
        out.extend(self.theta_backcast.parameter_slices());
        out.extend(self.theta_forecast.parameter_slices());
        if self.basis.is_learned() {
            out.push(self.basis.backcast.data());
            out.push(self.basis.forecast.data());
        }
        out
    }

    fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.trunk {
            out.extend(layer.parameter_slices_mut());
        }
        out.extend(self.theta_backcast.parameter_slices_mut());
        out.extend(self.theta_forecast.parameter_slices_mut());
        if self.basis.is_learned() {
            out.push(self.basis.backcast.data_mut());
            out.push(self.basis.forecast.data_mut());
        }
        out
    }
}

/// An ordered list of blocks sharing one basis kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub kind: BasisKind,
    pub blocks: Vec<Block>,
}

/// Total forecast plus the contribution of every stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDecomposition {
    pub total: Vec<f64>,
    pub partials: Vec<(String, Vec<f64>)>,
}

impl ForecastDecomposition {
    pub fn partial(&self, name: &str) -> Option<&[f64]> {
        self.partials
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBeatsModel {
    pub config: ModelConfig,
    pub stacks: Vec<Stack>,
}

/// Per-sample forward record used by the training loop.
pub(crate) struct ModelTrace {
    pub(crate) decomposition: ForecastDecomposition,
    blocks: Vec<BlockTrace>,
}

impl NBeatsModel {
    /// Glorot-initialized model; all draws come from `rng`.
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self, ModelError> {
        Self::build(config, Some(rng))
    }

    /// Same topology with every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self, ModelError> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, mut rng: Option<&mut SeededRng>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout: Vec<(BasisKind, usize)> = match config.configuration {
            Configuration::Interpretable => vec![
                (
                    BasisKind::Trend {
                        degree: config.trend_degree,
                    },
                    config.trend_blocks,
                ),
                (BasisKind::Seasonality, config.seasonality_blocks),
            ],
            Configuration::Generic => vec![
                (
                    BasisKind::Generic {
                        dim: config.generic_basis_dim,
                    },
                    config.generic_blocks,
                );
                config.generic_stacks
            ],
        };
        let mut stacks = Vec::with_capacity(layout.len());
        for (kind, count) in layout {
            let blocks = (0..count)
                .map(|_| Block::build(kind, &config, rng.as_deref_mut()))
                .collect::<Result<Vec<_>, _>>()?;
            stacks.push(Stack { kind, blocks });
        }
        Ok(Self { config, stacks })
    }

    pub fn configuration(&self) -> Configuration {
        self.config.configuration
    }

    pub fn lookback(&self) -> usize {
        self.config.lookback
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Name of the partial forecast of stack `index`.
    pub fn stack_name(&self, index: usize) -> String {
        match self.stacks[index].kind {
            BasisKind::Trend { .. } => "trend".to_string(),
            BasisKind::Seasonality => "seasonality".to_string(),
            BasisKind::Generic { .. } => format!("stack_{index}"),
        }
    }

    /// Doubly residual forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<ForecastDecomposition, ModelError> {
        self.check_input(x)?;
        Ok(self.trace(x).decomposition)
    }

    pub fn forecast(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(x)?.total)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.lookback() {
            return Err(ShapeError::Length {
                op: "model_forward",
                expected: self.lookback(),
                actual: x.len(),
            }
            .into());
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f64]) -> ModelTrace {
        let horizon = self.horizon();
        let mut residual = x.to_vec();
        let mut blocks = Vec::new();
        let mut partials = Vec::with_capacity(self.stacks.len());
        for (s, stack) in self.stacks.iter().enumerate() {
            let mut partial = vec![0.0; horizon];
            for block in &stack.blocks {
                let trace = block.trace(&residual);
                for (r, b) in residual.iter_mut().zip(&trace.backcast) {
                    *r -= b;
                }
                for (p, f) in partial.iter_mut().zip(&trace.forecast) {
                    *p += f;
                }
                blocks.push(trace);
            }
            partials.push((self.stack_name(s), partial));
        }
        let mut total = vec![0.0; horizon];
        for (_, partial) in &partials {
            for (t, p) in total.iter_mut().zip(partial) {
                *t += p;
            }
        }
        ModelTrace {
            decomposition: ForecastDecomposition { total, partials },
            blocks,
        }
    }

    /// Backpropagates `total_grad` (gradient of a scalar with respect to the
    /// total forecast) through a recorded forward pass, accumulating into
    /// `grad`. Returns the gradient with respect to the model input.
    pub(crate) fn backward(&self, trace: &ModelTrace, total_grad: &[f64], grad: &mut NBeatsModel) -> Vec<f64> {
        let lookback = self.lookback();
        // Gradient with respect to the residual flowing out of the current block.
        let mut residual_grad = vec![0.0; lookback];
        let mut index = trace.blocks.len();
        for (stack, grad_stack) in self.stacks.iter().zip(grad.stacks.iter_mut()).rev() {
            for (block, grad_block) in stack.blocks.iter().zip(grad_stack.blocks.iter_mut()).rev() {
                index -= 1;
                let backcast_grad: Vec<f64> = residual_grad.iter().map(|g| -g).collect();
                block.backward(
                    &trace.blocks[index],
                    &backcast_grad,
                    total_grad,
                    grad_block,
                    &mut residual_grad,
                );
            }
        }
        residual_grad
    }

    /// Parameter buffers in a fixed order shared with [`Self::parameter_slices_mut`].
    pub fn parameter_slices(&self) -> Vec<&[f64]> {
        self.stacks
            .iter()
            .flat_map(|s| s.blocks.iter())
            .flat_map(Block::parameter_slices)
            .collect()
    }

    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.stacks
            .iter_mut()
            .flat_map(|s| s.blocks.iter_mut())
            .flat_map(Block::parameter_slices_mut)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_slices().iter().map(|s| s.len()).sum()
    }

    /// Zero-valued model of identical topology, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for p in out.parameter_slices_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Mean squared error of the total forecast over `(lookback, target)` pairs
    /// and its gradient with respect to every parameter.
    pub fn loss_and_gradient<'a, I>(&self, batch: I) -> Result<(f64, NBeatsModel), ModelError>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    {
        let batch: Vec<(&[f64], &[f64])> = batch.into_iter().collect();
        let mut grad = self.zeros_like();
        if batch.is_empty() {
            return Ok((0.0, grad));
        }
        let horizon = self.horizon();
        let count = batch.len() * horizon;
        let scale = 1.0 / count as f64;
        let mut loss = 0.0;
        for (x, y) in batch {
            self.check_input(x)?;
            if y.len() != horizon {
                return Err(ShapeError::Length {
                    op: "loss_and_gradient",
                    expected: horizon,
                    actual: y.len(),
                }
                .into());
            }
            let trace = self.trace(x);
            let total = &trace.decomposition.total;
            loss += total.iter().zip(y).map(|(f, t)| (f - t) * (f - t)).sum::<f64>();
            let total_grad: Vec<f64> = total.iter().zip(y).map(|(f, t)| 2.0 * (f - t) * scale).collect();
            self.backward(&trace, &total_grad, &mut grad);
        }
        // Same reduction as `loss`, so both agree bit for bit.
        Ok((loss / count as f64, grad))
    }

    /// Mean squared error without gradients.
    pub fn loss<'a, I>(&self, batch: I) -> Result<f64, ModelError>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (x, y) in batch {
            let total = self.forecast(x)?;
            if y.len() != total.len() {
                return Err(ShapeError::Length {
                    op: "loss",
                    expected: total.len(),
                    actual: y.len(),
                }
                .into());
            }
            sum += total.iter().zip(y).map(|(f, t)| (f - t) * (f - t)).sum::<f64>();
            count += y.len();
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn tiny(configuration: Configuration) -> ModelConfig {
        ModelConfig {
            configuration,
            lookback: 8,
            horizon: 4,
            hidden_width: 8,
            trend_blocks: 1,
            seasonality_blocks: 1,
            generic_blocks: 2,
            generic_basis_dim: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        for c in [Configuration::Interpretable, Configuration::Generic] {
            let m = NBeatsModel::zeroed(tiny(c)).unwrap();
            let d = m.forward(&[0.3; 8]).unwrap();
            assert!(d.total.iter().all(|&v| v == 0.0));
            assert!(d.partials.iter().all(|(_, p)| p.iter().all(|&v| v == 0.0)));
            let (b, f) = m.stacks[0].blocks[0].forward(&[0.3; 8]).unwrap();
            assert!(b.iter().chain(&f).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_block_total_is_block_forecast() {
        let mut cfg = tiny(Configuration::Generic);
        cfg.generic_blocks = 1;
        let m = NBeatsModel::new(cfg, &mut seeded_rng(4)).unwrap();
        let x = [0.1, 0.4, 0.2, 0.9, 0.5, 0.3, 0.6, 0.7];
        let (_, f) = m.stacks[0].blocks[0].forward(&x).unwrap();
        assert_eq!(m.forecast(&x).unwrap(), f);
    }

    #[test]
    fn interpretable_has_trend_then_seasonality() {
        let m = NBeatsModel::new(ModelConfig::default(), &mut seeded_rng(0)).unwrap();
        assert_eq!(m.stacks.len(), 2);
        assert_eq!(m.stack_name(0), "trend");
        assert_eq!(m.stack_name(1), "seasonality");
        assert_eq!(m.stacks[0].blocks.len(), 3);
        assert_eq!(m.stacks[0].blocks[0].trunk.len(), 4);
        assert_eq!(m.stacks[1].blocks[0].basis.forecast.cols(), 35);
        assert_eq!(m.stacks[1].blocks[0].basis.backcast.cols(), 71);
    }

    #[test]
    fn two_stacks_add_bit_exactly() {
        let m = NBeatsModel::new(tiny(Configuration::Interpretable), &mut seeded_rng(9)).unwrap();
        let mut rng = seeded_rng(10);
        for _ in 0..50 {
            let x: Vec<f64> = (0..8).map(|_| rng.uniform(0.0, 1.0)).collect();
            let d = m.forward(&x).unwrap();
            let trend = d.partial("trend").unwrap();
            let season = d.partial("seasonality").unwrap();
            for i in 0..4 {
                assert_eq!((trend[i] + season[i]).to_bits(), d.total[i].to_bits());
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_lookback() {
        let m = NBeatsModel::zeroed(tiny(Configuration::Generic)).unwrap();
        assert!(matches!(m.forward(&[0.0; 7]), Err(ModelError::Shape(_))));
        assert!(m.stacks[0].blocks[0].forward(&[0.0; 9]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig {
            trend_degree: 5,
            ..ModelConfig::default()
        };
        assert!(NBeatsModel::zeroed(cfg.clone()).is_err());
        cfg.trend_degree = 4;
        cfg.horizon = 4;
        assert!(matches!(
            NBeatsModel::zeroed(cfg),
            Err(ModelError::Basis(BasisError::DegreeTooLarge { .. }))
        ));
    }

    #[test]
    fn gradient_buffer_matches_parameter_layout() {
        let m = NBeatsModel::new(tiny(Configuration::Generic), &mut seeded_rng(1)).unwrap();
        let g = m.zeros_like();
        let a: Vec<usize> = m.parameter_slices().iter().map(|s| s.len()).collect();
        let b: Vec<usize> = g.parameter_slices().iter().map(|s| s.len()).collect();
        assert_eq!(a, b);
        assert!(g.parameter_slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }
}
