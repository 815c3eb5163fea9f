use nalgebra::{DMatrix, DVector};
use nbeats_vitals::basis::{build_seasonality_basis, build_trend_basis};
use nbeats_vitals::model::{Configuration, ModelConfig, NBeatsModel};
use nbeats_vitals::tensor::seeded_rng;
use proptest::prelude::*;

fn config(configuration: Configuration, lookback: usize, horizon: usize, width: usize) -> ModelConfig {
    ModelConfig {
        configuration,
        lookback,
        horizon,
        hidden_width: width,
        trend_blocks: 2,
        seasonality_blocks: 2,
        generic_blocks: 2,
        ..ModelConfig::default()
    }
}

fn to_dmatrix(m: &nbeats_vitals::tensor::Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c))
}

/// Relative residual of projecting `v` onto the column space of `basis`.
fn projection_residual(basis: &DMatrix<f64>, v: &[f64]) -> f64 {
    let v = DVector::from_column_slice(v);
    let coef = basis.clone().svd(true, true).solve(&v, 1e-12).unwrap();
    (basis * coef - &v).norm() / v.norm().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn interpretable_partials_stay_in_their_spans(seed in any::<u64>(), horizon in 4usize..40) {
        let cfg = config(Configuration::Interpretable, 2 * horizon, horizon, 16);
        let model = NBeatsModel::new(cfg.clone(), &mut seeded_rng(seed)).unwrap();
        let mut rng = seeded_rng(seed.wrapping_add(1));
        let x: Vec<f64> = (0..cfg.lookback).map(|_| rng.uniform(0.0, 1.0)).collect();
        let d = model.forward(&x).unwrap();

        let trend = d.partial("trend").unwrap();
        let mut diff = trend.to_vec();
        for _ in 0..=cfg.trend_degree {
            diff = diff.windows(2).map(|w| w[1] - w[0]).collect();
        }
        let scale = trend.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff.iter().all(|v| v.abs() <= 1e-9 * scale));

        let trend_basis = to_dmatrix(&build_trend_basis(horizon, cfg.trend_degree).unwrap());
        prop_assert!(projection_residual(&trend_basis, trend) < 1e-9);
        let season_basis = to_dmatrix(&build_seasonality_basis(horizon).unwrap());
        prop_assert!(projection_residual(&season_basis, d.partial("seasonality").unwrap()) < 1e-9);

        let sum: Vec<f64> = trend.iter().zip(d.partial("seasonality").unwrap()).map(|(a, b)| a + b).collect();
        prop_assert_eq!(sum, d.total);
    }

    #[test]
    fn generic_partials_sum_to_total(seed in any::<u64>()) {
        let cfg = ModelConfig { generic_stacks: 3, ..config(Configuration::Generic, 12, 6, 8) };
        let model = NBeatsModel::new(cfg, &mut seeded_rng(seed)).unwrap();
        let x = vec![0.5; 12];
        let d = model.forward(&x).unwrap();
        let names: Vec<&str> = d.partials.iter().map(|(n, _)| n.as_str()).collect();
        prop_assert_eq!(names, vec!["stack_0", "stack_1", "stack_2"]);
        let mut sum = vec![0.0; 6];
        for (_, p) in &d.partials {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v;
            }
        }
        prop_assert_eq!(sum, d.total);
    }
}

fn gradient_check(configuration: Configuration, seed: u64) -> f64 {
    let cfg = ModelConfig {
        trend_blocks: 1,
        seasonality_blocks: 1,
        generic_blocks: 2,
        generic_basis_dim: 3,
        ..config(configuration, 8, 4, 8)
    };
    let mut rng = seeded_rng(seed);
    let mut model = NBeatsModel::new(cfg, &mut rng).unwrap();
    // Random biases keep pre-activations off the ReLU kink.
    for slot in model.parameter_slices_mut() {
        for v in slot.iter_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
        .map(|_| {
            (
                (0..8).map(|_| rng.uniform(0.0, 1.0)).collect(),
                (0..4).map(|_| rng.uniform(0.0, 1.0)).collect(),
            )
        })
        .collect();
    let pairs = || batch.iter().map(|(x, y)| (x.as_slice(), y.as_slice()));
    let (loss, grad) = model.loss_and_gradient(pairs()).unwrap();
    assert_eq!(loss, model.loss(pairs()).unwrap());
    let analytic = grad.parameter_slices().concat();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut k = 0;
    let groups = model.parameter_slices().len();
    for g in 0..groups {
        for i in 0..model.parameter_slices()[g].len() {
            let original = model.parameter_slices()[g][i];
            model.parameter_slices_mut()[g][i] = original + h;
            let plus = model.loss(pairs()).unwrap();
            model.parameter_slices_mut()[g][i] = original - h;
            let minus = model.loss(pairs()).unwrap();
            model.parameter_slices_mut()[g][i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            k += 1;
        }
    }
    assert_eq!(k, analytic.len());
    worst
}

#[test]
fn end_to_end_gradients_match_central_differences() {
    for seed in [1, 2, 3] {
        for c in [Configuration::Interpretable, Configuration::Generic] {
            let worst = gradient_check(c, seed);
            assert!(worst < 1e-4, "{c:?} seed {seed}: {worst:e}");
        }
    }
}

#[test]
fn zero_model_forecasts_zero() {
    for c in [Configuration::Interpretable, Configuration::Generic] {
        let model = NBeatsModel::zeroed(config(c, 10, 5, 4)).unwrap();
        let d = model.forward(&[0.3; 10]).unwrap();
        assert_eq!(d.total, vec![0.0; 5]);
        assert!(d.partials.iter().all(|(_, p)| p.iter().all(|v| *v == 0.0)));
    }
}
