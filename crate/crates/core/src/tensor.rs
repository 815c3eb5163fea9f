//! Dense numerical kernel: row-major matrices, fully connected layers with
//! hand-derived gradients, the Adam optimizer and the seeded random stream
//! every stochastic component draws from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shape contract violation inside the numerical kernel.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("{op}: expected length {expected}, got {actual}")]
    Length {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    Dims {
        op: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: parameter group count {expected} does not match {actual}")]
    Groups {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
}

fn check_len(op: &'static str, expected: usize, actual: usize) -> Result<(), ShapeError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ShapeError::Length {
            op,
            expected,
            actual,
        })
    }
}

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        check_len("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("Matrix::from_rows", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Matrix whose entry `(r, c)` is `f(r, c)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Glorot-uniform initialization, `U(-a, a)` with `a = sqrt(6 / (rows + cols))`.
    pub fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, ShapeError> {
        check_len("Matrix::matvec", self.cols, x.len())?;
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    /// `selfᵀ · y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>, ShapeError> {
        check_len("Matrix::matvec_transposed", self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        self.matvec_transposed_acc(y, &mut out);
        Ok(out)
    }

    pub(crate) fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        if self.cols == 0 {
            out.iter_mut().for_each(|o| *o = 0.0);
        }
    }

    /// `out += selfᵀ · y`
    pub(crate) fn matvec_transposed_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        if self.cols == 0 {
            return;
        }
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += yr * w;
            }
        }
    }

    /// `self += a ⊗ b`
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        if self.cols == 0 {
            return;
        }
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ar == 0.0 {
                continue;
            }
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Least-squares solution of `a · x ≈ b` by Householder QR. `a` must have at
/// least as many rows as columns and full column rank.
pub fn least_squares(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, ShapeError> {
    let (m, n) = a.shape();
    check_len("least_squares", m, b.len())?;
    if m < n {
        return Err(ShapeError::Dims {
            op: "least_squares",
            expected_rows: n,
            expected_cols: n,
            rows: m,
            cols: n,
        });
    }
    let mut r = a.clone();
    let mut y = b.to_vec();
    for k in 0..n {
        let norm = (k..m).map(|i| r.get(i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r.get(k, k) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| r.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * r.get(i, j)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                r.set(i, j, r.get(i, j) - f * v[i - k]);
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * y[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in k..m {
            y[i] -= f * v[i - k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| r.get(k, j) * x[j]).sum();
        let d = r.get(k, k);
        x[k] = if d == 0.0 { 0.0 } else { (y[k] - s) / d };
    }
    Ok(x)
}

/// Activation applied after the affine map of a [`DenseLayer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`; the ReLU subgradient at 0 is 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `activation(W·x + b)` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Gradients produced by [`dense_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients {
    pub input_grad: Vec<f64>,
    pub weight_grad: Matrix,
    pub bias_grad: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self, ShapeError> {
        check_len("DenseLayer::new", weights.rows(), bias.len())?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-initialized weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        Self {
            weights: Matrix::glorot(outputs, inputs, rng),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    /// Writes the pre-activation into `pre` and the activated output into `out`.
    pub(crate) fn forward_into(&self, input: &[f64], pre: &mut [f64], out: &mut [f64]) {
        self.weights.matvec_into(input, pre);
        for ((p, o), b) in pre.iter_mut().zip(out.iter_mut()).zip(&self.bias) {
            *p += b;
            *o = self.activation.apply(*p);
        }
    }

    /// Accumulates parameter gradients into `grad` and adds the input gradient
    /// into `input_grad`. `output_grad` is overwritten with the gradient with
    /// respect to the pre-activation.
    pub(crate) fn backward_acc(
        &self,
        input: &[f64],
        pre: &[f64],
        output_grad: &mut [f64],
        grad: &mut DenseLayer,
        input_grad: Option<&mut [f64]>,
    ) {
        if self.activation == Activation::Relu {
            for (g, &z) in output_grad.iter_mut().zip(pre) {
                *g *= self.activation.derivative(z);
            }
        }
        grad.weights.add_outer(output_grad, input);
        for (b, g) in grad.bias.iter_mut().zip(output_grad.iter()) {
            *b += g;
        }
        if let Some(input_grad) = input_grad {
            self.weights.matvec_transposed_acc(output_grad, input_grad);
        }
    }

    pub(crate) fn parameter_slices(&self) -> [&[f64]; 2] {
        [self.weights.data(), &self.bias]
    }

    pub(crate) fn parameter_slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weights.data_mut(), &mut self.bias]
    }
}

/// `activation(W·input + b)`.
pub fn dense_forward(layer: &DenseLayer, input: &[f64]) -> Result<Vec<f64>, ShapeError> {
    check_len("dense_forward", layer.inputs(), input.len())?;
    let mut pre = vec![0.0; layer.outputs()];
    let mut out = vec![0.0; layer.outputs()];
    layer.forward_into(input, &mut pre, &mut out);
    Ok(out)
}

/// Chain rule through one layer: gradients of a downstream scalar with
/// respect to the input, the weights and the bias, given the gradient with
/// respect to the layer output.
pub fn dense_backward(
    layer: &DenseLayer,
    input: &[f64],
    output_grad: &[f64],
) -> Result<DenseGradients, ShapeError> {
    check_len("dense_backward", layer.inputs(), input.len())?;
    check_len("dense_backward", layer.outputs(), output_grad.len())?;
    let mut pre = vec![0.0; layer.outputs()];
    let mut out = vec![0.0; layer.outputs()];
    layer.forward_into(input, &mut pre, &mut out);

    let mut delta = output_grad.to_vec();
    let mut grad = DenseLayer::zeroed(layer.inputs(), layer.outputs(), layer.activation);
    let mut input_grad = vec![0.0; layer.inputs()];
    layer.backward_acc(input, &pre, &mut delta, &mut grad, Some(&mut input_grad));
    Ok(DenseGradients {
        input_grad,
        weight_grad: grad.weights,
        bias_grad: grad.bias,
    })
}

/// Hyperparameters for [`AdamState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a fixed list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments sized after `group_lengths`.
    pub fn new(config: AdamConfig, group_lengths: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: group_lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: group_lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter group.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), ShapeError> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(ShapeError::Groups {
                op: "adam_step",
                expected: self.first_moment.len(),
                actual: params.len().max(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            check_len("adam_step", m.len(), p.len())?;
            check_len("adam_step", m.len(), g.len())?;
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Convenience wrapper around [`AdamState::update`].
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
) -> Result<(), ShapeError> {
    state.update(params, grads)
}

/// Deterministic random stream. ChaCha8 output is specified independently of
/// platform and word size, so identical seeds replay identically everywhere.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

/// Creates a [`SeededRng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng {
        inner: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl SeededRng {
    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform on `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Standard normal draw (Box-Muller on two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child stream, used to give sub-components their own
    /// reproducible randomness.
    pub fn fork(&mut self) -> SeededRng {
        seeded_rng(self.next_u64())
    }
}
