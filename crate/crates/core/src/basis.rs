//! Fixed basis expansions used by the interpretable stacks.
//!
//! Both bases live on the normalized grid `t = [0, 1, …, n-1] / n`.
//!
//! * Trend: column `i` is `tⁱ` for `i = 0..=p`.
//! * Seasonality: with `h = ⌊n/2⌋`, the first `h` columns are `cos(2πit)` for
//!   `i = 0..h`, followed by `h - 1` columns `sin(2πit)` for `i = 1..h`. The
//!   `i = 0` sine column is identically zero and is not materialized, so a
//!   seasonality basis on `n` points has `2h - 1` columns and the sine
//!   coefficient for harmonic `i` sits at column `h + i - 1`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BasisError {
    #[error("trend degree {degree} must be smaller than the grid length {length}")]
    DegreeTooLarge { degree: usize, length: usize },
    #[error("seasonality basis needs at least 2 grid points, got {0}")]
    GridTooShort(usize),
    #[error("grid length must be positive")]
    EmptyGrid,
}

/// `[0, 1, …, n-1] / n`
pub fn time_grid(length: usize) -> Vec<f64> {
    (0..length).map(|i| i as f64 / length as f64).collect()
}

/// `length × (degree + 1)` matrix with entry `(j, i) = (j / length)^i`.
pub fn build_trend_basis(length: usize, degree: usize) -> Result<Matrix, BasisError> {
    if length == 0 {
        return Err(BasisError::EmptyGrid);
    }
    if degree >= length {
        return Err(BasisError::DegreeTooLarge { degree, length });
    }
    let grid = time_grid(length);
    Ok(Matrix::from_fn(length, degree + 1, |j, i| {
        grid[j].powi(i as i32)
    }))
}

/// Number of columns of the seasonality basis on `length` grid points.
pub fn seasonality_width(length: usize) -> usize {
    2 * (length / 2) - 1
}

/// Cosine columns then sine columns, see the module docs for the layout.
pub fn build_seasonality_basis(length: usize) -> Result<Matrix, BasisError> {
    if length < 2 {
        return Err(BasisError::GridTooShort(length));
    }
    let harmonics = length / 2;
    let grid = time_grid(length);
    Ok(Matrix::from_fn(length, seasonality_width(length), |j, c| {
        if c < harmonics {
            (2.0 * PI * c as f64 * grid[j]).cos()
        } else {
            let i = c - harmonics + 1;
            (2.0 * PI * i as f64 * grid[j]).sin()
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values_are_exact_fractions() {
        let g = time_grid(36);
        for (i, v) in g.iter().enumerate() {
            assert_eq!(*v, i as f64 / 36.0);
        }
        assert_eq!(g[35], 35.0 / 36.0);
    }

    #[test]
    fn trend_h2_p1() {
        let b = build_trend_basis(2, 1).unwrap();
        assert_eq!(b, Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.5]]).unwrap());
    }

    #[test]
    fn trend_degree_zero_is_constant() {
        for h in [1, 5, 36] {
            let b = build_trend_basis(h, 0).unwrap();
            assert_eq!(b.cols(), 1);
            assert!(b.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn trend_h3_p2_last_row() {
        let b = build_trend_basis(3, 2).unwrap();
        let row = b.row(2);
        assert_eq!(row[0], 1.0);
        assert!((row[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((row[2] - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn trend_rejects_overdetermined_degree() {
        assert_eq!(
            build_trend_basis(3, 3),
            Err(BasisError::DegreeTooLarge { degree: 3, length: 3 })
        );
    }

    #[test]
    fn seasonality_h4_first_cosine() {
        let b = build_seasonality_basis(4).unwrap();
        assert_eq!(b.cols(), 3);
        let theta = [0.0, 1.0, 0.0];
        let f = b.matvec(&theta).unwrap();
        let expected = [1.0, 0.0, -1.0, 0.0];
        for (a, e) in f.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{f:?}");
        }
    }

    #[test]
    fn seasonality_h2_spans_constants_only() {
        let b = build_seasonality_basis(2).unwrap();
        assert_eq!(b.shape(), (2, 1));
        assert_eq!(b.data(), &[1.0, 1.0]);
    }

    #[test]
    fn seasonality_constant_column() {
        for h in [2, 7, 36] {
            let b = build_seasonality_basis(h).unwrap();
            let mut theta = vec![0.0; b.cols()];
            theta[0] = 0.7;
            let f = b.matvec(&theta).unwrap();
            assert!(f.iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn seasonality_sine_layout() {
        let b = build_seasonality_basis(8).unwrap();
        // harmonics = 4: cos 0..3 at columns 0..3, sin 1..3 at columns 4..6.
        assert_eq!(b.cols(), 7);
        let t = 1.0 / 8.0;
        assert!((b.get(1, 4) - (2.0 * PI * t).sin()).abs() < 1e-15);
        assert!((b.get(1, 6) - (2.0 * PI * 3.0 * t).sin()).abs() < 1e-15);
    }

    #[test]
    fn seasonality_rejects_short_grid() {
        assert_eq!(build_seasonality_basis(1), Err(BasisError::GridTooShort(1)));
    }
}
