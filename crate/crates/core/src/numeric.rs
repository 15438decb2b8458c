// SPDX-License-Identifier: Apache-2.0

//! Dense row-major matrices, layer normalization and a finite-difference
//! gradient checker. Everything is `f64`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon added to the variance in [`layer_norm`].
pub const LN_EPS: f64 = 1e-5;

/// A dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            vec_mat_acc(self.row(i), other, out.row_mut(i));
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn tanh_map(&self) -> Matrix {
        self.map(f64::tanh)
    }

    /// Softmax applied independently to every row.
    pub fn row_softmax(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            softmax_in_place(out.row_mut(i));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out += x · w` for a row vector `x` and matrix `w` (`x.len() == w.rows()`).
#[inline]
pub fn vec_mat_acc(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        axpy(xi, w.row(i), out);
    }
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax over a slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Layer normalization with population variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: (x.len(), 1),
            right: (gain.len(), bias.len()),
        });
    }
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    layer_norm_forward(x, gain, bias, eps, &mut xhat, &mut out);
    Ok(out)
}

/// Writes the normalized input into `xhat` and the affine output into `out`.
/// Returns `1 / sqrt(var + eps)`, which [`layer_norm_backward`] needs.
#[inline]
pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    xhat: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    inv_std
}

/// Backward pass of [`layer_norm_forward`]. Accumulates into `d_gain`,
/// `d_bias` and `d_x`.
#[inline]
pub fn layer_norm_backward(
    d_out: &[f64],
    xhat: &[f64],
    inv_std: f64,
    gain: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
    d_x: Option<&mut [f64]>,
) {
    let n = d_out.len();
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..n {
        d_gain[i] += d_out[i] * xhat[i];
        d_bias[i] += d_out[i];
        let dxh = d_out[i] * gain[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    let Some(d_x) = d_x else { return };
    mean_dxhat /= n as f64;
    mean_dxhat_xhat /= n as f64;
    for i in 0..n {
        let dxh = d_out[i] * gain[i];
        d_x[i] += inv_std * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

/// Rounding error allowance of one loss evaluation, in units of `f64::EPSILON`.
const ROUNDOFF_ULPS: f64 = 32.0;

/// Settings for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates to probe; all of them when the parameter vector is shorter.
    pub samples: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            samples: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter index at which `max_rel_err` occurred.
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

/// Compares `analytic` against central differences of `loss_fn` around
/// `params` on a random subset of coordinates.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`, where
/// the numerator first has the rounding noise of the central difference
/// removed (`32 ε max(|L₊|, |L₋|, 1) / 2h`). Without that, coordinates whose
/// true gradient is exactly zero would fail on rounding alone.
pub fn finite_difference_check<F, R>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    opts: GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let coords: Vec<usize> = if params.len() <= opts.samples {
        (0..params.len()).collect()
    } else {
        let mut c = index::sample(rng, params.len(), opts.samples).into_vec();
        c.sort_unstable();
        c
    };

    let mut theta = params.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for &i in &coords {
        let orig = theta[i];
        theta[i] = orig + opts.h;
        let plus = loss_fn(&theta);
        theta[i] = orig - opts.h;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * opts.h);
        let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / (2.0 * opts.h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = ((a - numeric).abs() - noise).max(0.0) / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        checked: coords.len(),
        pass: max_rel_err < opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul() {
        let b = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 5.5, 0.25]]);
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
        assert!(a.add(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn softmax_and_tanh_basics() {
        let s = Matrix::zeros(1, 2).row_softmax();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        assert_eq!(Matrix::zeros(1, 1).tanh_map().get(0, 0), 0.0);
    }

    #[test]
    fn transpose_and_scale() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let t = a.transpose();
        assert_eq!(t.shape(), (2, 3));
        assert_eq!(t.get(1, 2), 6.0);
        assert_eq!(a.scale(2.0).get(2, 0), 10.0);
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let y = layer_norm(&[3.0; 4], &[1.0; 4], &[0.0; 4], LN_EPS).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_unit_variance() {
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
    }

    #[test]
    fn layer_norm_mean_tracks_bias() {
        let bias = [0.3, -0.1, 0.7, 0.2];
        let y = layer_norm(&[0.5, 2.0, -1.0, 4.0], &[1.0; 4], &bias, LN_EPS).unwrap();
        let mean_y = y.iter().sum::<f64>() / 4.0;
        let mean_b = bias.iter().sum::<f64>() / 4.0;
        assert!((mean_y - mean_b).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], LN_EPS).is_err());
    }

    #[test]
    fn gradcheck_quadratic() {
        let theta: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = finite_difference_check(
            |p| p.iter().map(|x| x * x).sum(),
            &theta,
            &grad,
            GradCheckOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
        assert_eq!(report.checked, 50);
    }

    #[test]
    fn gradcheck_catches_corrupted_coordinate() {
        let theta: Vec<f64> = (0..300).map(|i| 0.1 + (i as f64 * 0.11).cos()).collect();
        let mut grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        grad[17] *= 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let opts = GradCheckOptions {
            samples: 300,
            ..Default::default()
        };
        let report = finite_difference_check(
            |p| p.iter().map(|x| x * x).sum(),
            &theta,
            &grad,
            opts,
            &mut rng,
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.worst_index, 17);
    }

    #[test]
    fn gradcheck_non_finite_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = finite_difference_check(
            |_| f64::NAN,
            &[1.0],
            &[0.0],
            GradCheckOptions::default(),
            &mut rng,
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            row in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let m = Matrix::from_rows(&[row.clone()]);
            let s = m.row_softmax();
            let sum: f64 = s.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.as_slice().iter().all(|&v| v >= 0.0));
            let shifted = m.map(|x| x + shift).row_softmax();
            prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
        }

        #[test]
        fn layer_norm_shift_and_scale(
            x in prop::collection::vec(-40.0f64..40.0, 2..16),
            shift in -20.0f64..20.0,
            scale in 1.0f64..10.0,
        ) {
            let n = x.len();
            let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - x.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 0.5);
            let gain = vec![1.0; n];
            let bias = vec![0.0; n];
            let base = layer_norm(&x, &gain, &bias, LN_EPS).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let shifted = layer_norm(&xs, &gain, &bias, LN_EPS).unwrap();
            let xm: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let scaled = layer_norm(&xm, &gain, &bias, LN_EPS).unwrap();
            // scaling x by s is the same as shrinking eps by s²
            let rescaled_eps = layer_norm(&x, &gain, &bias, LN_EPS / (scale * scale)).unwrap();
            for i in 0..n {
                prop_assert!((base[i] - shifted[i]).abs() < 1e-9);
                prop_assert!((rescaled_eps[i] - scaled[i]).abs() < 1e-12);
            }
            if spread > 20.0 {
                for i in 0..n {
                    prop_assert!((base[i] - scaled[i]).abs() < 1e-6);
                }
            }
        }
    }
}
