// SPDX-License-Identifier: Apache-2.0

//! Causal attention kernels.
//!
//! Both kernels map a score matrix `z = Q Kᵀ` to a row-stochastic,
//! lower-triangular weight matrix:
//!
//! * dot-product attention (DPA): `a_mk ∝ exp(β z_mk)`
//! * expressive attention (EA): `a_mk ∝ z_mk² / (1 + z_mk²)`
//!
//! EA is symmetric under `z → -z`, so parallel and antiparallel query/key
//! pairs both attend strongly while orthogonal pairs are suppressed.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, Matrix};

/// EA rows whose normalizer falls below this fall back to uniform weights.
pub const EA_DEGENERATE_NORM: f64 = 1e-30;

/// Floor applied before taking `log10` in [`attention_log_heatmap`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Dpa,
    Ea,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Dpa => "dpa",
            AttentionKind::Ea => "ea",
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpa" => Ok(AttentionKind::Dpa),
            "ea" => Ok(AttentionKind::Ea),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kernel choice plus the DPA inverse temperature. `beta` is ignored by EA.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionKernelSpec {
    pub kind: AttentionKind,
    pub beta: f64,
}

impl AttentionKernelSpec {
    pub fn dpa(beta: f64) -> Self {
        assert!(beta > 0.0, "beta must be positive");
        Self {
            kind: AttentionKind::Dpa,
            beta,
        }
    }

    pub fn ea() -> Self {
        Self {
            kind: AttentionKind::Ea,
            beta: 1.0,
        }
    }

    /// Fills `out` with the weights of one causal row. `z` holds the scores
    /// of the unmasked keys only (`k <= m`).
    #[inline]
    pub fn row_weights(&self, z: &[f64], out: &mut [f64]) {
        match self.kind {
            AttentionKind::Dpa => dpa_row(z, self.beta, out),
            AttentionKind::Ea => ea_row(z, out),
        }
    }

    /// Vector-Jacobian product of [`Self::row_weights`]: given the row's
    /// scores, its weights and `∂L/∂a`, accumulates `∂L/∂z` into `dz`.
    #[inline]
    pub fn row_backward(&self, z: &[f64], a: &[f64], da: &[f64], dz: &mut [f64]) {
        match self.kind {
            AttentionKind::Dpa => {
                let centre = dot(a, da);
                for k in 0..z.len() {
                    dz[k] += self.beta * a[k] * (da[k] - centre);
                }
            }
            AttentionKind::Ea => {
                let norm: f64 = z.iter().map(|&s| ea_unnormalized(s)).sum();
                if norm < EA_DEGENERATE_NORM {
                    return;
                }
                let centre = dot(a, da);
                for k in 0..z.len() {
                    let du = (da[k] - centre) / norm;
                    let denom = 1.0 + z[k] * z[k];
                    dz[k] += du * 2.0 * z[k] / (denom * denom);
                }
            }
        }
    }

    /// Causally masked attention weights for a full score matrix.
    pub fn weights(&self, z: &Matrix) -> Result<Matrix> {
        let n = check_square(z, "attention weights")?;
        let mut a = Matrix::zeros(n, n);
        for m in 0..n {
            self.row_weights(&z.row(m)[..=m], &mut a.row_mut(m)[..=m]);
        }
        Ok(a)
    }

    /// `∂L/∂z` for the full matrix; masked entries get zero.
    pub fn weights_backward(&self, z: &Matrix, a: &Matrix, da: &Matrix) -> Result<Matrix> {
        let n = check_square(z, "attention backward")?;
        if a.shape() != z.shape() || da.shape() != z.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention backward",
                left: a.shape(),
                right: da.shape(),
            });
        }
        let mut dz = Matrix::zeros(n, n);
        for m in 0..n {
            self.row_backward(
                &z.row(m)[..=m],
                &a.row(m)[..=m],
                &da.row(m)[..=m],
                &mut dz.row_mut(m)[..=m],
            );
        }
        Ok(dz)
    }
}

fn check_square(z: &Matrix, op: &'static str) -> Result<usize> {
    if z.rows() != z.cols() {
        return Err(Error::ShapeMismatch {
            op,
            left: z.shape(),
            right: (z.cols(), z.rows()),
        });
    }
    Ok(z.rows())
}

#[inline]
fn dpa_row(z: &[f64], beta: f64, out: &mut [f64]) {
    let max = z.iter().fold(f64::NEG_INFINITY, |acc, &s| acc.max(beta * s));
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(z) {
        *o = (beta * s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[inline]
fn ea_unnormalized(z: f64) -> f64 {
    let sq = z * z;
    sq / (1.0 + sq)
}

#[inline]
fn ea_row(z: &[f64], out: &mut [f64]) {
    let mut norm = 0.0;
    for (o, &s) in out.iter_mut().zip(z) {
        *o = ea_unnormalized(s);
        norm += *o;
    }
    if norm < EA_DEGENERATE_NORM {
        let uniform = 1.0 / z.len() as f64;
        out.iter_mut().for_each(|o| *o = uniform);
    } else {
        out.iter_mut().for_each(|o| *o /= norm);
    }
}

/// `z = Q Kᵀ`.
pub fn scores(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "scores",
            left: q.shape(),
            right: k.shape(),
        });
    }
    Ok(Matrix::from_fn(q.rows(), k.rows(), |m, j| dot(q.row(m), k.row(j))))
}

pub fn dpa_weights(z: &Matrix, beta: f64) -> Result<Matrix> {
    AttentionKernelSpec::dpa(beta).weights(z)
}

pub fn ea_weights(z: &Matrix) -> Result<Matrix> {
    AttentionKernelSpec::ea().weights(z)
}

/// `y = a V`.
pub fn apply_attention(a: &Matrix, v: &Matrix) -> Result<Matrix> {
    if a.cols() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "apply_attention",
            left: a.shape(),
            right: v.shape(),
        });
    }
    let mut y = Matrix::zeros(a.rows(), v.cols());
    for m in 0..a.rows() {
        let out = y.row_mut(m);
        for (k, &w) in a.row(m).iter().enumerate() {
            if w != 0.0 {
                axpy(w, v.row(k), out);
            }
        }
    }
    Ok(y)
}

/// Elementwise `log10(max(a, 1e-12))`.
pub fn attention_log_heatmap(a: &Matrix) -> Matrix {
    a.map(|x| x.max(LOG_FLOOR).log10())
}

/// Writes a matrix as headerless row-major CSV.
pub fn write_matrix_csv<W: Write>(writer: W, m: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn scores_identity_and_sign_flip() {
        let q = Matrix::identity(3);
        assert_eq!(scores(&q, &q).unwrap(), Matrix::identity(3));
        let q = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 3.0]]);
        let neg = q.scale(-1.0);
        let z = scores(&q, &neg).unwrap();
        let expected = scores(&q, &q).unwrap().scale(-1.0);
        assert_eq!(z, expected);
    }

    #[test]
    fn scores_shape_mismatch() {
        assert!(scores(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn dpa_rows() {
        let z = Matrix::from_rows(&[vec![5.0, 0.0], vec![0.7, 0.7]]);
        let a = dpa_weights(&z, 1.0).unwrap();
        assert_eq!(a.row(0), &[1.0, 0.0]);
        assert!(close(a.row(1), &[0.5, 0.5], 1e-15));

        let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0]]);
        let a = dpa_weights(&z, 1.0).unwrap();
        assert!(close(a.row(1), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn ea_rows() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, -1.0, 0.0], vec![3.0, 0.0, 9.0]]);
        let a = ea_weights(&z).unwrap();
        // row 0 is all-zero: uniform over the single unmasked key
        assert_eq!(a.row(0), &[1.0, 0.0, 0.0]);
        assert!(close(a.row(1), &[0.5, 0.5, 0.0], 1e-15));
        let u = [0.9, 0.0, 81.0 / 82.0];
        let n: f64 = u.iter().sum();
        assert!(close(a.row(2), &[u[0] / n, 0.0, u[2] / n], 1e-15));
        assert_eq!(a.get(2, 1), 0.0);

        let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]]);
        assert_eq!(ea_weights(&z).unwrap().row(1), &[1.0, 0.0]);
    }

    #[test]
    fn ea_all_zero_row_is_uniform() {
        let a = ea_weights(&Matrix::zeros(4, 4)).unwrap();
        assert!(close(a.row(3), &[0.25; 4], 0.0));
        assert!(close(a.row(1), &[0.5, 0.5, 0.0, 0.0], 0.0));
    }

    #[test]
    fn ea_degenerate_row_has_zero_gradient() {
        let z = Matrix::zeros(3, 3);
        let spec = AttentionKernelSpec::ea();
        let a = spec.weights(&z).unwrap();
        let da = Matrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64);
        let dz = spec.weights_backward(&z, &a, &da).unwrap();
        assert!(dz.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_identity_and_mean() {
        let v = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![0.5, 0.5]]);
        assert_eq!(apply_attention(&Matrix::identity(3), &v).unwrap(), v);
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]]);
        let y = apply_attention(&a, &v).unwrap();
        assert_eq!(y.row(1), &[2.0, -1.0]);
        assert!(apply_attention(&Matrix::zeros(2, 2), &v).is_err());
    }

    #[test]
    fn log_heatmap_values() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.01]]);
        let h = attention_log_heatmap(&a);
        assert_eq!(h.get(0, 0), 0.0);
        assert_eq!(h.get(0, 1), -12.0);
        assert!((h.get(0, 2) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("EA".parse::<AttentionKind>().unwrap(), AttentionKind::Ea);
        assert_eq!("dpa".parse::<AttentionKind>().unwrap(), AttentionKind::Dpa);
        assert!("softmax".parse::<AttentionKind>().is_err());
    }

    #[test]
    fn csv_export() {
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &Matrix::from_rows(&[vec![1.0, 0.0], vec![0.25, 0.75]])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "1e0,0e0\n2.5e-1,7.5e-1\n");
    }
}
