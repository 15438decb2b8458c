// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use ea_lab_core::attention::{self, AttentionKind};
use ea_lab_core::model::{ModelParams, Slot, WeightSharing};
use ea_lab_core::numeric::{layer_norm, Matrix};
use ea_lab_core::Symbol;

fn mat(params: &ModelParams, slot: &Slot, copy: usize) -> Matrix {
    let size = slot.rows * slot.cols;
    let data = params.tensor(slot)[copy * size..(copy + 1) * size].to_vec();
    Matrix::from_vec(slot.rows, slot.cols, data).unwrap()
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
}

/// Straight-line forward pass written against the public matrix API only.
/// Returns the readout and the attention matrix.
pub fn reference_forward(params: &ModelParams, context: &[Symbol]) -> (Vec<f64>, Matrix) {
    let cfg = params.config();
    let lay = params.layout();
    let n = cfg.context_len;
    let d = cfg.basis;
    let copy = |m: usize| match cfg.weight_sharing {
        WeightSharing::Shared => 0,
        WeightSharing::PerPosition => m,
    };
    let g1 = params.tensor(&lay.ln1_gain);
    let b1 = params.tensor(&lay.ln1_bias);
    let g2 = params.tensor(&lay.ln2_gain);
    let b2 = params.tensor(&lay.ln2_bias);

    let x = Matrix::from_fn(n, d, |m, j| if context[m] == j { 1.0 } else { 0.0 });
    let mut q = Matrix::zeros(n, d);
    let mut k = Matrix::zeros(n, d);
    let mut v = Matrix::zeros(n, d);
    for m in 0..n {
        let l1 = row(&layer_norm(x.row(m), g1, b1, cfg.ln_eps).unwrap());
        q.row_mut(m).copy_from_slice(l1.matmul(&mat(params, &lay.w_q, copy(m))).unwrap().row(0));
        k.row_mut(m).copy_from_slice(l1.matmul(&mat(params, &lay.w_k, copy(m))).unwrap().row(0));
        v.row_mut(m).copy_from_slice(l1.matmul(&mat(params, &lay.w_v, copy(m))).unwrap().row(0));
    }
    let z = attention::scores(&q, &k).unwrap();
    let a = match cfg.kernel.kind {
        AttentionKind::Dpa => attention::dpa_weights(&z, cfg.kernel.beta).unwrap(),
        AttentionKind::Ea => attention::ea_weights(&z).unwrap(),
    };
    let att = attention::apply_attention(&a, &v).unwrap();

    let mut flat = Vec::with_capacity(n * d);
    for m in 0..n {
        let o = row(att.row(m)).matmul(&mat(params, &lay.w_o, copy(m))).unwrap();
        let h = row(x.row(m)).add(&o).unwrap();
        let l2 = row(&layer_norm(h.row(0), g2, b2, cfg.ln_eps).unwrap());
        let pre = l2
            .matmul(&mat(params, &lay.w_ff1, copy(m)))
            .unwrap()
            .add(&mat(params, &lay.b_ff1, copy(m)))
            .unwrap();
        let y = h
            .add(&pre.tanh_map().matmul(&mat(params, &lay.w_ff2, copy(m))).unwrap())
            .unwrap()
            .add(&mat(params, &lay.b_ff2, copy(m)))
            .unwrap();
        flat.extend_from_slice(y.row(0));
    }
    let readout = row(&flat)
        .matmul(&mat(params, &lay.w_readout, 0))
        .unwrap()
        .add(&mat(params, &lay.b_readout, 0))
        .unwrap();
    (readout.into_vec(), a)
}
