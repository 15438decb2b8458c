// SPDX-License-Identifier: Apache-2.0

//! Shared fixtures for the criterion benchmarks.

use ea_lab_core::model::{ModelConfig, ModelParams};
use ea_lab_core::tasks::{generate_series, random_initial_state};
use ea_lab_core::training::run_rng;
use ea_lab_core::{AttentionKernelSpec, Matrix, Symbol, TaskSpec, WeightSharing};

/// Deterministic score matrix with entries in `[-2, 2)`.
pub fn score_matrix(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| (((i * 31 + j * 17) % 97) as f64 / 97.0) * 4.0 - 2.0)
}

/// A freshly initialized model and one context/target pair from `task`.
pub fn model_fixture(task: &str, n_con: usize, kernel: AttentionKernelSpec, sharing: WeightSharing) -> (ModelParams, Vec<Symbol>, Symbol) {
    let task: TaskSpec = task.parse().expect("task");
    let mc = ModelConfig::new(task.basis(), n_con, kernel).with_sharing(sharing);
    let mut rng = run_rng(7, 0);
    let params = ModelParams::init(&mc, &mut rng);
    let series = generate_series(&task, &random_initial_state(&task, &mut rng), n_con + 1).expect("series");
    let target = series[n_con];
    (params, series[..n_con].to_vec(), target)
}
