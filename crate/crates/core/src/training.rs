// SPDX-License-Identifier: Apache-2.0

//! Training and evaluation protocol.
//!
//! An epoch draws one fresh random series of length `N_con + N_batch`, loads
//! its first `N_con` symbols as context and then predicts the next `N_batch`
//! symbols one by one. Each prediction is followed by an SGD-with-momentum
//! update and the window slides forward over the ground truth (teacher
//! forcing). Evaluation rolls the model out autoregressively: every
//! prediction is appended to the context and scored against the true
//! continuation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, Workspace};
use crate::tasks::{generate_series, random_initial_state, Symbol, TaskSpec};

/// RNG streams derived from one run seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_FINAL: u64 = 3;

pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One update after every prediction.
    PerPrediction,
    /// Gradients averaged over the epoch's predictions, one update per epoch.
    PerBatch,
}

/// How the squared readout error is reduced over the `d` output components
/// before differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over components, `Σᵢ (rᵢ − tᵢ)² / d`.
    Mean,
    /// Plain sum, `Σᵢ (rᵢ − tᵢ)²`.
    Sum,
}

/// Learning-rate multiplier applied from `epoch` (0-based) onwards.
/// Multipliers of several steps compound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_predictions: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: Vec<LrStep>,
    pub eval_every: usize,
    pub n_test_during: usize,
    pub n_gen_during: usize,
    pub n_test_final: usize,
    pub n_gen_final: usize,
    pub n_runs: usize,
    pub base_seed: u64,
    pub divergence_abort_threshold: f64,
    pub update_mode: UpdateMode,
    pub loss_reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_predictions: 40,
            lr: 0.02,
            momentum: 0.8,
            lr_schedule: Vec::new(),
            eval_every: 10,
            n_test_during: 100,
            n_gen_during: 50,
            n_test_final: 10_000,
            n_gen_final: 100,
            n_runs: 16,
            base_seed: 0,
            divergence_abort_threshold: 1e6,
            update_mode: UpdateMode::PerPrediction,
            loss_reduction: LossReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_predictions", self.batch_predictions),
            ("eval_every", self.eval_every),
            ("n_runs", self.n_runs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be positive")));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "lr {} / momentum {} out of range",
                self.lr, self.momentum
            )));
        }
        if !(self.divergence_abort_threshold > 0.0) {
            return Err(Error::Config("divergence_abort_threshold must be positive".into()));
        }
        if self.lr_schedule.iter().any(|s| !(s.multiplier >= 0.0)) {
            return Err(Error::Config("lr_schedule multipliers must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|s| s.epoch <= epoch)
            .fold(self.lr, |lr, s| lr * s.multiplier)
    }

    pub fn is_eval_epoch(&self, epoch: usize) -> bool {
        (epoch + 1) % self.eval_every == 0
    }
}

/// Weighted set of tasks; one task is drawn per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMixture {
    components: Vec<(TaskSpec, f64)>,
}

impl TaskMixture {
    pub fn new(components: Vec<(TaskSpec, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("empty task mixture".into()));
        }
        if components.iter().any(|&(_, w)| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = components.iter().map(|&(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(Error::Config("mixture weights sum to zero".into()));
        }
        let components = components.into_iter().map(|(t, w)| (t, w / total)).collect();
        Ok(Self { components })
    }

    pub fn single(task: TaskSpec) -> Self {
        Self {
            components: vec![(task, 1.0)],
        }
    }

    pub fn components(&self) -> &[(TaskSpec, f64)] {
        &self.components
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskSpec> + '_ {
        self.components.iter().map(|&(t, _)| t)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSpec {
        if self.components.len() == 1 {
            return self.components[0].0;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(task, w) in &self.components {
            acc += w;
            if u < acc {
                return task;
            }
        }
        self.components.last().expect("nonempty").0
    }

    pub fn max_window(&self) -> usize {
        self.tasks().map(|t| t.window()).max().unwrap_or(1)
    }

    pub fn basis(&self) -> Result<usize> {
        let basis = self.components[0].0.basis();
        if self.tasks().any(|t| t.basis() != basis) {
            return Err(Error::Config("mixture tasks must share one basis".into()));
        }
        Ok(basis)
    }
}

/// `v ← μ v − ε g`, then `θ ← θ + v`.
pub fn sgd_momentum_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], momentum: f64, lr: f64) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_momentum_step",
            left: (params.len(), velocity.len()),
            right: (grads.len(), 1),
        });
    }
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Sliding `(context, target)` pairs over a ground-truth series.
pub fn teacher_forced_pairs(series: &[Symbol], context_len: usize) -> impl Iterator<Item = (&[Symbol], Symbol)> {
    series
        .windows(context_len + 1)
        .map(move |w| (&w[..context_len], w[context_len]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub final_loss: f64,
    pub updates: usize,
}

/// Reusable buffers for training one model.
pub struct Trainer {
    pub params: ModelParams,
    pub velocity: Vec<f64>,
    workspace: Workspace,
    grads: Vec<f64>,
    accum: Vec<f64>,
}

impl Trainer {
    pub fn new(params: ModelParams) -> Self {
        let workspace = Workspace::new(params.config());
        let grads = params.zeros_like();
        Self {
            velocity: params.zeros_like(),
            accum: params.zeros_like(),
            params,
            workspace,
            grads,
        }
    }

    /// One training epoch on a freshly drawn series of `task`. Reported
    /// losses are always the summed squared error of [`model::loss`].
    pub fn run_epoch<R: Rng + ?Sized>(
        &mut self,
        config: &TrainConfig,
        task: &TaskSpec,
        lr: f64,
        epoch: usize,
        rng: &mut R,
    ) -> Result<EpochStats> {
        let n_con = self.params.config().context_len;
        if n_con < task.window() {
            return Err(Error::Config(format!(
                "context_len {n_con} shorter than the window of {task}"
            )));
        }
        let init = random_initial_state(task, rng);
        let series = generate_series(task, &init, n_con + config.batch_predictions)?;

        let scale = match config.loss_reduction {
            LossReduction::Mean => 1.0 / self.params.config().dim() as f64,
            LossReduction::Sum => 1.0,
        };
        let mut total = 0.0;
        let mut last = 0.0;
        let mut updates = 0;
        if config.update_mode == UpdateMode::PerBatch {
            self.accum.fill(0.0);
        }
        for (context, target) in teacher_forced_pairs(&series, n_con) {
            model::forward_in(&self.params, context, &mut self.workspace).map_err(|e| diverged(epoch, e))?;
            self.grads.fill(0.0);
            let value = model::backward_in(&self.params, &mut self.workspace, target, &mut self.grads)
                .map_err(|e| diverged(epoch, e))?;
            if !value.is_finite() || value > config.divergence_abort_threshold {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss {value}"),
                });
            }
            total += value;
            last = value;
            if scale != 1.0 {
                self.grads.iter_mut().for_each(|g| *g *= scale);
            }
            match config.update_mode {
                UpdateMode::PerPrediction => {
                    sgd_momentum_step(self.params.as_mut_slice(), &mut self.velocity, &self.grads, config.momentum, lr)?;
                    updates += 1;
                }
                UpdateMode::PerBatch => {
                    for (a, g) in self.accum.iter_mut().zip(&self.grads) {
                        *a += g;
                    }
                }
            }
        }
        if config.update_mode == UpdateMode::PerBatch {
            let scale = 1.0 / config.batch_predictions as f64;
            self.accum.iter_mut().for_each(|g| *g *= scale);
            sgd_momentum_step(self.params.as_mut_slice(), &mut self.velocity, &self.accum, config.momentum, lr)?;
            updates += 1;
        }
        Ok(EpochStats {
            mean_loss: total / config.batch_predictions as f64,
            final_loss: last,
            updates,
        })
    }
}

fn diverged(epoch: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(what) => Error::Diverged {
            epoch,
            reason: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// Anything that maps a context window to a next-symbol guess.
pub trait Predictor {
    fn context_len(&self) -> usize;
    fn predict(&mut self, context: &[Symbol]) -> Result<Symbol>;
}

/// Greedy decoding with a trained model.
pub struct ModelPredictor<'a> {
    params: &'a ModelParams,
    workspace: Workspace,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            workspace: Workspace::new(params.config()),
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn context_len(&self) -> usize {
        self.params.config().context_len
    }

    fn predict(&mut self, context: &[Symbol]) -> Result<Symbol> {
        let readout = model::forward_in(self.params, context, &mut self.workspace)?;
        Ok(model::predict_from_readout(readout))
    }
}

/// Predicts with the generating rule itself; always correct.
pub struct TaskOracle {
    pub task: TaskSpec,
    pub context_len: usize,
}

impl Predictor for TaskOracle {
    fn context_len(&self) -> usize {
        self.context_len
    }

    fn predict(&mut self, context: &[Symbol]) -> Result<Symbol> {
        Ok(self.task.next_from_window(context))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_series: usize,
    pub n_gen: usize,
    pub n_correct: usize,
    /// Set when no predictions were made; accuracy is then reported as 1.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// Autoregressive rollouts on `n_series` random series of `task`.
pub fn evaluate<P, R>(predictor: &mut P, task: &TaskSpec, n_series: usize, n_gen: usize, rng: &mut R) -> Result<EvalResult>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let n_con = predictor.context_len();
    if n_con < task.window() {
        return Err(Error::Config(format!(
            "context_len {n_con} shorter than the window of {task}"
        )));
    }
    let total = n_series * n_gen;
    if total == 0 {
        return Ok(EvalResult {
            accuracy: 1.0,
            n_series,
            n_gen,
            n_correct: 0,
            degenerate: true,
        });
    }
    let mut n_correct = 0;
    let mut rollout = Vec::with_capacity(n_con + n_gen);
    for _ in 0..n_series {
        let init = random_initial_state(task, rng);
        let truth = generate_series(task, &init, n_con + n_gen)?;
        rollout.clear();
        rollout.extend_from_slice(&truth[..n_con]);
        for g in 0..n_gen {
            let guess = predictor.predict(&rollout[g..g + n_con])?;
            if guess == truth[n_con + g] {
                n_correct += 1;
            }
            rollout.push(guess);
        }
    }
    Ok(EvalResult {
        accuracy: n_correct as f64 / total as f64,
        n_series,
        n_gen,
        n_correct,
        degenerate: false,
    })
}

/// One row of a run's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: TaskSpec,
    pub train_loss: f64,
    pub lr: f64,
    /// Per-task accuracy, present on evaluation epochs only.
    pub eval: Vec<(TaskSpec, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: usize,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub final_eval: Vec<(TaskSpec, EvalResult)>,
    pub status: RunStatus,
    pub updates: usize,
}

impl RunMetrics {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// `(epoch, accuracy)` on evaluation epochs for `task`.
    pub fn accuracy_series(&self, task: &TaskSpec) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .flat_map(|r| r.eval.iter().filter(|(t, _)| t == task).map(move |&(_, a)| (r.epoch, a)))
            .collect()
    }

    /// Completed epochs when `task` was first evaluated at 100%.
    pub fn epochs_to_perfect(&self, task: &TaskSpec) -> Option<usize> {
        self.accuracy_series(task)
            .into_iter()
            .find(|&(_, a)| a >= 1.0)
            .map(|(e, _)| e + 1)
    }

    pub fn final_accuracy(&self, task: &TaskSpec) -> Option<f64> {
        self.final_eval.iter().find(|(t, _)| t == task).map(|(_, r)| r.accuracy)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: RunMetrics,
}

/// Trains one model from `seed`. Divergence ends the run early and is
/// recorded in the metrics rather than returned as an error.
pub fn train(config: &TrainConfig, model_config: &ModelConfig, mixture: &TaskMixture, run_id: usize, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if mixture.basis()? != model_config.basis {
        return Err(Error::Config(format!(
            "task basis {} differs from model basis {}",
            mixture.basis()?,
            model_config.basis
        )));
    }
    if model_config.context_len < mixture.max_window() {
        return Err(Error::Config(format!(
            "context_len {} shorter than task window {}",
            model_config.context_len,
            mixture.max_window()
        )));
    }

    let params = ModelParams::init(model_config, &mut run_rng(seed, STREAM_INIT));
    let mut trainer = Trainer::new(params);
    let mut train_rng = run_rng(seed, STREAM_TRAIN);
    let mut eval_rng = run_rng(seed, STREAM_EVAL);
    let mut records = Vec::with_capacity(config.epochs);
    let mut updates = 0;
    let mut status = RunStatus::Completed;

    for epoch in 0..config.epochs {
        let task = mixture.sample(&mut train_rng);
        let lr = config.lr_at(epoch);
        let stats = match trainer.run_epoch(config, &task, lr, epoch, &mut train_rng) {
            Ok(s) => s,
            Err(Error::Diverged { epoch, reason }) => {
                status = RunStatus::Diverged { epoch, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        updates += stats.updates;
        let mut eval = Vec::new();
        if config.is_eval_epoch(epoch) {
            let mut predictor = ModelPredictor::new(&trainer.params);
            for t in mixture.tasks() {
                let r = evaluate(&mut predictor, &t, config.n_test_during, config.n_gen_during, &mut eval_rng)?;
                eval.push((t, r.accuracy));
            }
        }
        records.push(EpochRecord {
            epoch,
            task,
            train_loss: stats.mean_loss,
            lr,
            eval,
        });
    }

    let mut final_eval = Vec::new();
    if status == RunStatus::Completed {
        let mut final_rng = run_rng(seed, STREAM_FINAL);
        let mut predictor = ModelPredictor::new(&trainer.params);
        for t in mixture.tasks() {
            let r = evaluate(&mut predictor, &t, config.n_test_final, config.n_gen_final, &mut final_rng)?;
            final_eval.push((t, r));
        }
    }

    Ok(TrainOutcome {
        params: trainer.params,
        metrics: RunMetrics {
            run_id,
            seed,
            records,
            final_eval,
            status,
            updates,
        },
    })
}

/// Summary statistics over runs for one `(epoch, task)` cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub epoch: usize,
    pub task: TaskSpec,
    pub mean_accuracy: Option<f64>,
    pub median_accuracy: Option<f64>,
    pub min_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
    pub n_runs_included: usize,
}

pub struct MultiRunResult {
    pub runs: Vec<TrainOutcome>,
    pub aggregate: Vec<AggregateRow>,
    pub diverged: usize,
}

impl MultiRunResult {
    pub fn metrics(&self) -> impl Iterator<Item = &RunMetrics> {
        self.runs.iter().map(|r| &r.metrics)
    }
}

/// Trains `config.n_runs` models with seeds `base_seed + i`, on at most
/// `jobs` threads. Results come back in run order regardless of scheduling.
pub fn multi_run(config: &TrainConfig, model_config: &ModelConfig, mixture: &TaskMixture, jobs: usize) -> Result<MultiRunResult> {
    config.validate()?;
    let job = |i: usize| train(config, model_config, mixture, i, config.base_seed.wrapping_add(i as u64));
    let runs: Vec<TrainOutcome> = if jobs <= 1 {
        (0..config.n_runs).map(job).collect::<Result<_>>()?
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..config.n_runs).into_par_iter().map(job).collect::<Result<_>>())?
    };
    let metrics: Vec<&RunMetrics> = runs.iter().map(|r| &r.metrics).collect();
    let aggregate = aggregate(&metrics);
    let diverged = metrics.iter().filter(|m| m.diverged()).count();
    Ok(MultiRunResult {
        runs,
        aggregate,
        diverged,
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per-`(epoch, task)` statistics over non-diverged runs. Order-independent:
/// values are sorted before reduction.
pub fn aggregate(runs: &[&RunMetrics]) -> Vec<AggregateRow> {
    let included: Vec<&&RunMetrics> = runs.iter().filter(|m| !m.diverged()).collect();
    let mut acc: BTreeMap<(usize, String), (TaskSpec, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for m in &included {
        for r in &m.records {
            let cell = acc
                .entry((r.epoch, r.task.to_string()))
                .or_insert_with(|| (r.task, Vec::new(), Vec::new()));
            cell.2.push(r.train_loss);
            for &(t, a) in &r.eval {
                acc.entry((r.epoch, t.to_string()))
                    .or_insert_with(|| (t, Vec::new(), Vec::new()))
                    .1
                    .push(a);
            }
        }
    }
    acc.into_iter()
        .map(|((epoch, _), (task, mut accs, mut losses))| {
            accs.sort_by(f64::total_cmp);
            losses.sort_by(f64::total_cmp);
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            AggregateRow {
                epoch,
                task,
                mean_accuracy: mean(&accs),
                median_accuracy: (!accs.is_empty()).then(|| median(&accs)),
                min_accuracy: accs.first().copied(),
                max_accuracy: accs.last().copied(),
                mean_loss: mean(&losses),
                n_runs_included: included.len(),
            }
        })
        .collect()
}

/// Mean accuracy across non-diverged runs for `task` at each evaluation epoch.
pub fn mean_accuracy_curve(aggregate: &[AggregateRow], task: &TaskSpec) -> Vec<(usize, f64)> {
    aggregate
        .iter()
        .filter(|r| &r.task == task)
        .filter_map(|r| r.mean_accuracy.map(|a| (r.epoch, a)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKernelSpec;

    fn task(s: &str) -> TaskSpec {
        s.parse().unwrap()
    }

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_predictions, 40);
        assert_eq!((c.lr, c.momentum), (0.02, 0.8));
        assert_eq!((c.n_test_during, c.n_gen_during), (100, 50));
        assert_eq!((c.n_test_final, c.n_gen_final), (10_000, 100));
        assert_eq!(c.n_runs, 16);
        assert_eq!(c.eval_every, 10);
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_momentum_step(&mut p, &mut v, &[0.5, -1.0], 0.0, 0.1).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 + 0.1]);
        assert!(sgd_momentum_step(&mut p, &mut v, &[0.0], 0.0, 0.1).is_err());
    }

    #[test]
    fn velocity_decays_geometrically() {
        let mut p = vec![0.0];
        let mut v = vec![1.0];
        for k in 1..=5 {
            sgd_momentum_step(&mut p, &mut v, &[0.0], 0.8, 0.02).unwrap();
            assert!((v[0] - 0.8f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_momentum_steps_closed_form() {
        let mut p = vec![3.0];
        let mut v = vec![0.0];
        let g = 1.5;
        sgd_momentum_step(&mut p, &mut v, &[g], 0.8, 0.02).unwrap();
        sgd_momentum_step(&mut p, &mut v, &[g], 0.8, 0.02).unwrap();
        assert!((p[0] - 3.0 - (-0.02 * g * 2.8)).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_boundary() {
        let c = TrainConfig {
            lr_schedule: vec![LrStep {
                epoch: 2500,
                multiplier: 0.25,
            }],
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.02);
        assert_eq!(c.lr_at(2499), 0.02);
        assert_eq!(c.lr_at(2500), 0.005);
        assert_eq!(c.lr_at(4000), 0.005);
    }

    #[test]
    fn mixture_normalizes_and_samples() {
        let m = TaskMixture::new(vec![(task("N16T2"), 2.0), (task("N16T2-S"), 2.0)]).unwrap();
        assert_eq!(m.components()[0].1, 0.5);
        let mut rng = run_rng(5, 0);
        let n = 2000;
        let first = (0..n).filter(|_| m.sample(&mut rng) == task("N16T2")).count();
        assert!((first as i64 - 1000).abs() <= 70, "{first}");
        assert!(TaskMixture::new(vec![]).is_err());
        assert!(TaskMixture::new(vec![(task("N2T1"), 0.0)]).is_err());
        assert!(TaskMixture::new(vec![(task("N2T1"), 1.0), (task("N3T1"), 1.0)])
            .unwrap()
            .basis()
            .is_err());
    }

    #[test]
    fn teacher_forcing_uses_ground_truth_only() {
        let t = task("N16T2");
        let series = generate_series(&t, &random_initial_state(&t, &mut run_rng(1, 0)), 8 + 40).unwrap();
        let pairs: Vec<_> = teacher_forced_pairs(&series, 8).collect();
        assert_eq!(pairs.len(), 40);
        for (i, (ctx, target)) in pairs.iter().enumerate() {
            assert_eq!(*ctx, &series[i..i + 8]);
            assert_eq!(*target, series[i + 8]);
            assert_eq!(*target, t.next_from_window(ctx));
        }
    }

    /// Records the contexts it is shown and answers with a fixed symbol.
    struct Recorder {
        n_con: usize,
        answer: Symbol,
        seen: Vec<Vec<Symbol>>,
    }

    impl Predictor for Recorder {
        fn context_len(&self) -> usize {
            self.n_con
        }

        fn predict(&mut self, context: &[Symbol]) -> Result<Symbol> {
            self.seen.push(context.to_vec());
            Ok(self.answer)
        }
    }

    #[test]
    fn evaluation_feeds_back_predictions() {
        let t = task("N16T2");
        let mut rec = Recorder {
            n_con: 6,
            answer: 11,
            seen: Vec::new(),
        };
        evaluate(&mut rec, &t, 3, 10, &mut run_rng(2, 0)).unwrap();
        assert_eq!(rec.seen.len(), 30);
        for series in rec.seen.chunks(10) {
            for (g, ctx) in series.iter().enumerate() {
                // the last g symbols are the model's own outputs
                let fed = g.min(6);
                assert!(ctx[6 - fed..].iter().all(|&s| s == 11));
            }
        }
    }

    #[test]
    fn oracle_is_perfect_on_every_variant() {
        for s in ["N2T1", "N16T2", "N16T2-S", "N16T2-R", "N2T5", "N4T3-R"] {
            let t = task(s);
            let mut oracle = TaskOracle { task: t, context_len: 8 };
            let r = evaluate(&mut oracle, &t, 50, 30, &mut run_rng(3, 0)).unwrap();
            assert_eq!(r.accuracy, 1.0, "{s}");
            assert_eq!(r.n_correct, 1500);
        }
    }

    #[test]
    fn zero_generation_is_degenerate() {
        let t = task("N2T1");
        let mut oracle = TaskOracle { task: t, context_len: 4 };
        let r = evaluate(&mut oracle, &t, 10, 0, &mut run_rng(3, 0)).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.accuracy, r.n_correct), (1.0, 0));
    }

    fn small_model() -> ModelConfig {
        ModelConfig::new(4, 6, AttentionKernelSpec::ea())
    }

    #[test]
    fn epoch_update_count_and_zero_lr() {
        let cfg = TrainConfig::default();
        let params = ModelParams::init(&small_model(), &mut run_rng(7, 0));
        let before = params.clone();
        let mut trainer = Trainer::new(params);
        let stats = trainer
            .run_epoch(&cfg, &task("N4T2"), 0.0, 0, &mut run_rng(7, 1))
            .unwrap();
        assert_eq!(stats.updates, 40);
        assert!(stats.mean_loss.is_finite() && stats.final_loss.is_finite());
        assert_eq!(trainer.params, before);

        let per_batch = TrainConfig {
            update_mode: UpdateMode::PerBatch,
            ..Default::default()
        };
        let stats = trainer
            .run_epoch(&per_batch, &task("N4T2"), 0.02, 1, &mut run_rng(7, 1))
            .unwrap();
        assert_eq!(stats.updates, 1);
        assert_ne!(trainer.params, before);
    }

    #[test]
    fn epoch_is_deterministic() {
        let cfg = TrainConfig::default();
        let run = || {
            let params = ModelParams::init(&small_model(), &mut run_rng(8, 0));
            let mut trainer = Trainer::new(params);
            let s = trainer.run_epoch(&cfg, &task("N4T2"), 0.02, 0, &mut run_rng(8, 1)).unwrap();
            (s.mean_loss.to_bits(), trainer.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_flagged() {
        let cfg = TrainConfig {
            divergence_abort_threshold: 1e-9,
            epochs: 5,
            n_runs: 1,
            ..Default::default()
        };
        let out = train(&cfg, &small_model(), &TaskMixture::single(task("N4T2")), 0, 1).unwrap();
        assert!(matches!(out.metrics.status, RunStatus::Diverged { epoch: 0, .. }));
        assert!(out.metrics.final_eval.is_empty());
    }

    #[test]
    fn train_records_and_update_count() {
        let cfg = TrainConfig {
            epochs: 12,
            eval_every: 5,
            n_test_during: 5,
            n_gen_during: 4,
            n_test_final: 7,
            n_gen_final: 3,
            n_runs: 1,
            ..Default::default()
        };
        let out = train(&cfg, &small_model(), &TaskMixture::single(task("N4T2")), 0, 11).unwrap();
        let m = &out.metrics;
        assert_eq!(m.records.len(), 12);
        assert_eq!(m.updates, 12 * 40);
        let evals: Vec<usize> = m.records.iter().filter(|r| !r.eval.is_empty()).map(|r| r.epoch).collect();
        assert_eq!(evals, vec![4, 9]);
        assert_eq!(m.final_eval[0].1.n_series, 7);
        assert!(m.records.iter().all(|r| r.eval.iter().all(|&(_, a)| (0.0..=1.0).contains(&a))));
    }

    #[test]
    fn context_shorter_than_window_is_rejected() {
        let cfg = TrainConfig::default();
        let m = ModelConfig::new(4, 2, AttentionKernelSpec::ea());
        assert!(train(&cfg, &m, &TaskMixture::single(task("N4T2")), 0, 0).is_err());
    }

    #[test]
    fn aggregate_single_run_equals_run() {
        let cfg = TrainConfig {
            epochs: 6,
            eval_every: 3,
            n_test_during: 4,
            n_gen_during: 5,
            n_test_final: 2,
            n_gen_final: 2,
            n_runs: 1,
            ..Default::default()
        };
        let res = multi_run(&cfg, &small_model(), &TaskMixture::single(task("N4T2")), 1).unwrap();
        let m = &res.runs[0].metrics;
        for row in &res.aggregate {
            let rec = &m.records[row.epoch];
            assert_eq!(row.mean_loss, Some(rec.train_loss));
            let acc = rec.eval.first().map(|&(_, a)| a);
            assert_eq!(row.mean_accuracy, acc);
            assert_eq!(row.min_accuracy, acc);
            assert_eq!(row.median_accuracy, acc);
        }
    }

    #[test]
    fn aggregate_is_order_independent_and_matches_means() {
        let cfg = TrainConfig {
            epochs: 4,
            eval_every: 2,
            n_test_during: 4,
            n_gen_during: 5,
            n_test_final: 2,
            n_gen_final: 2,
            n_runs: 3,
            ..Default::default()
        };
        let res = multi_run(&cfg, &small_model(), &TaskMixture::single(task("N4T2")), 1).unwrap();
        let ms: Vec<&RunMetrics> = res.metrics().collect();
        let reversed: Vec<&RunMetrics> = ms.iter().rev().copied().collect();
        assert_eq!(aggregate(&ms), aggregate(&reversed));
        for row in res.aggregate.iter().filter(|r| r.mean_accuracy.is_some()) {
            let vals: Vec<f64> = ms.iter().map(|m| m.records[row.epoch].eval[0].1).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((row.mean_accuracy.unwrap() - mean).abs() < 1e-12);
        }
    }
}
