// SPDX-License-Identifier: Apache-2.0

//! Declarative experiment configs, named presets and run directories.
//!
//! A run directory holds
//!
//! ```text
//! config.json        effective config (replaying it reproduces the run)
//! metrics.csv        run_id,seed,epoch,task,train_loss,eval_accuracy,lr
//! aggregate.csv      per (epoch, task) statistics over non-diverged runs
//! final_eval.json    pooled and per-run final evaluation
//! checkpoints/       run_000.json, ... (completed runs only)
//! ```
//!
//! Every file is written to a temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::{attention_log_heatmap, write_matrix_csv, AttentionKernelSpec, AttentionKind};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, WeightSharing, DEFAULT_INIT_GAIN};
use crate::numeric::{finite_difference_check, GradCheckOptions, GradCheckReport, Matrix, LN_EPS};
use crate::tasks::{generate_series, random_initial_state, Symbol, TaskSpec};
use crate::training::{multi_run, run_rng, AggregateRow, LrStep, MultiRunResult, RunMetrics, RunStatus, TaskMixture, TrainConfig};

/// DPA inverse temperature: a number, or `"inv_sqrt_context"` for `1/√N_con`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beta {
    Value(f64),
    Rule(BetaRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    InvSqrtContext,
}

impl Default for Beta {
    fn default() -> Self {
        Beta::Value(1.0)
    }
}

impl Beta {
    pub fn resolve(self, context_len: usize) -> f64 {
        match self {
            Beta::Value(b) => b,
            Beta::Rule(BetaRule::InvSqrtContext) => 1.0 / (context_len as f64).sqrt(),
        }
    }
}

fn default_hidden_factor() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    LN_EPS
}

fn default_init_gain() -> f64 {
    DEFAULT_INIT_GAIN
}

fn default_sharing() -> WeightSharing {
    WeightSharing::Shared
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub context_len: usize,
    pub kernel: AttentionKind,
    #[serde(default)]
    pub beta: Beta,
    #[serde(default = "default_sharing")]
    pub weight_sharing: WeightSharing,
    #[serde(default = "default_hidden_factor")]
    pub hidden_factor: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_init_gain")]
    pub init_gain: f64,
}

impl ModelSection {
    pub fn new(context_len: usize, kernel: AttentionKind) -> Self {
        Self {
            context_len,
            kernel,
            beta: Beta::default(),
            weight_sharing: WeightSharing::Shared,
            hidden_factor: default_hidden_factor(),
            ln_eps: LN_EPS,
            init_gain: DEFAULT_INIT_GAIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub task: TaskSpec,
    pub weight: f64,
}

/// One experiment: a task (or weighted mixture), a model and a training
/// protocol. Exactly one of `task` and `mixture` must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Vec<MixtureEntry>>,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn single(task: TaskSpec, model: ModelSection, train: TrainConfig) -> Self {
        Self {
            name: None,
            task: Some(task),
            mixture: None,
            model,
            train,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mixture = self.mixture()?;
        let mc = self.model_config()?;
        mc.validate()?;
        self.train.validate()?;
        if mixture.basis()? != mc.basis {
            return Err(Error::Config("mixture tasks must share one basis".into()));
        }
        if mc.context_len < mixture.max_window() {
            return Err(Error::Config(format!(
                "context_len {} shorter than task window {}",
                mc.context_len,
                mixture.max_window()
            )));
        }
        Ok(())
    }

    pub fn mixture(&self) -> Result<TaskMixture> {
        match (&self.task, &self.mixture) {
            (Some(t), None) => Ok(TaskMixture::single(*t)),
            (None, Some(entries)) => TaskMixture::new(entries.iter().map(|e| (e.task, e.weight)).collect()),
            _ => Err(Error::Config("exactly one of `task` and `mixture` must be set".into())),
        }
    }

    /// Basis of the first task; mixtures are checked for consistency in
    /// [`validate`](Self::validate).
    fn basis(&self) -> Result<usize> {
        match (&self.task, &self.mixture) {
            (Some(t), _) => Ok(t.basis()),
            (None, Some(e)) if !e.is_empty() => Ok(e[0].task.basis()),
            _ => Err(Error::Config("no task given".into())),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let kernel = match m.kernel {
            AttentionKind::Dpa => AttentionKernelSpec::dpa(m.beta.resolve(m.context_len)),
            AttentionKind::Ea => AttentionKernelSpec::ea(),
        };
        let mut mc = ModelConfig::new(self.basis()?, m.context_len, kernel).with_sharing(m.weight_sharing);
        mc.hidden_factor = m.hidden_factor;
        mc.ln_eps = m.ln_eps;
        mc.init_gain = m.init_gain;
        Ok(mc)
    }

    pub fn default_output_dir(&self) -> PathBuf {
        match (&self.output_dir, &self.name) {
            (Some(dir), _) => dir.clone(),
            (None, Some(name)) => Path::new("runs").join(name),
            (None, None) => PathBuf::from("runs/experiment"),
        }
    }
}

fn preset_single(name: &str, task: &str, model: ModelSection, epochs: usize) -> ExperimentConfig {
    let train = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mut c = ExperimentConfig::single(task.parse().expect("preset task"), model, train);
    c.name = Some(name.to_string());
    c
}

fn kernel_tag(kind: AttentionKind) -> &'static str {
    kind.as_str()
}

/// All shipped presets, in a stable order.
pub fn presets() -> Vec<ExperimentConfig> {
    let kinds = [AttentionKind::Dpa, AttentionKind::Ea];
    let mut out = Vec::new();
    for n_con in [32, 52, 56] {
        for kind in kinds {
            let epochs = if n_con == 32 { 2000 } else { 500 };
            let name = format!("fig2_{}_c{n_con}", kernel_tag(kind));
            out.push(preset_single(&name, "N16T2", ModelSection::new(n_con, kind), epochs));
        }
    }
    for kind in kinds {
        let mut m = ModelSection::new(16, kind);
        m.weight_sharing = WeightSharing::PerPosition;
        // Two-component layer norm turns near-degenerate whenever both
        // residual components coincide; a larger eps caps its gain.
        m.ln_eps = 0.1;
        out.push(preset_single(&format!("fig3_{}", kernel_tag(kind)), "N2T5", m, 4000));
    }
    for kind in kinds {
        let mut m = ModelSection::new(128, kind);
        m.weight_sharing = WeightSharing::PerPosition;
        out.push(preset_single(&format!("fig4_{}", kernel_tag(kind)), "N16T5", m, 2000));
    }
    for (name, kind) in [("fig5_mixture", AttentionKind::Ea), ("fig5_mixture_dpa", AttentionKind::Dpa)] {
        let train = TrainConfig {
            epochs: 5000,
            lr_schedule: vec![LrStep {
                epoch: 2500,
                multiplier: 0.25,
            }],
            ..TrainConfig::default()
        };
        out.push(ExperimentConfig {
            name: Some(name.to_string()),
            task: None,
            mixture: Some(vec![
                MixtureEntry {
                    task: "N16T2".parse().expect("task"),
                    weight: 0.5,
                },
                MixtureEntry {
                    task: "N16T2-S".parse().expect("task"),
                    weight: 0.5,
                },
            ]),
            model: ModelSection::new(32, kind),
            train,
            output_dir: None,
        });
    }
    for n_con in [64, 128] {
        for kind in kinds {
            let name = format!("fig6_{}_c{n_con}", kernel_tag(kind));
            out.push(preset_single(&name, "N16T2-R", ModelSection::new(n_con, kind), 5000));
        }
    }
    out
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    presets().into_iter().find(|p| p.name.as_deref() == Some(name))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn opt<T: Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `metrics.csv` for runs in the given order. Each epoch gets one row for the
/// task it trained on; on evaluation epochs every other mixture task adds a
/// row with a blank `train_loss`.
pub fn metrics_csv<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "seed", "epoch", "task", "train_loss", "eval_accuracy", "lr"])?;
    for m in runs {
        for r in &m.records {
            let own = r.eval.iter().find(|(t, _)| *t == r.task).map(|&(_, a)| a);
            w.write_record([
                m.run_id.to_string(),
                m.seed.to_string(),
                r.epoch.to_string(),
                r.task.to_string(),
                r.train_loss.to_string(),
                opt(own),
                r.lr.to_string(),
            ])?;
            for &(t, a) in r.eval.iter().filter(|(t, _)| *t != r.task) {
                w.write_record([
                    m.run_id.to_string(),
                    m.seed.to_string(),
                    r.epoch.to_string(),
                    t.to_string(),
                    String::new(),
                    a.to_string(),
                    r.lr.to_string(),
                ])?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "epoch",
        "task",
        "mean_accuracy",
        "median_accuracy",
        "min_accuracy",
        "max_accuracy",
        "mean_loss",
        "n_runs_included",
    ])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.task.to_string(),
            opt(r.mean_accuracy),
            opt(r.median_accuracy),
            opt(r.min_accuracy),
            opt(r.max_accuracy),
            opt(r.mean_loss),
            r.n_runs_included.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// `final_eval.json`: per-task results pooled over completed runs, followed
/// by every run's own record.
pub fn final_eval_json<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> String {
    let mut pooled: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let mut per_run = Vec::new();
    let mut diverged = 0;
    for m in runs {
        let mut tasks = serde_json::Map::new();
        for (t, r) in &m.final_eval {
            let p = pooled.entry(t.to_string()).or_default();
            p.0 += r.n_series;
            p.1 += r.n_series * r.n_gen;
            p.2 += r.n_correct;
            tasks.insert(
                t.to_string(),
                json!({"accuracy": r.accuracy, "n_series": r.n_series, "n_gen": r.n_gen, "n_correct": r.n_correct}),
            );
        }
        let mut entry = json!({"run_id": m.run_id, "seed": m.seed, "tasks": tasks});
        match &m.status {
            RunStatus::Completed => entry["status"] = json!("completed"),
            RunStatus::Diverged { epoch, reason } => {
                diverged += 1;
                entry["status"] = json!("diverged");
                entry["diverged_epoch"] = json!(epoch);
                entry["reason"] = json!(reason);
            }
        }
        per_run.push(entry);
    }
    let tasks: serde_json::Map<String, serde_json::Value> = pooled
        .into_iter()
        .map(|(t, (n_series, n_pred, n_correct))| {
            let accuracy = if n_pred == 0 { 1.0 } else { n_correct as f64 / n_pred as f64 };
            (t, json!({"accuracy": accuracy, "n_series": n_series, "n_predictions": n_pred, "n_correct": n_correct}))
        })
        .collect();
    let doc = json!({"tasks": tasks, "diverged_runs": diverged, "runs": per_run});
    serde_json::to_string_pretty(&doc).expect("json") + "\n"
}

pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub result: MultiRunResult,
}

impl ExperimentOutcome {
    pub fn all_diverged(&self) -> bool {
        self.result.diverged == self.result.runs.len()
    }
}

/// Trains every seed of `config` on up to `jobs` threads and fills `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mixture = config.mixture()?;
    let mc = config.model_config()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("config.json"), (config.to_json() + "\n").as_bytes())?;

    let result = multi_run(&config.train, &mc, &mixture, jobs.max(1))?;

    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    for run in result.runs.iter().filter(|r| !r.metrics.diverged()) {
        let path = ckpt_dir.join(format!("run_{:03}.json", run.metrics.run_id));
        let ckpt = Checkpoint::new(&run.params, run.metrics.seed, run.metrics.records.len());
        write_atomic(&path, serde_json::to_string(&ckpt)?.as_bytes())?;
    }
    write_atomic(&dir.join("metrics.csv"), &metrics_csv(result.metrics())?)?;
    write_atomic(&dir.join("final_eval.json"), final_eval_json(result.metrics()).as_bytes())?;
    write_atomic(&dir.join("aggregate.csv"), &aggregate_csv(&result.aggregate)?)?;
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        result,
    })
}

/// Finite-difference check of the full model gradient on one random
/// context/target pair drawn from `task`.
pub fn gradcheck_model(mc: &ModelConfig, task: &TaskSpec, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    mc.validate()?;
    let mut rng = run_rng(seed, 0);
    let mut params = ModelParams::init(mc, &mut rng);
    // Perturb off the symmetric init so zero biases and unit gains are
    // exercised at generic values too.
    for p in params.as_mut_slice() {
        *p += rng.gen_range(-0.1..0.1);
    }
    let n = mc.context_len;
    let series = generate_series(task, &random_initial_state(task, &mut rng), n + 1)?;
    let (context, target) = (&series[..n], series[n]);
    let (_, grads) = model::backward(&params, context, target)?;
    let mut scratch = params.clone();
    let loss_fn = |theta: &[f64]| {
        scratch.as_mut_slice().copy_from_slice(theta);
        model::forward(&scratch, context)
            .map(|o| model::loss(&o.readout, target))
            .unwrap_or(f64::NAN)
    };
    finite_difference_check(loss_fn, params.as_slice(), &grads, opts, &mut rng)
}

pub struct AttentionDump {
    pub weights: Matrix,
    pub log10: Matrix,
    /// Smallest log₁₀ weight over the causal (unmasked) entries.
    pub min_log10: f64,
}

pub fn attention_dump(params: &ModelParams, context: &[Symbol]) -> Result<AttentionDump> {
    let weights = model::forward(params, context)?.attention;
    let log10 = attention_log_heatmap(&weights);
    let n = weights.rows();
    let min_log10 = (0..n)
        .flat_map(|m| (0..=m).map(move |k| (m, k)))
        .map(|(m, k)| log10.get(m, k))
        .fold(f64::INFINITY, f64::min);
    Ok(AttentionDump {
        weights,
        log10,
        min_log10,
    })
}

/// Writes `attention.csv` and `attention_log10.csv` into `dir`.
pub fn write_attention_dump(dump: &AttentionDump, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, m) in [("attention.csv", &dump.weights), ("attention_log10.csv", &dump.log10)] {
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, m)?;
        write_atomic(&dir.join(name), &buf)?;
    }
    Ok(())
}
