// SPDX-License-Identifier: Apache-2.0

//! `ea-lab`: cycle analysis, training runs, evaluation and diagnostics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ea_lab_core::experiment::{self, ExperimentConfig};
use ea_lab_core::model::{param_count, ModelConfig};
use ea_lab_core::numeric::GradCheckOptions;
use ea_lab_core::tasks::{enumerate_cycles, generate_series, random_initial_state, DEFAULT_STATE_CAP};
use ea_lab_core::training::{evaluate, run_rng, ModelPredictor, TaskOracle};
use ea_lab_core::{AttentionKernelSpec, Checkpoint, Error, TaskSpec, WeightSharing};

/// Exit status for a run in which every seed diverged.
const EXIT_DIVERGED: u8 = 3;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 4;
const EXIT_FAILED: u8 = 1;

#[derive(Parser)]
#[command(name = "ea-lab", version, about = "Expressive vs dot-product attention on NT sequence tasks")]
struct Cli {
    /// Worker threads for multi-seed runs.
    #[arg(long, global = true, env = "EA_LAB_JOBS", default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact cycle decomposition of a task's state graph (JSON on stdout).
    Cycles {
        /// Task such as N16T3, N16T2-S or N16T2-R.
        task: TaskSpec,
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        state_cap: u64,
    },
    /// Train all seeds of an experiment into a run directory.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Base seed; run i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of independent runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Run directory (default: the config's output_dir or runs/<name>).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Autoregressive accuracy of a checkpoint (or of the exact task rule).
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground-truth generator instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        task: TaskSpec,
        #[arg(long, default_value_t = 10_000)]
        series: usize,
        #[arg(long, default_value_t = 100)]
        gen: usize,
        /// Context length for --oracle.
        #[arg(long, default_value_t = 16)]
        context_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the model gradient.
    Gradcheck {
        #[command(flatten)]
        source: ConfigSource,
        /// Number of seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Per-tensor parameter counts.
    Params {
        #[command(flatten)]
        source: OptionalConfigSource,
        #[command(flatten)]
        shape: ShapeArgs,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Attention weights (and their log10) for one context.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated symbols; a random series is used when omitted.
        #[arg(long, value_delimiter = ',')]
        context: Option<Vec<usize>>,
        /// Task for the random context.
        #[arg(long)]
        task: Option<TaskSpec>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "attn")]
        output: PathBuf,
    },
    /// List presets, or print one as a config document.
    Presets { name: Option<String> },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
#[group(required = false, multiple = false)]
struct OptionalConfigSource {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sharing {
    Shared,
    PerPosition,
}

#[derive(Args)]
struct ShapeArgs {
    /// Alphabet size (embedding width) when no config is given.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    basis: Option<usize>,
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    context_len: Option<usize>,
    #[arg(long, value_enum, default_value_t = Sharing::Shared)]
    sharing: Sharing,
}

fn load_config(config: &Option<PathBuf>, preset: &Option<String>) -> Result<ExperimentConfig, Error> {
    match (config, preset) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(name)) => experiment::preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}"))),
        (None, None) => Err(Error::Config("give --config or --preset".into())),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Cycles { task, state_cap } => {
            let dec = enumerate_cycles(&task, state_cap)?;
            print_json(&dec)?;
            let (num, den) = dec.mean_cycle_length_ratio();
            eprintln!("mean cycle length {num}/{den} = {:.4}", dec.mean_cycle_length());
        }
        Command::Train {
            source,
            seed,
            runs,
            epochs,
            output,
        } => {
            let mut config = load_config(&source.config, &source.preset)?;
            if let Some(s) = seed {
                config.train.base_seed = s;
            }
            if let Some(r) = runs {
                config.train.n_runs = r;
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(dir) = output {
                config.output_dir = Some(dir);
            }
            let dir = config.default_output_dir();
            let out = experiment::run_experiment(&config, &dir, cli.jobs)?;
            let r = &out.result;
            eprintln!(
                "{} runs, {} diverged, written to {}",
                r.runs.len(),
                r.diverged,
                out.dir.display()
            );
            if out.all_diverged() {
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::Eval {
            checkpoint,
            oracle,
            task,
            series,
            gen,
            context_len,
            seed,
        } => {
            let mut rng = run_rng(seed, 2);
            let result = if oracle {
                let mut p = TaskOracle { task, context_len };
                evaluate(&mut p, &task, series, gen, &mut rng)?
            } else {
                let path = checkpoint.expect("clap enforces checkpoint");
                let params = Checkpoint::load(&path)?.params()?;
                if params.config().basis != task.basis() {
                    return Err(Error::Config(format!(
                        "checkpoint basis {} does not match {task}",
                        params.config().basis
                    )));
                }
                evaluate(&mut ModelPredictor::new(&params), &task, series, gen, &mut rng)?
            };
            print_json(&serde_json::json!({"task": task.to_string(), "result": result}))?;
        }
        Command::Gradcheck {
            source,
            seeds,
            seed,
            samples,
        } => {
            let config = load_config(&source.config, &source.preset)?;
            let mc = config.model_config()?;
            let task = config.mixture()?.components()[0].0;
            let opts = GradCheckOptions {
                samples,
                ..GradCheckOptions::default()
            };
            let mut all_pass = true;
            let mut reports = Vec::new();
            for s in seed..seed + seeds {
                let r = experiment::gradcheck_model(&mc, &task, s, opts)?;
                all_pass &= r.pass;
                reports.push(serde_json::json!({"seed": s, "report": r}));
            }
            print_json(&serde_json::json!({"tolerance": opts.tol, "pass": all_pass, "checks": reports}))?;
            if !all_pass {
                return Ok(EXIT_FAILED);
            }
        }
        Command::Params { source, shape, json } => {
            let mc = match (shape.basis, shape.context_len) {
                (Some(basis), Some(n)) => {
                    let sharing = match shape.sharing {
                        Sharing::Shared => WeightSharing::Shared,
                        Sharing::PerPosition => WeightSharing::PerPosition,
                    };
                    ModelConfig::new(basis, n, AttentionKernelSpec::ea()).with_sharing(sharing)
                }
                (None, None) => load_config(&source.config, &source.preset)?.model_config()?,
                _ => return Err(Error::Config("--basis and --context-len go together".into())),
            };
            mc.validate()?;
            let count = param_count(&mc);
            if json {
                print_json(&count)?;
            } else {
                for (name, n) in &count.breakdown {
                    println!("{name:<12} {n:>10}");
                }
                println!("{:<12} {:>10}", "total", count.total);
            }
        }
        Command::AttnDump {
            checkpoint,
            context,
            task,
            seed,
            output,
        } => {
            let params = Checkpoint::load(&checkpoint)?.params()?;
            let n = params.config().context_len;
            let context = match (context, task) {
                (Some(c), _) => c,
                (None, Some(t)) => {
                    let mut rng = run_rng(seed, 2);
                    let init = random_initial_state(&t, &mut rng);
                    generate_series(&t, &init, n)?
                }
                (None, None) => return Err(Error::Config("give --context or --task".into())),
            };
            let dump = experiment::attention_dump(&params, &context)?;
            experiment::write_attention_dump(&dump, &output)?;
            print_json(&serde_json::json!({
                "output": output.display().to_string(),
                "min_log10": dump.min_log10,
            }))?;
        }
        Command::Presets { name: None } => {
            for p in experiment::presets() {
                let name = p.name.clone().unwrap_or_default();
                let what = match (&p.task, &p.mixture) {
                    (Some(t), _) => t.to_string(),
                    (None, Some(m)) => m.iter().map(|e| e.task.to_string()).collect::<Vec<_>>().join("+"),
                    _ => String::new(),
                };
                println!(
                    "{name:<18} {what:<14} N_con={:<4} {:<4} epochs={}",
                    p.model.context_len, p.model.kernel, p.train.epochs
                );
            }
        }
        Command::Presets { name: Some(name) } => {
            let p = experiment::preset(&name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
            println!("{}", p.to_json());
        }
    }
    Ok(0)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Csv(_) => EXIT_IO,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::NonFinite(_) => EXIT_FAILED,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
