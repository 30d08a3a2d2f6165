use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mnlab_cli::commands::{
    load_job, run_audit, run_diagnose, run_subsample, run_synth, run_train, run_transform, AuditJob, DiagnoseJob,
    SubsampleJob, SynthJob, TrainJob, TransformJob,
};
use mnlab_cli::{emit_report, run_sweep, validate_report, SweepConfig};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(
    name = "mnlab",
    version,
    about = "Multi-narrow model transformation and experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON job description; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

/// A CIFAR-format data source given by file paths.
#[derive(Args)]
struct DataArgs {
    /// CIFAR-format binary file (training pool, or the file to evaluate).
    #[arg(long)]
    data: Option<PathBuf>,
    /// CIFAR-format test split.
    #[arg(long)]
    test: Option<PathBuf>,
    /// `cifar10` or `cifar100`.
    #[arg(long, default_value = "cifar10")]
    variant: String,
}

impl DataArgs {
    fn source(&self) -> Option<Value> {
        let train = self.data.as_ref()?;
        Some(json!({"kind": "cifar", "train": train, "test": self.test, "variant": self.variant}))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite a baseline graph into r^2 narrow paths.
    Transform {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Graph file or graph builder spec.
        #[arg(long, visible_alias = "in")]
        graph: Option<PathBuf>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Count parameters, MACs and activations of a graph.
    Audit {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, visible_alias = "in")]
        graph: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Input resolution as HxW, e.g. 32x32.
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long)]
        batch: Option<u64>,
        /// `layer_only`, `eval` or `train`.
        #[arg(long)]
        convention: Option<String>,
        /// Comma-separated widening factors for a parameter sweep (also written as CSV).
        #[arg(long, value_delimiter = ',')]
        sweep_r: Option<Vec<usize>>,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train one model and write its run directory.
    ///
    /// `--config` takes either a full train job or only its training
    /// hyperparameters, combined with the graph and data flags.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Index file selecting the training subset.
        #[arg(long)]
        indices: Option<PathBuf>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        ipc: Option<usize>,
        #[arg(long, visible_alias = "out")]
        output_dir: Option<PathBuf>,
    },
    /// Path diagnostics of a trained checkpoint.
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Run directory written by `train`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, visible_alias = "out")]
        output_dir: Option<PathBuf>,
    },
    /// Run an r x ipc x seed grid.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Skip report emission after the sweep.
        #[arg(long)]
        no_report: bool,
    },
    /// Emit and validate the report of a results directory.
    Report {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        results_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write the sorted indices of a per-class subsample.
    Subsample {
        #[command(flatten)]
        cfg: ConfigArg,
        /// CIFAR-format binary file to subsample.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value = "cifar10")]
        variant: String,
        #[arg(long)]
        ipc: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Write a synthetic dataset as a CIFAR-format binary file.
    Synth {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
}

type Overrides<'a> = Vec<(&'a str, Option<Value>)>;

fn load_object(config: &Option<PathBuf>) -> anyhow::Result<Map<String, Value>> {
    match config {
        Some(path) => load_job(path),
        None => Ok(Map::new()),
    }
}

/// Sets a dotted key such as `options.height`, creating objects on the way.
fn set_path(map: &mut Map<String, Value>, key: &str, value: Value) {
    match key.split_once('.') {
        None => {
            map.insert(key.to_string(), value);
        }
        Some((head, rest)) => {
            let entry = map.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            if let Value::Object(inner) = entry {
                set_path(inner, rest, value);
            }
        }
    }
}

fn finish<T: DeserializeOwned>(
    config: &Option<PathBuf>,
    mut base: Map<String, Value>,
    overrides: Overrides,
) -> anyhow::Result<T> {
    for (key, value) in overrides {
        if let Some(v) = value {
            set_path(&mut base, key, v);
        }
    }
    let context = config
        .as_deref()
        .map(Path::display)
        .map(|d| d.to_string())
        .unwrap_or_else(|| "flags".into());
    serde_json::from_value(Value::Object(base)).map_err(|e| anyhow::anyhow!("{context}: {e}"))
}

/// Loads the config object (or an empty one) and applies flag overrides.
fn job<T: DeserializeOwned>(config: &Option<PathBuf>, overrides: Overrides) -> anyhow::Result<T> {
    finish(config, load_object(config)?, overrides)
}

fn val<T: serde::Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|v| json!(v))
}

fn parse_resolution(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow::anyhow!("resolution `{s}` is not HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn report(results_dir: &Path) -> anyhow::Result<()> {
    let files = emit_report(results_dir)?;
    validate_report(results_dir)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Transform { cfg, graph, r, output } => {
            let j: TransformJob = job(
                &cfg.config,
                vec![("graph", val(graph)), ("r", val(r)), ("output", val(output))],
            )?;
            let g = run_transform(&j)?;
            println!(
                "{} layers, r = {}, M = {} -> {}",
                g.layers.len(),
                g.r,
                g.path_multiplicity,
                j.output.display()
            );
        }
        Command::Audit {
            cfg,
            graph,
            baseline,
            resolution,
            batch,
            convention,
            sweep_r,
            output,
        } => {
            let hw = resolution.as_deref().map(parse_resolution).transpose()?;
            let j: AuditJob = job(
                &cfg.config,
                vec![
                    ("graph", val(graph)),
                    ("baseline", val(baseline)),
                    ("options.height", val(hw.map(|(h, _)| h))),
                    ("options.width", val(hw.map(|(_, w)| w))),
                    ("options.batch_size", val(batch)),
                    ("options.convention", val(convention)),
                    ("sweep_r", val(sweep_r)),
                    ("output", val(output)),
                ],
            )?;
            let out = run_audit(&j)?;
            if j.output.is_none() {
                print_json(&out)?;
            }
        }
        Command::Data { command } => match command {
            DataCommand::Subsample {
                cfg,
                input,
                variant,
                ipc,
                seed,
                output,
            } => {
                let data = input.map(|p| json!({"kind": "cifar", "train": p, "variant": variant}));
                let j: SubsampleJob = job(
                    &cfg.config,
                    vec![
                        ("data", data),
                        ("ipc", val(ipc)),
                        ("seed", val(seed)),
                        ("output", val(output)),
                    ],
                )?;
                let idx = run_subsample(&j)?;
                println!("{} indices -> {}", idx.len(), j.output.display());
            }
            DataCommand::Synth { cfg, seed, output } => {
                let j: SynthJob = job(&cfg.config, vec![("seed", val(seed)), ("output", val(output))])?;
                let ds = run_synth(&j)?;
                println!("{} images -> {}", ds.len(), j.output.display());
            }
        },
        Command::Train {
            cfg,
            graph,
            data,
            indices,
            r,
            ipc,
            output_dir,
        } => {
            let mut base = load_object(&cfg.config)?;
            // a config without job-level keys holds only training hyperparameters
            if !["graph", "data", "output_dir", "train"]
                .iter()
                .any(|k| base.contains_key(*k))
                && !base.is_empty()
            {
                base = Map::from_iter([("train".to_string(), Value::Object(base))]);
            }
            let j: TrainJob = finish(
                &cfg.config,
                base,
                vec![
                    ("graph", val(graph)),
                    ("data", data.source()),
                    ("indices", val(indices)),
                    ("r", val(r)),
                    ("ipc", val(ipc)),
                    ("output_dir", val(output_dir)),
                ],
            )?;
            print_json(&run_train(&j)?)?;
        }
        Command::Diagnose {
            cfg,
            run,
            checkpoint,
            data,
            output_dir,
        } => {
            let j: DiagnoseJob = job(
                &cfg.config,
                vec![
                    ("run", val(run)),
                    ("checkpoint", val(checkpoint)),
                    ("data", data.source()),
                    ("output_dir", val(output_dir)),
                ],
            )?;
            let rep = run_diagnose(&j)?;
            println!(
                "aggregated {:.4}, oracle {:.4} -> {}",
                rep.aggregated_accuracy,
                rep.oracle_accuracy,
                j.output_dir.display()
            );
        }
        Command::Sweep {
            cfg,
            output_dir,
            parallelism,
            no_report,
        } => {
            let c: SweepConfig = job(
                &cfg.config,
                vec![("output_dir", val(output_dir)), ("parallelism", val(parallelism))],
            )?;
            let outcome = run_sweep(&c)?;
            println!(
                "{} cells ran, {} skipped, {} failed",
                outcome.ran.len(),
                outcome.skipped.len(),
                outcome.failures.len()
            );
            if !no_report && !outcome.results.is_empty() {
                report(&c.output_dir)?;
            }
            outcome.into_result()?;
        }
        Command::Report { cfg, results_dir } => {
            #[derive(serde::Deserialize)]
            struct ReportJob {
                results_dir: PathBuf,
            }
            let j: ReportJob = job(&cfg.config, vec![("results_dir", val(results_dir))])?;
            report(&j.results_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
