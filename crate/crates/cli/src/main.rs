use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use neurove::config::RunConfig;
use neurove::encoding::io::EventFormat;
use neurove::network::CellKind;
use neurove::pipeline::{self, SplitChoice, VelocityScalar};

#[derive(Parser, Debug)]
#[command(
    name = "neurove",
    version,
    about = "Spiking recurrent networks for sine forecasting and event-camera velocity estimation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file (dotted keys or tables).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed; overrides `seed` from the file and `--set`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Override one configuration key, e.g. `--set sine.train.epochs=40`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset into the output directory.
    GenData { kind: DataKind },
    /// Train a model; writes an epoch log, checkpoints and a report.
    Train {
        task: Task,
        /// Dataset directory written by `gen-data`; generated in memory when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Train the spiking baseline cell instead of the diffusion cell (sine only).
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics JSON and prediction CSVs.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: SplitArg,
    },
    /// Run a checkpoint on new input: a `step,value` CSV for sine models,
    /// an event file for velocity models.
    Predict {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Closed-loop steps after the observed series (sine).
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
        /// Event file format; inferred from the extension when absent.
        #[arg(long)]
        format: Option<FormatArg>,
    },
    /// Compare LIF and ALIF firing under one seeded random current.
    AnalyzeNeurons,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    Sine,
    SyntheticEvents,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Sine,
    Velocity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Slstm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for SplitChoice {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitChoice::Train,
            SplitArg::Val => SplitChoice::Val,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Text,
    Binary,
}

fn resolve(global: &Global, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = global.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(seed) = global.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(RunConfig::resolve(global.config.as_deref(), &overrides)?)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NEUROVE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("NEUROVE_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("NEUROVE_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let g = &cli.global;
    let out = g.out.as_path();
    match cli.command {
        Command::GenData { kind } => {
            let cfg = resolve(g, &[])?;
            pipeline::write_receipt(&cfg, out)?;
            match kind {
                DataKind::Sine => {
                    let ds = pipeline::gen_sine_data(&cfg, out)?;
                    println!(
                        "wrote {} sine sequences ({} train, {} val) of {} steps to {}",
                        ds.sequences.len(),
                        ds.train.len(),
                        ds.val.len(),
                        ds.spec.total_steps(),
                        out.display()
                    );
                }
                DataKind::SyntheticEvents => {
                    let data = pipeline::gen_velocity_data(&cfg, out)?;
                    let events: usize = data.train.iter().chain(&data.val).map(|s| s.spikes.popcount()).sum();
                    println!(
                        "wrote {} clips ({} train, {} val, {} active spike cells) to {}",
                        data.train.len() + data.val.len(),
                        data.train.len(),
                        data.val.len(),
                        events,
                        out.display()
                    );
                }
            }
        }
        Command::Train {
            task,
            data,
            baseline,
            resume,
        } => {
            let extra: Vec<String> = match (task, baseline) {
                (Task::Sine, Some(Baseline::Slstm)) => vec!["sine.model.cell=slstm".into()],
                (Task::Velocity, Some(_)) => bail!("--baseline applies to the sine task only"),
                _ => Vec::new(),
            };
            let cfg = resolve(g, &extra)?;
            pipeline::write_receipt(&cfg, out)?;
            match task {
                Task::Sine => {
                    let ds = pipeline::sine_dataset(&cfg, data.as_deref())?;
                    let run = pipeline::train_sine(&cfg, &ds, out, resume.as_deref())?;
                    let r = &run.report;
                    let cell = match r.cell {
                        CellKind::Aslstm => "aslstm",
                        CellKind::Slstm => "slstm",
                    };
                    println!("{cell}: {} epochs, best epoch {:?}", r.epochs_run, r.best_epoch);
                    println!(
                        "  fit RMSE x1e3 per validation sequence: {}",
                        fmt_list(&r.fit_rmse_dagger, 3)
                    );
                    println!(
                        "  forecast RMSE per validation sequence: {}",
                        fmt_list(&r.val.forecast_rmse, 4)
                    );
                    println!("  firing rate per layer: {}", fmt_list(&r.firing_rates, 4));
                }
                Task::Velocity => {
                    let ds = pipeline::velocity_dataset(&cfg, data.as_deref())?;
                    let run = pipeline::train_velocity::<VelocityScalar>(&cfg, &ds, out, resume.as_deref())?;
                    let r = &run.report;
                    println!("velocity: {} epochs, best epoch {:?}", r.epochs_run, r.best_epoch);
                    println!(
                        "  linear RMSE {:.4} m/s (mean baseline {:.4}), linear RE {:.3}, angular RMSE {:.3} deg/s",
                        r.val.linear_rmse(),
                        r.mean_baseline.rmse.get("linear").copied().unwrap_or(f64::NAN),
                        r.val.linear_re(),
                        r.val.report.rmse.get("angular").copied().unwrap_or(f64::NAN)
                    );
                    println!("  output shape {:?}", r.output_shape);
                }
            }
            println!("outputs in {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let cfg = resolve(g, &[])?;
            pipeline::write_receipt(&cfg, out)?;
            match pipeline::checkpoint_task(&checkpoint)?.as_str() {
                pipeline::TASK_SINE => {
                    let model = pipeline::load_sine_model(&checkpoint)?;
                    let ds = pipeline::sine_dataset(&cfg, data.as_deref())?;
                    let r = pipeline::eval_sine(&model, &ds, split.into(), cfg.sine.train.warmup, out)?;
                    println!("fit RMSE per sequence: {}", fmt_list(&r.per_sequence_fit_rmse, 6));
                    println!(
                        "forecast RMSE per sequence: {}",
                        fmt_list(&r.per_sequence_forecast_rmse, 4)
                    );
                }
                pipeline::TASK_VELOCITY => {
                    let model = pipeline::load_velocity_model::<VelocityScalar>(&checkpoint)?;
                    if model.cfg.window != cfg.velocity.data.window {
                        bail!(
                            "checkpoint window {:?} differs from the configured window",
                            model.cfg.window
                        );
                    }
                    let ds = pipeline::velocity_dataset(&cfg, data.as_deref())?;
                    let samples = match split {
                        SplitArg::Train => &ds.train,
                        SplitArg::Val => &ds.val,
                    };
                    let r = pipeline::eval_velocity(&model, samples, split.into(), cfg.velocity.eval_batch, out)?;
                    println!("{}", serde_json::to_string_pretty(&r.metrics)?);
                }
                other => bail!("unknown checkpoint task `{other}`"),
            }
            println!("outputs in {}", out.display());
        }
        Command::Predict {
            checkpoint,
            input,
            horizon,
            format,
        } => {
            let cfg = resolve(g, &[])?;
            pipeline::write_receipt(&cfg, out)?;
            let path = match pipeline::checkpoint_task(&checkpoint)?.as_str() {
                pipeline::TASK_SINE => {
                    let model = pipeline::load_sine_model(&checkpoint)?;
                    let series = pipeline::read_series_csv(&input)?;
                    let rows = pipeline::predict_sine(&model, &series, horizon)?;
                    let mut csv = String::from("step,pred,phase\n");
                    for (k, p, phase) in rows {
                        csv.push_str(&format!("{k},{p:e},{phase}\n"));
                    }
                    write_output(out, "predictions.csv", &csv)?
                }
                pipeline::TASK_VELOCITY => {
                    let model = pipeline::load_velocity_model::<VelocityScalar>(&checkpoint)?;
                    let format = format.map(|f| match f {
                        FormatArg::Text => EventFormat::Text,
                        FormatArg::Binary => EventFormat::Binary,
                    });
                    let events = pipeline::read_event_file(&input, format)?;
                    let rows = pipeline::predict_velocity_stream(&model, &events)?;
                    let mut csv = String::from("sample,bin,t_s,vx,vy,vz,wx,wy,wz\n");
                    for (sample, r) in rows {
                        csv.push_str(&format!("{sample},{},{:e}", r.bin_index, r.t));
                        for v in r.as_row() {
                            csv.push_str(&format!(",{v:e}"));
                        }
                        csv.push('\n');
                    }
                    write_output(out, "predictions.csv", &csv)?
                }
                other => bail!("unknown checkpoint task `{other}`"),
            };
            println!("wrote {}", path.display());
        }
        Command::AnalyzeNeurons => {
            let cfg = resolve(g, &[])?;
            pipeline::write_receipt(&cfg, out)?;
            let (trace, analysis) = pipeline::analyze_neurons(&cfg)?;
            pipeline::write_neuron_analysis(&trace, &analysis, out)?;
            println!(
                "LIF rate {:.4}, ALIF rate {:.4} spikes/neuron/step over {} steps",
                analysis.lif_rate, analysis.alif_rate, analysis.steps
            );
            println!("outputs in {}", out.display());
        }
    }
    Ok(())
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    pipeline::write_atomic(&path, contents.as_bytes())?;
    Ok(path)
}

fn fmt_list(v: &[f64], prec: usize) -> String {
    v.iter().map(|x| format!("{x:.prec$}")).collect::<Vec<_>>().join(", ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
