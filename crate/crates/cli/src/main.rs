use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sumi::adapt::AdapterKind;
use sumi::datagen::{make_task, train_source, StreamSpec, TaskSpec, TrainOptions};
use sumi::harness::{emit_report, render_summary, run_experiment, source_cache_key, ExperimentConfig, ExperimentReport};
use sumi::selection::{QuantileMode, ScheduleFamily};

#[derive(Parser)]
#[command(name = "sumi", version, about = "Multimodal test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and checkpoint one source model per seed.
    TrainSource(Common),
    /// Adapt on a single stream and report.
    Adapt(Common),
    /// Run every (stream, adapter, seed) cell of a config.
    Sweep(Common),
    /// Run the eight component subsets of the method.
    Ablate(Common),
    /// Print the summary of a saved report.
    Report {
        /// A report.json file or a directory containing one.
        path: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Comma-separated adapters: source, entropy-min, gated-entropy-min, sumi, sumi[iqr+ua], ...
    #[arg(long, value_delimiter = ',')]
    adapter: Vec<String>,
    /// Stream mixture, e.g. `strong=0.5@5` or `noise-u1:0.5,mix:0.5@mixed#1000`.
    #[arg(long)]
    stream: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    quantile_mode: Option<QuantileArg>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long, value_enum)]
    balance_term: Option<Switch>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantileArg {
    Minmax,
    Order,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Linear,
    Exp,
    Log,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if !self.adapter.is_empty() {
            cfg.adapters = self
                .adapter
                .iter()
                .map(|a| a.parse::<AdapterKind>())
                .collect::<Result<_, _>>()?;
        }
        if let Some(s) = &self.stream {
            let spec: StreamSpec = s.parse().with_context(|| format!("stream `{s}`"))?;
            cfg.streams = vec![spec];
        }
        if let Some(q) = self.quantile_mode {
            let mode = match q {
                QuantileArg::Minmax => QuantileMode::MinmaxInterp,
                QuantileArg::Order => QuantileMode::OrderStat,
            };
            cfg.set_adapt("quantile_mode", serde_json::to_value(mode)?);
        }
        if let Some(s) = self.schedule {
            let family = match s {
                ScheduleArg::Linear => ScheduleFamily::Linear,
                ScheduleArg::Exp => ScheduleFamily::Exponential,
                ScheduleArg::Log => ScheduleFamily::Logarithmic,
            };
            cfg.set_adapt("schedule", serde_json::to_value(family)?);
        }
        if let Some(b) = self.balance_term {
            cfg.set_adapt("balance_term", matches!(b, Switch::On));
        }
        if let Some(out) = &self.out {
            cfg.output = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("sumi-out"))
}

fn run_and_emit(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let report = run_experiment(cfg)?;
    let (json, csv) = emit_report(&report, &out_dir(cfg))?;
    print!("{}", render_summary(&report));
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(if report.completed() {
        ExitCode::SUCCESS
    } else {
        eprintln!("some cells failed; see the error column of {}", csv.display());
        ExitCode::FAILURE
    })
}

fn train_sources(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let spec = cfg.model_spec();
    let mut ok = true;
    for &seed in &cfg.seeds {
        let task = TaskSpec {
            seed,
            ..cfg.task.clone()
        };
        let opts = TrainOptions {
            seed,
            ..cfg.train.clone()
        };
        let (train, test) = make_task(&task)?;
        match train_source(&spec, &train, &test, &opts) {
            Ok(trained) => {
                let key = source_cache_key(&task, &spec, &opts)?;
                let path = dir.join(format!("source-{key}.json"));
                trained.model.save(&path)?;
                println!(
                    "seed {seed}: clean accuracy {:.4}, train loss {:.4} -> {}",
                    trained.clean_accuracy,
                    trained.final_train_loss,
                    path.display()
                );
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                ok = false;
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn show_report(path: &Path) -> Result<ExitCode> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    if !file.exists() {
        bail!("no report at {}", file.display());
    }
    let report = ExperimentReport::load(&file)?;
    print!("{}", render_summary(&report));
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainSource(c) => train_sources(&c.experiment()?),
        Command::Adapt(c) => {
            let cfg = c.experiment()?;
            if cfg.streams.len() != 1 {
                bail!("adapt runs one stream; pass --stream or use sweep");
            }
            run_and_emit(&cfg)
        }
        Command::Sweep(c) => run_and_emit(&c.experiment()?),
        Command::Ablate(c) => run_and_emit(&c.experiment()?.ablation()),
        Command::Report { path } => show_report(&path),
    }
}
