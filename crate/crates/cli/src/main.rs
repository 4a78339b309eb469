use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cmal_core::data::{export, generate, split, SplitFractions, SynthConfig};
use cmal_core::oracle::{Attachment, OracleKind};
use cmal_core::report::{write_report, RunRecord};
use cmal_core::runner::{
    load_data, Experiment, ExperimentConfig, RunState, StepOutcome, METRICS_JSON, RUN_STATE,
};
use cmal_service::ServiceError;

#[derive(Debug, Parser)]
#[command(name = "cmal", version, about = "Cross-modal consistency guided active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic two-modality dataset as a feature CSV.
    Generate {
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Share of samples whose face features come from another class.
        #[arg(long, default_value_t = 0.1)]
        inconsistency: f64,
        /// Share of stored labels flipped to a wrong class.
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sets every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        service: ServiceArgs,
    },
    /// Continue a run from its run-state file.
    Resume {
        state: PathBuf,
        /// Config the run must have been started with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        service: ServiceArgs,
    },
    /// Build comparison tables and plot series from finished runs.
    Report {
        /// `metrics.json` files or run directories containing one.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Run an experiment with labels supplied through the annotation service.
    Serve {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        service: ServiceArgs,
    },
}

#[derive(Debug, clap::Args)]
struct ServiceArgs {
    /// Address for the annotation service (remote oracle only).
    #[arg(long, default_value = "127.0.0.1:8787")]
    bind: SocketAddr,
    /// Allowed browser origin; any origin when omitted.
    #[arg(long)]
    origin: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(core) = e.downcast_ref::<cmal_core::Error>() {
        return core.exit_code() as u8;
    }
    if e.downcast_ref::<ServiceError>().is_some() {
        return 1;
    }
    2
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            out,
            samples,
            classes,
            inconsistency,
            label_noise,
            seed,
        } => {
            let cfg = SynthConfig {
                n_samples: samples,
                classes,
                inconsistency_rate: inconsistency,
                label_noise,
                seed,
                ..SynthConfig::default()
            };
            let synth = generate(&cfg).map_err(cmal_core::Error::from)?;
            let pool = split(&synth.dataset, SplitFractions::default(), seed).map_err(cmal_core::Error::from)?;
            export(&synth.dataset.with_split_tags(&pool), &out).map_err(cmal_core::Error::from)?;
            println!("wrote {} samples to {}", synth.dataset.len(), out.display());
            Ok(())
        }
        Command::Run {
            config,
            out,
            seed,
            service,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            apply_out(&mut cfg, out, &config);
            start(cfg, &service, None)
        }
        Command::Serve { config, out, service } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.oracle.kind = OracleKind::Remote;
            apply_out(&mut cfg, out, &config);
            start(cfg, &service, None)
        }
        Command::Resume { state, config, service } => {
            let saved = RunState::load(&state)?;
            let cfg = match config {
                Some(p) => {
                    let mut c = ExperimentConfig::load(&p)?;
                    if c.output_dir.is_none() {
                        c.output_dir = saved.config.output_dir.clone();
                    }
                    c
                }
                None => saved.config.clone(),
            };
            start(cfg, &service, Some(saved))
        }
        Command::Report { runs, out } => {
            let records = runs
                .iter()
                .map(|p| {
                    let file = if p.is_dir() { p.join(METRICS_JSON) } else { p.clone() };
                    RunRecord::load(&file).with_context(|| format!("reading {}", file.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let table = write_report(&records, &out)?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", table.to_csv());
            println!("report written to {}", out.display());
            Ok(())
        }
    }
}

/// `--out` wins; otherwise a relative `output_dir` is taken from the config's directory.
fn apply_out(cfg: &mut ExperimentConfig, out: Option<PathBuf>, config_path: &Path) {
    match out {
        Some(o) => cfg.output_dir = Some(o),
        None => {
            let dir = config_path.parent().unwrap_or(Path::new("."));
            let rel = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
            cfg.output_dir = Some(if rel.is_relative() { dir.join(rel) } else { rel });
        }
    }
}

fn start(cfg: ExperimentConfig, service: &ServiceArgs, saved: Option<RunState>) -> Result<()> {
    let attachment = match cfg.oracle.kind {
        OracleKind::Remote => {
            let (dataset, _) = load_data(&cfg)?;
            let att = Arc::new(Attachment::new(dataset.classes()));
            let running = cmal_service::spawn(att.clone(), service.bind, service.origin.as_deref())?;
            eprintln!("annotation service listening on http://{}/api/v1", running.addr);
            Some(att)
        }
        OracleKind::Simulated => None,
    };
    let mut exp = match saved {
        Some(state) => Experiment::from_state(state, Some(cfg), attachment)?,
        None => Experiment::new(cfg, attachment)?,
    };
    let Some(dir) = exp.config().output_dir.clone() else {
        bail!("no output directory configured");
    };
    loop {
        let outcome = exp.step()?;
        if let Some(e) = exp.metrics().entries.last() {
            if outcome != StepOutcome::Paused {
                eprintln!(
                    "iteration {:>3}  labeled {:>5} ({:>5.1}%)  test accuracy {:.4}",
                    e.iteration,
                    e.labeled,
                    e.labeled_fraction * 100.0,
                    e.test_accuracy
                );
            }
        }
        match outcome {
            StepOutcome::Continue => {}
            StepOutcome::Paused => {
                println!(
                    "paused waiting for labels; continue with `cmal resume {}`",
                    dir.join(RUN_STATE).display()
                );
                return Ok(());
            }
            StepOutcome::Finished => break,
        }
    }
    println!("finished; outputs in {}", dir.display());
    Ok(())
}
