use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use riskabr_core::config::ExperimentConfig;
use riskabr_core::pipeline;

#[derive(Parser)]
#[command(name = "riskabr", version, about = "Risk-aware ABR training, auditing and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Tail-penalty weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Auditor capacity margin.
    #[arg(long, global = true)]
    margin: Option<f64>,
    /// Auditor buffer guard in seconds.
    #[arg(long, global = true)]
    guard: Option<f64>,
    /// Comma-separated method names.
    #[arg(long, global = true)]
    methods: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize traces and write the split manifest.
    GenTraces {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Validate external trace files and write the split manifest.
    Ingest {
        /// Directory of `time_s,throughput_bps` files; falls back to `traces.ingest_dir`.
        dir: Option<PathBuf>,
    },
    /// Recompute the split manifest over the run's traces.
    Split,
    /// Imitation pretraining on the train split.
    Pretrain,
    /// Tail-penalized fine-tuning of the pretrained policy.
    Finetune {
        /// Continue the existing checkpoint for this penalty weight.
        #[arg(long)]
        resume: bool,
    },
    /// Calibrate capacity predictors and select one.
    Calibrate,
    /// Evaluate methods and grids on the test split.
    Evaluate,
    /// Collect report CSVs into a markdown summary.
    Report,
    /// Every stage in order.
    Run,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(l) = c.lambda {
        cfg.cvar.penalty_weight = l;
    }
    if let Some(m) = c.margin {
        cfg.audit.margin = m;
    }
    if let Some(g) = c.guard {
        cfg.audit.guard_s = g;
    }
    if let Some(ms) = &c.methods {
        cfg.evaluate.methods = pipeline::parse_methods(ms)?;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::GenTraces { count } => {
            if let Some(n) = count {
                cfg.traces.count = n;
            }
            let s = pipeline::gen_traces(&cfg)?;
            println!("{} traces: {} train, {} calibration, {} test", s.len(), s.train.len(), s.calibration.len(), s.test.len());
        }
        Cmd::Ingest { dir } => {
            let dir = dir
                .or_else(|| cfg.traces.ingest_dir.clone())
                .context("ingest: no directory given and traces.ingest_dir is unset")?;
            let s = pipeline::ingest(&cfg, &dir)?;
            println!("ingested {} traces", s.len());
        }
        Cmd::Split => {
            let s = pipeline::split(&cfg)?;
            println!("{} train, {} calibration, {} test", s.train.len(), s.calibration.len(), s.test.len());
        }
        Cmd::Pretrain => {
            let r = pipeline::pretrain(&cfg)?;
            if let Some(last) = r.rounds.last() {
                println!("pretrain: {} records, loss {:.4}, expert agreement {:.3}", last.dataset_size, last.loss, last.agreement);
            }
        }
        Cmd::Finetune { resume } => {
            let r = pipeline::finetune(&cfg, None, resume)?;
            if let Some(p) = r.curve.last() {
                println!("finetune: {} steps, mean reward {:.4}", p.steps, p.mean_reward);
            }
        }
        Cmd::Calibrate => {
            let (rows, chosen) = pipeline::calibrate(&cfg)?;
            for r in &rows {
                println!("{}: v_dec {:.4}, over_rate_hr {:.4}", r.predictor, r.v_dec, r.over_rate_hr);
            }
            println!("selected {chosen}");
        }
        Cmd::Evaluate => {
            let ev = pipeline::evaluate(&cfg)?;
            for r in &ev.methods {
                println!("{}: qoe {:.2}, worst5 {:.2} s, >10 s {:.3}", r.method, r.mean_qoe, r.worst5_rebuf, r.severe_ratio);
            }
        }
        Cmd::Report => print!("{}", pipeline::report(&cfg)?),
        Cmd::Run => {
            pipeline::run_all(&cfg)?;
            println!("wrote {}", cfg.out_dir.display());
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
