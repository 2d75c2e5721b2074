use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use prm_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use prm_core::config::RunConfig;
use prm_core::metrics::{emit_report, evaluate, ReportFormat};
use prm_core::pipeline::{self, build_report, init_threads, load_data, run_pipeline, write_reports};
use prm_core::Error;

#[derive(Parser)]
#[command(
    name = "prm",
    version,
    about = "ADMM structured pruning with purification and unused path removal"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense baseline.
    Train(Common),
    /// Run ADMM iterations against the configured budgets.
    Admm(Common),
    /// Hard prune onto the budgets and retrain with the support frozen.
    Retrain(Common),
    /// Purify (thresholds) and remove unused paths, without retraining.
    Purify(Common),
    /// Physically remove dead filters and channels.
    Compact(Common),
    /// Test-set accuracy and loss of a checkpoint.
    Eval(Common),
    /// Compression report of a checkpoint.
    Report(Common),
    /// Every stage end to end.
    Pipeline(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    th1: Option<f64>,
    #[arg(long)]
    th2: Option<f64>,
    #[arg(long)]
    th3: Option<f64>,
    #[arg(long)]
    th4: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single worker thread (unless PRM_THREADS is set).
    #[arg(long)]
    deterministic: bool,
    /// Any config key, e.g. `--set admm.iterations=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Report format.
    #[arg(long, default_value = "table")]
    format: String,
    /// Recompute every pipeline stage instead of reusing cached outputs.
    #[arg(long)]
    fresh: bool,
}

impl Common {
    /// File config, else the config echoed in the input checkpoint, else
    /// defaults; then `--set` and the dedicated flags on top.
    fn config(&self, input: Option<&Checkpoint>) -> prm_core::Result<RunConfig> {
        let mut cfg = match (&self.config, input) {
            (Some(p), _) => RunConfig::load(p).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("cannot read config {path}: {source}")),
                other => other,
            })?,
            (None, Some(ck)) if !ck.config.is_empty() => {
                let mut cfg = RunConfig::default();
                for (k, v) in &ck.config {
                    cfg.set(k, v)?;
                }
                cfg
            }
            _ => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("admm.rho", self.rho.map(|v| format!("{v:?}"))),
            ("th1", self.th1.map(|v| format!("{v:?}"))),
            ("th2", self.th2.map(|v| format!("{v:?}"))),
            ("th3", self.th3.map(|v| format!("{v:?}"))),
            ("th4", self.th4.map(|v| format!("{v:?}"))),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        Ok(cfg)
    }

    fn out(&self, cfg: &RunConfig, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.output_dir.join(default))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::LayerDisconnected(_) => 2,
        Error::Data(_)
        | Error::Format { .. }
        | Error::Length(_)
        | Error::Version { .. }
        | Error::CorruptSection { .. }
        | Error::Io { .. } => 3,
        Error::Numeric(_) | Error::StateCorruption(_) => 4,
        Error::Shape(_) | Error::Invariant(_) => 1,
    }
}

fn save(path: &Path, ck: &Checkpoint) -> prm_core::Result<()> {
    save_checkpoint(path, ck)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    let args = match &command {
        Command::Train(a)
        | Command::Admm(a)
        | Command::Retrain(a)
        | Command::Purify(a)
        | Command::Compact(a)
        | Command::Eval(a)
        | Command::Report(a)
        | Command::Pipeline(a) => a.clone(),
    };
    let needs_input = !matches!(command, Command::Train(_) | Command::Pipeline(_));
    let input = match (&args.input, needs_input) {
        (Some(p), true) => Some(load_checkpoint(p)?),
        (None, true) => return Err(Error::Config("this subcommand needs --in <checkpoint>".into()).into()),
        _ => None,
    };
    let cfg = args.config(input.as_ref())?;
    let format: ReportFormat = args.format.parse()?;
    let threads = match std::env::var("PRM_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("PRM_THREADS must be a positive integer, got `{v}`")))?,
        ),
        Err(_) if cfg.deterministic => Some(1),
        Err(_) => None,
    };
    if let Some(n) = threads {
        init_threads(n)?;
    }

    match command {
        Command::Train(_) => {
            let ck = pipeline::stage_train(&cfg, &load_data(&cfg)?)?;
            save(&args.out(&cfg, "baseline.ckpt"), &ck)?;
        }
        Command::Admm(_) => {
            let input = input.expect("checked above");
            let ck = pipeline::stage_admm(&cfg, &load_data(&cfg)?, &input)?;
            save(&args.out(&cfg, "admm.ckpt"), &ck)?;
        }
        Command::Retrain(_) => {
            let input = input.expect("checked above");
            let ck = pipeline::stage_retrain(&cfg, &load_data(&cfg)?, &input)?;
            save(&args.out(&cfg, "retrained.ckpt"), &ck)?;
        }
        Command::Purify(_) => {
            let input = input.expect("checked above");
            cfg.check_layers(&input.model)?;
            let ck = pipeline::stage_purify(&cfg, &input)?;
            save(&args.out(&cfg, "purified.ckpt"), &ck)?;
            let test = load_data(&cfg)?.test;
            let before = evaluate(&input.model, &test)?;
            let after = evaluate(&ck.model, &test)?;
            let before_rate = build_report(&cfg, &input.model, None, None, None)?.nonzero_rate;
            let report = build_report(&cfg, &ck.model, Some(before), Some(after), Some(before_rate))?;
            print!("{}", emit_report(&report, format));
        }
        Command::Compact(_) => {
            let input = input.expect("checked above");
            let ck = pipeline::stage_compact(&cfg, &input)?;
            save(&args.out(&cfg, "compacted.ckpt"), &ck)?;
        }
        Command::Eval(_) => {
            let input = input.expect("checked above");
            let e = evaluate(&input.model, &load_data(&cfg)?.test)?;
            println!("accuracy {:.6} loss {:.9}", e.accuracy, e.mean_loss);
        }
        Command::Report(_) => {
            let input = input.expect("checked above");
            let report = build_report(&cfg, &input.model, None, None, None)?;
            print!("{}", emit_report(&report, format));
        }
        Command::Pipeline(_) => {
            let result = run_pipeline(&cfg, &load_data(&cfg)?, !args.fresh)?;
            write_reports(&cfg.output_dir, &result.report)?;
            print!("{}", emit_report(&result.report, format));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map(exit_code).unwrap_or(1);
            ExitCode::from(code)
        }
    }
}
