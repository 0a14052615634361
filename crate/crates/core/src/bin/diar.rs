use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eend::commands::{
    cmd_bench, cmd_infer, cmd_params, cmd_score, cmd_simulate, cmd_train, AVERAGED_NAME,
};
use eend::config::RunConfig;
use eend::{Error, Result};

#[derive(Parser)]
#[command(name = "diar", about = "Neural speaker diarization with attractors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `jobs`.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write synthetic mixtures, RTTMs and a manifest.
    Simulate,
    /// Train on a manifest; write checkpoints and metrics.
    Train,
    /// Write hypothesis RTTMs and speaker counts.
    Infer,
    /// Score hypothesis RTTMs against a reference manifest.
    Score,
    /// Compare EDA and TA inference throughput.
    Bench,
    /// Count trainable parameters.
    Params,
    /// Print every configuration key with its default.
    Keys,
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths
        .output_dir
        .as_deref()
        .ok_or_else(|| Error::Config("missing key paths.output_dir (or --out)".into()))
}

fn write_report(cfg: &RunConfig, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = &cfg.paths.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Keys = cli.command {
        print!("{}", RunConfig::key_reference());
        return Ok(());
    }
    let path = cli
        .config
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    // an unreadable config is a usage problem, not a runtime failure
    let mut cfg = RunConfig::load(&path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = cli.out {
        cfg.paths.output_dir = Some(o);
    }
    cfg.validate()?;
    // ignore failure: the global pool may already exist
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global();

    match cli.command {
        Command::Simulate => {
            let manifest = cmd_simulate(&cfg, output_dir(&cfg)?)?;
            println!("{}", manifest.display());
        }
        Command::Train => {
            let dir = output_dir(&cfg)?;
            let outcome = cmd_train(&cfg, dir)?;
            for m in &outcome.metrics {
                println!("{}", m.to_line());
            }
            if outcome.averaged.is_some() {
                println!("{}", dir.join(AVERAGED_NAME).display());
            }
        }
        Command::Infer => {
            let counts = cmd_infer(&cfg, output_dir(&cfg)?)?;
            println!("{} recordings", counts.len());
        }
        Command::Score => {
            let (_, report) = cmd_score(&cfg)?;
            print!("{report}");
            write_report(&cfg, "score.tsv", &report)?;
        }
        Command::Bench => {
            let report = cmd_bench(&cfg)?.format();
            print!("{report}");
            write_report(&cfg, "bench.tsv", &report)?;
        }
        Command::Params => {
            let report = cmd_params(&cfg.model)?.format();
            print!("{report}");
            write_report(&cfg, "params.tsv", &report)?;
        }
        Command::Keys => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
