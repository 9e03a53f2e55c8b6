//! `fracnls` command-line runner.
//!
//! Exit status: 0 success, 1 validation error, 2 invariant failure, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fracnls::config::{parse_config, ExperimentKind, RunConfig};
use fracnls::runner::run;
use fracnls::Error;

#[derive(Parser)]
#[command(name = "fracnls", version, about = "Fractional-noise Schrodinger experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scalar fBm paths.
    Fbm(Common),
    /// Sample the stochastic convolution.
    Convolve(Common),
    /// Run the mild solver.
    Solve(Common),
    /// Solve the controlled (skeleton) equation.
    Skeleton(Common),
    /// Probability ladder, slope, and optimizer bound for a rare event.
    Ldp(Common),
    /// Empirical Holder exponents of sampled paths.
    Holder(Common),
    /// Distance from samples to a growing skeleton family.
    Support(Common),
    /// Every cross-check with its residual.
    OracleSuite(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Command::Fbm(c) => (ExperimentKind::Fbm, c),
            Command::Convolve(c) => (ExperimentKind::Convolution, c),
            Command::Solve(c) => (ExperimentKind::Solve, c),
            Command::Skeleton(c) => (ExperimentKind::Skeleton, c),
            Command::Ldp(c) => (ExperimentKind::Ldp, c),
            Command::Holder(c) => (ExperimentKind::Holder, c),
            Command::Support(c) => (ExperimentKind::Support, c),
            Command::OracleSuite(c) => (ExperimentKind::OracleSuite, c),
        }
    }
}

fn load(kind: ExperimentKind, args: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_config(&text)?
        }
        None => RunConfig::defaults(kind),
    };
    match cfg.kind {
        Some(k) if k != kind => {
            return Err(Error::validation(
                "$.kind",
                format!("config is for {k:?}, but the subcommand asks for {kind:?}"),
            ))
        }
        _ => cfg.kind = Some(kind),
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(kind: ExperimentKind, args: Common) -> Result<(), Error> {
    let cfg = load(kind, &args)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("fracnls-out"));
    let go = || -> Result<(), Error> {
        let outcome = run(&cfg, &out)?;
        for c in &outcome.checks {
            eprintln!("ok   {}: {}", c.name, c.detail);
        }
        println!("{}", out.display());
        Ok(())
    };
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::validation("$.threads", e.to_string()))?
            .install(go),
        None => go(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = cli.command.split();
    match execute(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
