use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flow_tdvp::experiment::{run, verify, RunConfig};
use flow_tdvp::Error;

/// Evolve normalizing-flow densities under Fokker-Planck equations.
///
/// Any configuration field can be overridden with `--key value`, using
/// either its dotted path (`--integrator.dt 0.01`) or a short alias
/// (`--dt 0.01`, `--k 0`, `--temps 10,10,10`, `--initial student_t`).
#[derive(Debug, Parser)]
#[command(name = "flow-tdvp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run(Args),
    /// Run the invariant battery.
    Verify {
        /// Also check that this checkpoint file loads.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        args: Args,
    },
    /// Print the resolved configuration and exit.
    Config(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    /// JSON configuration file merged over the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn pairs(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| format!("expected `--key value`, found `{flag}`"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = it.next().ok_or_else(|| format!("missing value for `--{key}`"))?;
                out.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

fn resolve(args: &Args) -> Result<RunConfig, Error> {
    let mut overrides = pairs(&args.overrides).map_err(|message| Error::Config {
        path: String::new(),
        message,
    })?;
    let mut file = args.config.clone();
    if let Some(pos) = overrides.iter().position(|(k, _)| k == "config") {
        file = Some(PathBuf::from(overrides.remove(pos).1));
    }
    let text = match &file {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: String::new(),
            message: format!("cannot read {}: {e}", path.display()),
        })?),
        None => None,
    };
    RunConfig::resolve(text.as_deref(), &overrides)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Json(_) => 2,
        Error::Aborted { .. } | Error::NonFinite(_) | Error::Unstable { .. } => 3,
        _ => 1,
    }
}

fn fail(e: Error) -> ExitCode {
    match &e {
        Error::Config { path, message } if !path.is_empty() => eprintln!("config error at `{path}`: {message}"),
        Error::Config { message, .. } => eprintln!("config error: {message}"),
        other => eprintln!("error: {other}"),
    }
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Config(args) => match resolve(&args) {
            Ok(cfg) => {
                print!("{}", cfg.canonical_json());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Run(args) => {
            let cfg = match resolve(&args) {
                Ok(cfg) => cfg,
                Err(e) => return fail(e),
            };
            match run(&cfg) {
                Ok(summary) => {
                    log::info!(
                        "wrote {} rows to {}",
                        summary.records.len(),
                        summary.out_dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Verify { checkpoint, mut args } => {
            let mut overrides = match pairs(&args.overrides) {
                Ok(p) => p,
                Err(message) => return fail(Error::Config { path: String::new(), message }),
            };
            let mut checkpoint = checkpoint;
            if let Some(pos) = overrides.iter().position(|(k, _)| k == "checkpoint") {
                checkpoint = Some(PathBuf::from(overrides.remove(pos).1));
            }
            args.overrides = overrides.into_iter().flat_map(|(k, v)| [format!("--{k}"), v]).collect();
            let cfg = match resolve(&args) {
                Ok(cfg) => cfg,
                Err(e) => return fail(e),
            };
            let report = verify(&cfg, checkpoint.as_deref());
            println!("{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
