//! The `restdyn` command-line pipeline: synthesize or load a cohort, train,
//! score, and compare groups. Each invocation records its resolved arguments
//! in `run.json`; `restdyn replay run.json` re-executes them.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fs;

use clap::error::ErrorKind;
use clap::Parser;
use restdyn_core::Error;

pub use config::{Cli, Command, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // a second init (tests running several commands) is harmless
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

fn load_run(path: &std::path::Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Data(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    // unknown keys are a malformed file, not a usage problem
    serde_json::from_str(&text).map_err(|e| {
        CliError::Data(Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    })
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = match cli.command {
        Command::Replay(r) => {
            let mut config = load_run(&r.run)?;
            if let Some(out) = r.out {
                commands::set_out(&mut config.run, out);
            }
            config.verbose = config.verbose.max(cli.verbose);
            config
        }
        command => RunConfig {
            version: env!("CARGO_PKG_VERSION").to_string(),
            verbose: cli.verbose,
            run: command,
        },
    };
    init_logging(config.verbose);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    log::info!("{} on {} threads", config.run.name(), pool.current_num_threads());
    pool.install(|| commands::execute(&config))
}

/// Parses `args` (including the program name) and runs one subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
