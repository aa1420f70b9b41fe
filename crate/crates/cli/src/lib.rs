// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `xlg` command-line tool.
//!
//! [`run`] parses arguments (merging a `--config` file beneath explicit
//! flags), executes one subcommand on a rayon pool of `--workers` threads and
//! returns the process exit code: 0 on success, 1 for invalid input, 2 for
//! usage errors.

use std::ffi::OsString;

use clap::Parser;

pub mod args;
mod commands;
pub mod config;
pub mod manifest;
mod report;

use args::{Cli, Command};

/// Exit code for invalid input or failed processing.
pub const EXIT_INVALID: i32 = 1;
/// Exit code for malformed command lines.
pub const EXIT_USAGE: i32 = 2;

/// A command-line misuse detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn report_error(category: &str, err: &anyhow::Error) {
    let message = format!("{err:#}");
    let line = serde_json::json!({ "error": category, "message": message });
    eprintln!("{line}");
}

fn category(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.chain().find_map(|e| e.downcast_ref::<xlg_core::XlgError>()) {
        return e.category();
    }
    if err.chain().any(|e| e.is::<std::io::Error>()) {
        return "io";
    }
    "error"
}

/// Runs the tool on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match config::merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            report_error("usage", &e);
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        pool = pool.num_threads(w as usize);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            report_error(
                "error",
                &anyhow::anyhow!("starting {:?} workers: {e}", cli.workers),
            );
            return EXIT_INVALID;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            report_error("usage", &e);
            EXIT_USAGE
        }
        Err(e) => {
            report_error(category(&e), &e);
            EXIT_INVALID
        }
    }
}

fn dispatch(command: &Command) -> anyhow::Result<()> {
    log::info!("running {}", command.name());
    match command {
        Command::Synth(a) => commands::synth(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::Experts(a) => commands::experts(a),
        Command::Align(a) => commands::align(a),
        Command::Probe(a) => commands::probe(a),
        Command::SteerSpec(a) => commands::steer_spec(a),
        Command::LangFreq(a) => commands::lang_freq(a),
        Command::Report(a) => report::report(a),
    }
}
