mod args;
mod commands;
mod output;

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use edd_core::Error;

use args::{Cli, Command};

const EXIT_USAGE: u8 = 2;
const EXIT_STABILITY: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Domain(_) => EXIT_USAGE,
        Error::Unstable { .. } => EXIT_STABILITY,
        Error::Format { .. } | Error::Io { .. } | Error::Json(_) => EXIT_IO,
        Error::Seed { .. } => unreachable!("root() unwraps seed errors"),
    }
}

/// Caps rayon's pool at `EDD_THREADS` when set.
fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("EDD_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("EDD_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = configure_threads() {
        eprintln!("edd: {message}");
        return ExitCode::from(EXIT_USAGE);
    }
    let out = match &cli.command {
        Command::Curve(a) => a.out.clone(),
        Command::PhaseDiagram(a) => a.out.clone(),
        Command::Simulate(a) => a.out.clone(),
        Command::ConvergeHead(a) => a.out.clone(),
        Command::PcaFilter(a) => a.out.clone(),
        Command::Ablation(a) => a.out.clone(),
    };
    let start = Instant::now();
    let result = match &cli.command {
        Command::Curve(a) => commands::curve(a),
        Command::PhaseDiagram(a) => commands::phase_diagram(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::ConvergeHead(a) => commands::converge_head(a),
        Command::PcaFilter(a) => commands::pca_filter(a),
        Command::Ablation(a) => commands::ablation(a),
    }
    .and_then(|done| {
        let written = done.outputs.write(&out, done.manifest, start.elapsed())?;
        Ok((done.summary, written))
    });
    match result {
        Ok((summary, written)) => {
            // a closed stdout must not turn a finished run into a failure
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{summary}");
            for path in written {
                let _ = writeln!(stdout, "wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("edd {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
