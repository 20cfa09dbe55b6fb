mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// 1 for bad input (arguments, files, configs), 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<t4t_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == std::io::ErrorKind::NotFound { 1 } else { 2 };
        }
    }
    2
}

/// The error chain joined by colons, leaving out causes that an outer
/// message already quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &msg;
        }
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<()> {
    t4t_core::parallel::set_deterministic(cli.deterministic);
    let seed = cli.seed;
    match &cli.command {
        Command::Shapes(a) => commands::shapes(a, seed),
        Command::Params(a) => commands::params(a),
        Command::Flops(a) => commands::flops(a),
        Command::Gradcheck(a) => commands::gradcheck(a, seed),
        Command::Synth(a) => commands::synth(a, seed),
        Command::TrainToy(a) => commands::train_toy_cmd(a, seed),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a, seed),
        Command::Latency(a) => commands::latency(a, seed),
        Command::Navsim(a) => commands::navsim(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
