mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use detox_core::ErrorClass;
use manifest::Recorder;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

fn flags(command: &Command) -> serde_json::Value {
    let v = match command {
        Command::Synth(a) => serde_json::to_value(a),
        Command::TrainProbe(a) => serde_json::to_value(a),
        Command::DpoTrain(a) => serde_json::to_value(a),
        Command::Profile(a) => serde_json::to_value(a),
        Command::Attribute(a) => serde_json::to_value(a),
        Command::PatchEval(a) => serde_json::to_value(a),
        Command::Edit(a) => serde_json::to_value(a),
        Command::Steer(a) => serde_json::to_value(a),
        Command::Lens(a) => serde_json::to_value(a),
        Command::Eval(a) => serde_json::to_value(a),
    };
    v.unwrap_or(serde_json::Value::Null)
}

fn run(cli: &Cli) -> Result<()> {
    let recorder = Recorder::start(cli.command.name(), flags(&cli.command));
    let finished = match &cli.command {
        Command::Synth(a) => commands::synth(a)?,
        Command::TrainProbe(a) => commands::train_probe_cmd(a)?,
        Command::DpoTrain(a) => commands::dpo_train(a)?,
        Command::Profile(a) => commands::profile(a)?,
        Command::Attribute(a) => commands::attribute(a)?,
        Command::PatchEval(a) => commands::patch_eval(a)?,
        Command::Edit(a) => commands::edit(a)?,
        Command::Steer(a) => commands::steer(a)?,
        Command::Lens(a) => commands::lens(a)?,
        Command::Eval(a) => commands::eval(a)?,
    };
    let path = recorder.finish(finished)?;
    eprintln!("manifest: {}", path.display());
    Ok(())
}

/// Exit code and error kind, from the first library or I/O error in the chain.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<detox_core::Error>() {
            let code = match e.class() {
                ErrorClass::Validation => EXIT_VALIDATION,
                ErrorClass::Numeric => EXIT_NUMERIC,
                ErrorClass::Io => EXIT_IO,
            };
            return (code, e.kind());
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (EXIT_IO, "Io");
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return (EXIT_VALIDATION, "Json");
        }
    }
    (EXIT_VALIDATION, "Other")
}

/// The error chain joined by ": ", skipping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn report_error(command: &str, code: u8, kind: &str, message: String) -> ExitCode {
    let record = json!({
        "error": { "command": command, "kind": kind, "exit_code": code, "message": message }
    });
    eprintln!("{record}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_error("", EXIT_VALIDATION, "Usage", e.to_string()),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = classify(&err);
            report_error(cli.command.name(), code, kind, message(&err))
        }
    }
}
