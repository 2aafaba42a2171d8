//! Library behind the `countkit` binary: argument definitions, subcommand
//! implementations, the toy experiment, and config-file handling.

pub mod args;
pub mod commands;
pub mod experiment;
pub mod manifest;

use clap::{CommandFactory, FromArgMatches};
use thiserror::Error;

use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or bad input files; exit code 1.
    #[error("{0}")]
    User(String),
    /// Unexpected internal failure; exit code 2.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn user(e: impl std::fmt::Display) -> Self {
        CliError::User(e.to_string())
    }
}

macro_rules! internal_from {
    ($($ty:ty),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Internal(e.to_string())
            }
        })*
    };
}

internal_from!(
    std::io::Error,
    countkit_core::audio::AudioError,
    countkit_core::dsp::DspError,
    countkit_core::vad::VadError,
    countkit_core::mixer::MixerError,
    countkit_core::dataset::DatasetError,
    countkit_core::model::ModelError,
    countkit_core::training::TrainError,
    countkit_core::eval::EvalError,
    countkit_core::eval::PredictError,
    countkit_core::decision::DecisionError,
    countkit_core::store::StoreError,
    countkit_core::tensorfile::TensorFileError,
);

/// Parse a `key = value` config file into long-flag tokens. Keys mirror the
/// long flag names; values `true`/`false` toggle switches.
fn config_tokens(path: &std::path::Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
    let mut tokens = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::User(format!(
                "{}:{}: expected key = value",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        match value {
            "true" => tokens.push(format!("--{key}")),
            "false" => {}
            _ => {
                tokens.push(format!("--{key}"));
                tokens.push(value.to_string());
            }
        }
    }
    Ok(tokens)
}

/// Inject config-file values as flags right after the subcommand, so flags
/// given on the command line override them.
fn splice_config(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut config_path: Option<String> = None;
    {
        let mut iter = argv.iter().peekable();
        while let Some(a) = iter.next() {
            if a == "--config" {
                config_path = iter.peek().map(|s| s.to_string());
            } else if let Some(v) = a.strip_prefix("--config=") {
                config_path = Some(v.to_string());
            }
        }
    }
    let Some(path) = config_path else { return Ok(argv) };
    let tokens = config_tokens(std::path::Path::new(&path))?;

    // find the subcommand: first non-flag token that is not the --config value
    let mut out = Vec::with_capacity(argv.len() + tokens.len());
    let mut inserted = false;
    let mut skip_value = false;
    for (i, a) in argv.iter().enumerate() {
        out.push(a.clone());
        if inserted {
            continue;
        }
        if skip_value {
            skip_value = false;
            continue;
        }
        if a == "--config" {
            skip_value = true;
            continue;
        }
        if i > 0 && !a.starts_with('-') {
            out.extend(tokens.iter().cloned());
            inserted = true;
        }
    }
    Ok(out)
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => commands::synth(a),
        Command::Featurize(a) => commands::featurize(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::ToyCorpus(a) => commands::toy_corpus(a),
        Command::ToyExperiment(a) => experiment::run_toy_experiment(a).map(|_| ()),
    }
}

/// Parse and execute. Help/version requests return Ok.
pub fn run(argv: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    let argv: Vec<String> = argv.into_iter().collect();
    let argv = splice_config(argv)?;

    let cmd = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|sc| sc.args_override_self(true));
    let matches = match cmd.try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::User(e.render().to_string())),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::User(e.to_string()))?;
    dispatch(&cli.command)
}
