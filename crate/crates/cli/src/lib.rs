//! Command-line front end: data generation, training, evaluation,
//! prediction and self-verification.

pub mod args;
pub mod checks;
pub mod commands;
pub mod error;
pub mod manifest;

use args::{Cli, Command};
use error::CliResult;

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a).map(drop),
        Command::Eval(a) => commands::eval(a).map(drop),
        Command::Predict(a) => commands::predict_cmd(a).map(drop),
        Command::Stats(a) => commands::stats(a),
        Command::Selftest(a) => commands::selftest(a),
    }
}
