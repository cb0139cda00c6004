//! Command-line driver: annotation, training runs, oracle verification and
//! sweeps, with a manifest beside every output.

pub mod commands;
pub mod data;
pub mod error;
pub mod manifest;
pub mod settings;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use error::{exit, CliError, CliResult};
use settings::{Cli, Command, SweepSettings, TrainSettings};

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Annotate(flags) => commands::annotate(&flags).map(drop),
        Command::Train(flags) => {
            let mut settings = TrainSettings::resolve(&flags)?;
            data::pin_data_dir(&mut settings);
            commands::train_command(&settings).map(drop)
        }
        Command::Verify(flags) => commands::verify(&flags).map(drop),
        Command::Sweep(flags) => {
            let mut settings = SweepSettings::resolve(&flags)?;
            data::pin_data_dir(&mut settings.train);
            commands::sweep(&settings).map(drop)
        }
        Command::GenSynthetic(flags) => commands::gen_synthetic(&flags),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("stochlab: {e}");
            e.code()
        }
    }
}
