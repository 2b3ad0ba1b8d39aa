//! Command-line driver for the `fundus_guide` pipeline and the HTTP API
//! behind the annotation UI.

pub mod commands;
pub mod config;
pub mod serve;

use clap::error::ErrorKind;
use clap::Parser;

pub use commands::{Cli, Command};
pub use config::RunConfig;

/// Exit status for a failed command: 2 for filesystem and decoding
/// failures, 1 for everything else.
pub fn exit_code(err: &fundus_guide::Error) -> i32 {
    if err.is_io() {
        2
    } else {
        1
    }
}

/// Parse `argv`, run the command and report errors on stderr with a
/// `error[contract]:` or `error[io]:` prefix. Returns the exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let msg = msg.trim_start_matches("error: ").trim_end();
            eprintln!("error[contract]: {msg}");
            return 1;
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let tag = if code == 2 { "io" } else { "contract" };
            eprintln!("error[{tag}]: {e}");
            code
        }
    }
}
