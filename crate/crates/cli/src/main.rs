use std::io;
use std::process::ExitCode;

use aura_cli::{execute, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = io::stdout().lock();
    let mut err = io::stderr();
    match execute(cli, &mut out, &mut err) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("aura: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
