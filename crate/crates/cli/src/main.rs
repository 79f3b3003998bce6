use std::process::ExitCode;

use clap::Parser;
use mmplan::commands::{emit, run, Cli};
use mmplan::report::{error_object, render};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMPLAN_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = run(&cli.command).and_then(|out| emit(&cli.command, &out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            print!("{}", render(&error_object(&e)));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
