use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STEERLAB_LOG", "warn")).init();
    let cli = steerlab::Cli::parse();
    match steerlab::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("steerlab: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
