use clap::Parser;

use fsb_core::cli::{execute, exit_code, init_threads, Cli, Status};

fn main() {
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|()| execute(cli));
    match &outcome {
        Ok(Status::Ok) => {}
        Ok(Status::BelowThreshold(msg)) => eprintln!("fsb: below threshold: {msg}"),
        Err(e) => eprintln!("fsb: {e}"),
    }
    std::process::exit(exit_code(&outcome));
}
