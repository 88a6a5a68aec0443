use clap::Parser;

use clarity_cli::commands::{execute, Cli};

fn main() {
    std::process::exit(execute(Cli::parse()));
}
