//! Binary entry point; all logic lives in the library's `cli` module.

use clap::Parser;

fn main() {
    let cli = mgproto::cli::Cli::parse();
    if let Err(err) = mgproto::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(if err.is_usage() { 2 } else { 1 });
    }
}
