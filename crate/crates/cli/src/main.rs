use std::io;

use clap::Parser;
use navparse_cli::{init_logging, run, Cli};

fn main() {
    let cli = Cli::parse();
    init_logging();
    if let Err(e) = run(cli, io::stdin().lock(), io::stdout().lock()) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
