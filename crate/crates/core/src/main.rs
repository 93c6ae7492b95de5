use clap::Parser;

use vidcount::cli::{report, run, Cli};

fn main() {
    let cli = Cli::parse();
    let result = run(&cli);
    std::process::exit(report(&result, cli.shared.json));
}
