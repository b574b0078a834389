use clap::Parser;
use depthpad::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
