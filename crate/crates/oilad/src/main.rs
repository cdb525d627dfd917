use clap::Parser;
use oilad::cli::{self, Cli};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Err(e) = cli::run(cli, args) {
        eprintln!("oilad: {e}");
        std::process::exit(e.exit_code());
    }
}
