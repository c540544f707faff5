use clap::Parser;
use mkv_control::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    let result = cli::init_threads().and_then(|_| cli::run(args));
    if let Err(e) = result {
        eprintln!("mkv: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
