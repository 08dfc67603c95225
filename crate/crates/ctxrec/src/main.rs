use clap::Parser;
use ctxrec::cli::{self, CliArgs};

fn main() {
    let args = CliArgs::parse();
    if let Err(e) = cli::run(&args) {
        eprintln!("ctxrec: kind={} {e}", e.kind());
        std::process::exit(e.exit_code());
    }
}
