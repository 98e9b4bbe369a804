use clap::Parser;
use gssl::cli::{format_error, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("{}", format_error(&err));
        std::process::exit(1);
    }
}
