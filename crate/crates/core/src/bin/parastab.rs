use clap::Parser;

fn main() {
    std::process::exit(parastab::cli::run(parastab::cli::Cli::parse()));
}
