use clap::Parser;

fn main() {
    let cli = merit_cli::Cli::parse();
    std::process::exit(merit_cli::run(cli));
}
