use clap::Parser;

fn main() {
    let cli = densecore::cli::Cli::parse();
    if let Err(e) = densecore::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
