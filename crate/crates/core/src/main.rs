use clap::Parser;

fn main() {
    // Parallelism must be pinned before any solver call touches linear algebra.
    let threads = dopsep::cli::configure_threads();
    let cli = dopsep::cli::Cli::parse();
    if let Err(e) = dopsep::cli::run(cli, threads) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
