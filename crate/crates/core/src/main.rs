use clap::Parser;

fn main() {
    let cli = syncdiff::cli::Cli::parse();
    if let Err(e) = syncdiff::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
