use clap::Parser;

fn main() {
    let cli = aralign_cli::Cli::parse();
    if let Err(e) = aralign_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
