use clap::Parser;

fn main() {
    let cli = gkm_cli::Cli::parse();
    if let Err(e) = gkm_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
