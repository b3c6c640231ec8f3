use clap::Parser;

fn main() {
    let cli = kgqa_cli::Cli::parse();
    if let Err(e) = kgqa_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
