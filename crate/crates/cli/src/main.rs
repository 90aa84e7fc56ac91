use clap::Parser;

fn main() {
    let cli = ccl_cli::Cli::parse();
    if let Err(e) = ccl_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
