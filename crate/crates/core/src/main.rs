use clap::Parser;

use lora_fusion::cli_io::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let msg = e.to_string().replace(['\n', '\r'], " ");
        eprintln!("error: {msg}");
        std::process::exit(exit_code(&e));
    }
}
