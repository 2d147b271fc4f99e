use clap::Parser;
use famattr::cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(text) => print!("{text}{}", if text.ends_with('\n') { "" } else { "\n" }),
        Err(e) => {
            eprintln!("famattr: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
