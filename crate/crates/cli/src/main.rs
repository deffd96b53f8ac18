use clap::Parser;

fn main() {
    let cli = bigans_cli::Cli::parse();
    match bigans_cli::run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
