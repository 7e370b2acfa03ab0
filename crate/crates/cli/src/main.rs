use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = iceprune_cli::run(iceprune_cli::Cli::parse());
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    std::process::exit(iceprune_cli::exit_code(&result));
}
