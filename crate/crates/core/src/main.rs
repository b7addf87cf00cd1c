use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HYBRIDCTL_LOG", "warn")).init();
    let cli = hybridctl::cli::Cli::parse();
    std::process::exit(hybridctl::cli::run(cli));
}
