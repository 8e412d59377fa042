fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let outcome = spectrum_cli::run(std::env::args_os());
    std::process::exit(outcome.exit_code);
}
