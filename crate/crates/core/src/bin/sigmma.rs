fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIGMMA_LOG", "warn")).init();
    std::process::exit(sigmma::cli::run(std::env::args_os()));
}
