fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PAN_LOG", "error")).init();
    std::process::exit(painattn::cli::run(std::env::args_os()));
}
