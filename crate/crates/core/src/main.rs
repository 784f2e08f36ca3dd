fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    protogeom::par::configure_threads_from_env();
    std::process::exit(protogeom::cli::main_with_args(std::env::args_os()));
}
