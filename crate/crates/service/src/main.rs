fn main() {
    std::process::exit(dynrisk_service::cli::run(std::env::args_os()));
}
