fn main() {
    std::process::exit(rrhte::cli::run_cli(std::env::args_os()));
}
