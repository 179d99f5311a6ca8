fn main() {
    std::process::exit(feddcd::cli::run_cli(std::env::args_os()));
}
