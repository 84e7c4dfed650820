fn main() {
    std::process::exit(gnp::cli::run_cli(std::env::args_os()));
}
