fn main() {
    std::process::exit(resbound_cli::run_cli(std::env::args_os()));
}
