fn main() {
    std::process::exit(vlpsense_cli::run_cli(std::env::args_os()));
}
