fn main() {
    std::process::exit(preflearn::cli::run_command(std::env::args_os()));
}
