fn main() {
    std::process::exit(moveover::cli::run_command(std::env::args_os()));
}
