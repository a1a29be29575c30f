fn main() {
    std::process::exit(prose_cli::run(std::env::args_os()));
}
