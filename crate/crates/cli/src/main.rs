fn main() {
    std::process::exit(ebsa_cli::run(std::env::args_os()));
}
