fn main() {
    std::process::exit(csran_cli::run(std::env::args_os()));
}
