fn main() {
    std::process::exit(cassi_cli::run(std::env::args_os()));
}
