fn main() {
    std::process::exit(snse_cli::run(std::env::args_os()));
}
