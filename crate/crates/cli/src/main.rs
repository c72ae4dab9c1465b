fn main() {
    std::process::exit(dpme_cli::run(std::env::args_os()));
}
