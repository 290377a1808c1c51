fn main() {
    std::process::exit(graphcap::cli::run(std::env::args_os()));
}
