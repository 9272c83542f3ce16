fn main() {
    std::process::exit(emss::cli::run(std::env::args_os()));
}
