fn main() {
    std::process::exit(stgdance::cli::run(std::env::args_os()));
}
