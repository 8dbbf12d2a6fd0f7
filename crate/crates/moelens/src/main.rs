fn main() {
    std::process::exit(moelens::cli::run_from(std::env::args_os()));
}
