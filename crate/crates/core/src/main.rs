fn main() {
    std::process::exit(emsa::cli::run(std::env::args_os()));
}
