fn main() {
    std::process::exit(terradyn::cli::run(std::env::args_os()));
}
