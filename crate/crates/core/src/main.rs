fn main() {
    std::process::exit(hyconex::cli::run(std::env::args_os()));
}
