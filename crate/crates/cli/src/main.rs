fn main() {
    std::process::exit(sift_cli::run(std::env::args_os()));
}
