fn main() {
    std::process::exit(diagnet::cli::run(std::env::args_os()));
}
