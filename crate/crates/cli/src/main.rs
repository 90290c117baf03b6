fn main() {
    std::process::exit(perceptvis_cli::run(std::env::args_os()));
}
