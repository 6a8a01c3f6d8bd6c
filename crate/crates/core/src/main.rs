fn main() {
    std::process::exit(anteversion::cli::run(std::env::args_os()));
}
