fn main() {
    std::process::exit(plena::cli::run(std::env::args_os()));
}
