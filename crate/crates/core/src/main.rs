fn main() {
    std::process::exit(pilamim::cli::run(std::env::args_os()));
}
