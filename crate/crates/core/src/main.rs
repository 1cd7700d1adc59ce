fn main() {
    std::process::exit(chyvae::cli::run(std::env::args_os()));
}
