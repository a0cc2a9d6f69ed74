fn main() {
    std::process::exit(vilds::cli::run(std::env::args_os()));
}
