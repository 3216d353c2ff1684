fn main() {
    std::process::exit(splat4d::cli::run(std::env::args_os()));
}
