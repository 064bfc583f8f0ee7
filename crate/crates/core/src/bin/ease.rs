fn main() {
    std::process::exit(ease_core::cli::run(std::env::args_os()));
}
