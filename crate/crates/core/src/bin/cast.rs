fn main() {
    std::process::exit(cast_core::cli::run(std::env::args_os()));
}
