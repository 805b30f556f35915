fn main() {
    std::process::exit(aaface::cli::main_with_args(std::env::args_os()));
}
