fn main() {
    std::process::exit(pvi::cli::main_with_args(std::env::args_os()));
}
