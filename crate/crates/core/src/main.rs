fn main() {
    std::process::exit(refocus_core::cli::main_with_args(std::env::args_os()));
}
