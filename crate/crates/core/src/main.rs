fn main() {
    std::process::exit(cdsl_lab::cli::main_with_args(std::env::args_os()));
}
