fn main() {
    std::process::exit(tte::cli::main_with_args(std::env::args_os()));
}
