fn main() {
    std::process::exit(mvdrl::cli::main_with_args(std::env::args_os()));
}
