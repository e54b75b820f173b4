fn main() {
    std::process::exit(skiprec::cli::main_with_args(std::env::args_os()));
}
