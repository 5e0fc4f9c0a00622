fn main() {
    std::process::exit(entropic_pia::cli::main_with_args(std::env::args_os()));
}
