fn main() {
    std::process::exit(interprompt::cli::main_with_args(std::env::args_os()));
}
