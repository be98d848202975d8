fn main() {
    std::process::exit(ftml::cli::main_with_args(std::env::args_os()));
}
