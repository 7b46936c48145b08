fn main() {
    std::process::exit(marmopipe::cli::main_with_args(std::env::args_os()));
}
