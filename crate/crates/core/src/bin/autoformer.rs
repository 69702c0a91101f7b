fn main() {
    std::process::exit(autoformer::cli::main_with_args(std::env::args_os()));
}
