fn main() {
    std::process::exit(metadg::cli::main_with_args(std::env::args_os()));
}
