fn main() {
    edanni::cli::init_logging();
    std::process::exit(edanni::cli::main_with_args(std::env::args_os()));
}
