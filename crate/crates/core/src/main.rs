fn main() {
    std::process::exit(mirrorscope::cli::main_with_args(std::env::args_os()));
}
