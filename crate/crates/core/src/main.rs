fn main() {
    std::process::exit(omnimoe::harness::cli::main_with_args(std::env::args_os()));
}
