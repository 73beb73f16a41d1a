fn main() {
    std::process::exit(fullsleepnet::cli::main_with_args(std::env::args_os()));
}
