fn main() {
    std::process::exit(mmlq_cli::main_with_args(std::env::args_os()));
}
