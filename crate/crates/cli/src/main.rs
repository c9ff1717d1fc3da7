fn main() {
    std::process::exit(advreg_cli::main_with_args(std::env::args_os()));
}
