fn main() {
    std::process::exit(privagg_cli::main_with_args(std::env::args_os()));
}
