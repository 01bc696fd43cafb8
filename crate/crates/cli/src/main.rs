fn main() {
    std::process::exit(sinkflow_cli::main_with_args(std::env::args_os()));
}
