fn main() -> std::process::ExitCode {
    umbra::cli::main_with_args(std::env::args_os())
}
