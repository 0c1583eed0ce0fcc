fn main() -> std::process::ExitCode {
    lungvol::cli::main_with_args(std::env::args_os())
}
