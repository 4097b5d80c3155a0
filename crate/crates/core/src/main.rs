fn main() -> std::process::ExitCode {
    dflora::cli::main_with_args(std::env::args_os())
}
