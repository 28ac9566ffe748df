fn main() -> std::process::ExitCode {
    latentmem::cli::main_with_args(std::env::args_os())
}
