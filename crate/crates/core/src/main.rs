use std::process::ExitCode;

fn main() -> ExitCode {
    dhat::cli::main_with_args(std::env::args_os())
}
