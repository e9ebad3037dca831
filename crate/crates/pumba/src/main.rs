use std::process::ExitCode;

fn main() -> ExitCode {
    pumba::cli::run_from(std::env::args_os())
}
