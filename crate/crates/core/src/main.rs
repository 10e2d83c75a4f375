use std::process::ExitCode;

fn main() -> ExitCode {
    simsam::cli::run(std::env::args_os())
}
