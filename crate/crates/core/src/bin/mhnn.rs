use std::process::ExitCode;

fn main() -> ExitCode {
    mhnn::cli::run(std::env::args_os())
}
