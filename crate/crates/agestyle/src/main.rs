use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(agestyle::cli::run(std::env::args()) as u8)
}
