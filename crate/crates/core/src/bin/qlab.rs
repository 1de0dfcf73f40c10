use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(qlab::harness::cli(std::env::args()) as u8)
}
