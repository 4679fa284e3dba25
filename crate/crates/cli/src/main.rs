use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(swinca_cli::run(std::env::args_os()) as u8)
}
