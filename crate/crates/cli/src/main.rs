use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ce_cli::run(std::env::args_os()))
}
