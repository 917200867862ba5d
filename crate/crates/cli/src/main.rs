use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fla_slt_cli::main_with(std::env::args_os()))
}
