use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let outcome = futh::cli::run_args(std::env::args_os());
    let text = outcome.output.as_bytes();
    let _ = if outcome.code == futh::cli::EXIT_OK {
        std::io::stdout().write_all(text)
    } else {
        std::io::stderr().write_all(text)
    };
    ExitCode::from(outcome.code as u8)
}
