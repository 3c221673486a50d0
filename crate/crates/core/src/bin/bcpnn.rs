use std::process::ExitCode;

fn main() -> ExitCode {
    bcpnn::cli::main_entry()
}
