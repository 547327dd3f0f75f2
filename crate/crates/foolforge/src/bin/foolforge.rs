use std::process::ExitCode;

fn main() -> ExitCode {
    foolforge::cli::main()
}
