use std::process::ExitCode;

fn main() -> ExitCode {
    clipfit::cli::main()
}
