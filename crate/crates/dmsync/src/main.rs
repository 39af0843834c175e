use std::process::ExitCode;

fn main() -> ExitCode {
    dmsync::cli::main()
}
