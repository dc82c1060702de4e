use std::process::ExitCode;

fn main() -> ExitCode {
    fnodyn::cli::main()
}
