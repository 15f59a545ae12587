use std::process::ExitCode;

fn main() -> ExitCode {
    dgcspn::cli::run()
}
