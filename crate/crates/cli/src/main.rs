use std::process::ExitCode;

fn main() -> ExitCode {
    let code = volnet_cli::cli_dispatch(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(code)
}
