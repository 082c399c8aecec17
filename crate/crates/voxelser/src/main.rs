use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout();
    let code = voxelser::cli::run_from(std::env::args(), &mut stdout);
    ExitCode::from(code as u8)
}
