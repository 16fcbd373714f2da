use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr().lock();
    if let Err(e) = lorapt_cli::configure_threads() {
        use std::io::Write;
        let _ = writeln!(stderr, "error: {}", e.msg);
        return ExitCode::from(e.exit as u8);
    }
    let code = lorapt_cli::run(std::env::args_os(), &mut stdout, &mut stderr);
    ExitCode::from(code as u8)
}
