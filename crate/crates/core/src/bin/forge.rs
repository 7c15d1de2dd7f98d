use std::io;
use std::panic;
use std::process::ExitCode;

fn main() -> ExitCode {
    panic::set_hook(Box::new(|info| eprintln!("error: internal failure: {info}")));
    let code = panic::catch_unwind(|| {
        let stdout = io::stdout();
        let stderr = io::stderr();
        forge_harness::cli::run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
    })
    .unwrap_or(forge_harness::cli::EXIT_FAILURE);
    ExitCode::from(code as u8)
}
