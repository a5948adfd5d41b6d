use std::process::ExitCode;

fn main() -> ExitCode {
    let seed = std::env::var("RC3_SEED").ok();
    let code = rc3::cli::run(std::env::args_os(), seed.as_deref(), &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(code as u8)
}
