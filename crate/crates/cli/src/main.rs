use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (code, line) = mofme_cli::dispatch(std::env::args_os());
    if let Some(line) = line {
        eprintln!("{line}");
    }
    ExitCode::from(code)
}
