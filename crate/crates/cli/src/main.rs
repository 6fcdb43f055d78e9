use std::io::IsTerminal;

fn main() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("IOTMP_LOG").unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init();
    let mut out = std::io::stdout();
    std::process::exit(iotmp_cli::run(std::env::args_os(), &mut out));
}
