use clap::error::ErrorKind;
use clap::Parser;
use tangentconv_cli::{run, Cli, CliError, ErrorCode};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = CliError::new(ErrorCode::Config, first.trim_start_matches("error: "));
            eprintln!("{}", err.line());
            std::process::exit(err.code.exit_code());
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let stdout = std::io::stdout();
    if let Err(e) = run(&cli, &mut stdout.lock()) {
        eprintln!("{}", e.line());
        std::process::exit(e.code.exit_code());
    }
}
