use std::io;
use std::process::ExitCode;

use clap::Parser;
use reason3d_cli::log::event_line;
use reason3d_cli::{run, Cli, CliError, Context, EventLog};
use serde_json::json;

fn fail(e: &CliError) -> ExitCode {
    let line = event_line(
        "error",
        json!({ "kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() }),
    );
    eprintln!("{line}");
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match Context::from_env() {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let mut stdout = io::stdout().lock();
    let mut log = EventLog::new(&mut stdout);
    match run(cli, &ctx, &mut log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
