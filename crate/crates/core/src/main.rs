use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use petsynth::cli::{run, Cli};
use petsynth::ErrorCategory;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[{}]: {first}", ErrorCategory::Usage.as_str());
            eprint!("{}", e.render());
            return ExitCode::from(ErrorCategory::Usage.exit_code() as u8);
        }
    };
    match run(cli, &mut |line| println!("{line}")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{}]: {}", category.as_str(), e.to_string().replace('\n', " "));
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
