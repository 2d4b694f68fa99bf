use std::process::ExitCode;

use clap::Parser;
use ppgkit_cli::{cmd_gen, cmd_run, cmd_sweep, configure_threads, verify, Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let outcome = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify(args) => {
            return match verify(args) {
                Ok(results) => {
                    for r in &results {
                        println!("{r}");
                    }
                    let failed = results.iter().filter(|r| !r.passed).count();
                    println!("{} properties, {} failed", results.len(), failed);
                    if failed == 0 {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            };
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
