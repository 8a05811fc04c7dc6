use std::process::ExitCode;

use clap::Parser;
use depth_nerf::cli::{self, Cli, Command};
use depth_nerf::Error;

fn main() -> ExitCode {
    let args = Cli::parse();
    let common = args.command.common();
    let cfg = match cli::resolve(common.config.as_deref(), &common.overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if common.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global() {
        eprintln!("error: cannot start {} workers: {e}", cfg.workers);
        return ExitCode::FAILURE;
    }
    let result = match &args.command {
        Command::Generate(_) => cli::cmd_generate(&cfg).map(drop),
        Command::Train(_) => cli::cmd_train(&cfg).map(drop),
        Command::Render(_) => cli::cmd_render(&cfg).map(drop),
        Command::Eval(_) => cli::cmd_eval(&cfg).map(drop),
        Command::Bench(_) => cli::cmd_bench(&cfg).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
