mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // help and version requests are not failures
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (_, 0) => log::LevelFilter::Warn,
        (_, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("PROTESTLENS_LOG").init();

    let result = match &cli.command {
        Command::BuildCorpus(a) => commands::build_corpus_cmd(a),
        Command::BuildVocab(a) => commands::build_vocab_cmd(a),
        Command::TrainText(a) => commands::train_text_cmd(a),
        Command::TrainImage(a) => commands::train_image_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::InferText(a) => commands::infer_text_cmd(a),
        Command::InferImage(a) => commands::infer_image_cmd(a),
        Command::InspectCheckpoint(a) => commands::inspect_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
