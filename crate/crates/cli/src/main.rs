use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Trajectory-level generative embeddings: synthetic rewards for offline
/// imitation from a single observation-only expert episode.
#[derive(Parser, Debug)]
#[command(name = "tge", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment config (TOML). Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the verb's stochastic stage; for `pipeline` and
    /// `sweep` it replaces the RL seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Stage cache for `pipeline` and `sweep` (default: <out-dir>/cache).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out a scripted policy into a dataset, or record the expert demo.
    GenData(commands::GenData),
    /// Mix suboptimal and expert datasets and normalize observations.
    MixData(commands::MixData),
    /// Train the temporal diffusion model on a behavioral dataset.
    TrainDiffusion(commands::TrainDiffusion),
    /// Embed every segment of a dataset with a trained model.
    Embed(commands::Embed),
    /// Label behavioral states with kNN kernel rewards.
    Annotate(commands::Annotate),
    /// Train an offline RL policy on an annotated dataset.
    TrainRl(commands::TrainRl),
    /// Roll out a saved policy and report its normalized score.
    Eval(commands::Eval),
    /// Run every stage end to end with caching.
    Pipeline(commands::Pipeline),
    /// Vary one hyperparameter over a list of values.
    Sweep(commands::Sweep),
    /// Export histograms, projections and training curves.
    Plot(commands::Plot),
}

/// 2 for bad input, 3 for a stage that failed on valid input.
fn exit_code(err: &anyhow::Error) -> u8 {
    let is_config = err
        .chain()
        .find_map(|e| e.downcast_ref::<tge_core::Error>())
        .map(|e| e.is_config())
        .unwrap_or(false);
    if is_config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let g = &cli.global;
    let res = match &cli.command {
        Command::GenData(a) => commands::gen_data(g, a),
        Command::MixData(a) => commands::mix_data(g, a),
        Command::TrainDiffusion(a) => commands::train_diffusion(g, a),
        Command::Embed(a) => commands::embed(g, a),
        Command::Annotate(a) => commands::annotate(g, a),
        Command::TrainRl(a) => commands::train_rl(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Pipeline(a) => commands::pipeline(g, a),
        Command::Sweep(a) => commands::sweep(g, a),
        Command::Plot(a) => commands::plot(g, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let cfg = anyhow::Error::new(tge_core::Error::config("bad")).context("loading");
        assert_eq!(exit_code(&cfg), 2);
        let stage = anyhow::Error::new(tge_core::Error::Stage {
            stage: "diffusion".into(),
            source: Box::new(tge_core::Error::EmptyDataset),
            artifacts: vec![],
        });
        assert_eq!(exit_code(&stage), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 3);
    }
}
