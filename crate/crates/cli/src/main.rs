use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use goalweaver::corpus::{CorpusFormat, VerbClass};
use goalweaver::pipeline::{self, PipelineError, RunConfig};
use goalweaver::policy::StateMode;

#[derive(Parser)]
#[command(name = "goalweaver", version, about = "Goal-directed story generation pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "GOALWEAVER_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Verb-class index (`lemma<TAB>class`).
    #[arg(long, global = true)]
    verbnet: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Knowledge-graph DQN policy (or query-state DQN with `--state query`).
    Dqn,
    /// Reward-shaped fine-tuning of the n-gram model.
    Rsft,
    /// Fit the n-gram model only.
    Lm,
}

#[derive(Clone, Copy, ValueEnum)]
enum State {
    Graph,
    Query,
}

#[derive(Subcommand)]
enum Command {
    /// Split the corpus into train/test halves with id manifests.
    Preprocess {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        /// Training fraction.
        #[arg(long)]
        split: Option<f64>,
    },
    /// Compute the reward table and clusters for a goal class.
    Rewards {
        #[arg(long)]
        goal: Option<String>,
        /// Cluster count (default: chosen by variance fit).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train a policy or fine-tune the language model.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "graph")]
        state: State,
    },
    /// Generate one story from a seed sentence.
    Generate {
        #[arg(long)]
        seed_text: String,
        /// Goal class (default: the goal of the stored reward table).
        #[arg(long)]
        goal: Option<String>,
        #[arg(long, default_value = "kg-dqn")]
        model: String,
    },
    /// Evaluate models on seed stories and write report files.
    Evaluate {
        /// Comma-separated model names.
        #[arg(long, value_delimiter = ',', default_value = "kg-dqn,ngram")]
        models: Vec<String>,
        /// Manifest of seed story ids (default: the test split).
        #[arg(long)]
        seeds: Option<PathBuf>,
    },
}

fn configure(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(v) = &cli.verbnet {
        cfg.corpus.verbnet = v.clone();
    }
    match &cli.command {
        Command::Preprocess { corpus, format, split } => {
            if let Some(c) = corpus {
                cfg.corpus.path = c.clone();
            }
            if let Some(f) = format {
                cfg.corpus.format = f.parse::<CorpusFormat>().map_err(|e| PipelineError::Config(e.to_string()))?;
            }
            if let Some(s) = split {
                cfg.corpus.split = *s;
            }
        }
        Command::Rewards { goal, k } => {
            if goal.is_some() {
                cfg.goal = goal.clone();
            }
            if k.is_some() {
                cfg.rewards.k = *k;
            }
        }
        Command::Train { mode, epochs: Some(e), .. } => match mode {
            Mode::Dqn => cfg.dqn.epochs = *e,
            Mode::Rsft => cfg.rsft.epochs = *e,
            Mode::Lm => {}
        },
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = configure(cli)?;
    match &cli.command {
        Command::Preprocess { .. } => {
            let s = pipeline::preprocess(&cfg)?;
            println!("train\t{}\ntest\t{}", s.train, s.test);
        }
        Command::Rewards { .. } => {
            let (table, clusters) = pipeline::rewards(&cfg, &cfg.goal()?)?;
            println!("classes\t{}\nclusters\t{}", table.len(), clusters.k);
            for v in table.omitted() {
                eprintln!("omitted (never co-occurs with goal): {v}");
            }
        }
        Command::Train { mode, state, .. } => {
            let summary = match mode {
                Mode::Lm => {
                    pipeline::fit_lm(&cfg)?;
                    println!("checkpoint\t{}", cfg.artifact("lm.ckpt").display());
                    return Ok(());
                }
                Mode::Dqn => pipeline::train_policy(
                    &cfg,
                    match state {
                        State::Graph => StateMode::Graph,
                        State::Query => StateMode::Query,
                    },
                )?,
                Mode::Rsft => pipeline::train_tuned(&cfg)?,
            };
            println!(
                "checkpoints\t{}\nbest_epoch\t{}\ncheckpoint\t{}",
                summary.checkpoints,
                summary.best_epoch,
                summary.checkpoint.display()
            );
        }
        Command::Generate { seed_text, goal, model } => {
            let goal = match goal {
                Some(g) => VerbClass::new(g.as_str()),
                None => pipeline::load_rewards(&cfg)?.0.goal().clone(),
            };
            let story = pipeline::generate_one(&cfg, model, seed_text, &goal)?;
            for line in story.sentences() {
                println!("{line}");
            }
            eprintln!("cause: {}", story.cause);
        }
        Command::Evaluate { models, seeds } => {
            let report = pipeline::evaluate_models(&cfg, models, seeds.as_deref())?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
