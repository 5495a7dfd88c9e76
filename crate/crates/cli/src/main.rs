use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use maestro_core::emulator::{load_scenario, run};
use maestro_core::model::{load_checkpoint, save_checkpoint, ModelConfig, Optimizer};
use maestro_core::server::{serve, MusicService, ServerConfig, DEFAULT_PORT};
use maestro_core::strategy::{default_config, load_config};
use maestro_core::trainer::{build_dataset, evaluate_loss, train, Split, TrainOptions};

#[derive(Parser)]
#[command(name = "maestro", version, about = "Emotion-driven layered music generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of MIDI files.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        d_ff: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Report loss and perplexity of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Run the music server.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Strategy table (TOML); the built-in table when omitted.
        #[arg(long)]
        strategies: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value_t = maestro_core::layers::DEFAULT_LENGTH_TOKENS)]
        length_tokens: usize,
    },
    /// Replay a scenario against a running server.
    Emulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7474")]
        server: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
}

fn read_checkpoint(path: &PathBuf) -> Result<maestro_core::model::Params<f64>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("MAESTRO_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Train {
            corpus,
            out,
            steps,
            seed,
            preset,
            d_model,
            layers,
            heads,
            d_ff,
            context,
            lr,
            batch,
            log_every,
        } => {
            let mut config = match preset {
                Preset::Toy => ModelConfig::toy(),
                Preset::Desk => ModelConfig::desk(),
            };
            config.d_model = d_model.unwrap_or(config.d_model);
            config.n_layers = layers.unwrap_or(config.n_layers);
            config.n_heads = heads.unwrap_or(config.n_heads);
            config.d_ff = d_ff.unwrap_or(config.d_ff);
            config.max_seq_len = context.unwrap_or(config.max_seq_len);
            let dataset = build_dataset(&corpus)?;
            let options = TrainOptions {
                steps,
                seed,
                batch_size: batch,
                learning_rate: lr,
                log_every,
                optimizer: Optimizer::default(),
            };
            println!("step\ttrain_loss\tval_loss");
            let outcome = train(&config, &dataset, &options, |line| println!("{line}"))?;
            std::fs::write(&out, save_checkpoint(&outcome.params))
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Eval { checkpoint, corpus } => {
            let params = read_checkpoint(&checkpoint)?;
            let dataset = build_dataset(&corpus)?;
            for (name, split) in [("train", Split::Train), ("validation", Split::Validation)] {
                if dataset.split(split).next().is_none() {
                    println!("{name}\t-\t-");
                    continue;
                }
                let loss = evaluate_loss(&params, dataset.split(split))?;
                println!("{name}\t{loss:.4}\t{:.3}", loss.exp());
            }
        }
        Command::Serve {
            checkpoint,
            strategies,
            corpus,
            port,
            host,
            seed,
            workers,
            length_tokens,
        } => {
            let params = read_checkpoint(&checkpoint)?;
            let strategies = match strategies {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    load_config(&text)?
                }
                None => default_config(),
            };
            let dataset = build_dataset(&corpus)?;
            let config = ServerConfig {
                seed,
                workers,
                length_tokens,
                ..ServerConfig::default()
            };
            let service = MusicService::start(Arc::new(params), strategies, Arc::new(dataset), config)?;
            let handle = serve(service, (host.as_str(), port))?;
            eprintln!("listening on {}", handle.local_addr());
            handle.join();
        }
        Command::Emulate {
            scenario,
            server,
            out,
            time_scale,
        } => {
            let scenario = load_scenario(&scenario)?;
            match run(&scenario, &server, &out, time_scale) {
                Ok(transcript) => print!("{transcript}"),
                Err(e) => {
                    print!("{}", e.transcript);
                    bail!("{e}");
                }
            }
        }
    }
    Ok(())
}
