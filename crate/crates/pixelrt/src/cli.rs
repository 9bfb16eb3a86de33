//! Command-line verbs. Every verb takes `--config` and `--seed`; what the
//! config file holds depends on the verb (see `Command`).

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use pixelrt_core::exec::Parallelism;
use pixelrt_model::chat::{golden_renderings, SpecialTokens};
use pixelrt_model::checkpoint::{load_checkpoint, save_checkpoint};
use pixelrt_model::clip::VideoClip;
use pixelrt_model::data::{frame_file_name, generate_toy_corpus, load_samples, synthesize_toy_corpus, ToyCorpusConfig, TrainSample};
use pixelrt_model::eval::{evaluate_corpus, EvalMode};
use pixelrt_model::memory::Session;
use pixelrt_model::model::{ModelConfig, PixelModel};
use pixelrt_model::prompt::PromptJson;
use pixelrt_model::train::{TrainConfig, Trainer};

use crate::service::{ask_response, router, AppState, ServiceConfig};

pub const CHECKPOINT_ENV: &str = "PIXELRT_CHECKPOINT";

#[derive(Parser, Debug)]
#[command(name = "pixelrt", version, about = "Pixel-level video reasoning toy model: train, evaluate, chat, serve")]
pub struct Cli {
    /// TOML or JSON config; its schema depends on the verb.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a manifest (or the built-in toy corpus). Config: training config.
    Train {
        /// `manifest.jsonl`; the toy corpus is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "pixelrt.ckpt")]
        out: PathBuf,
        /// JSON-lines step log; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a corpus and print the metric table. Config: model or training config.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::TeacherForced)]
        mode: Mode,
        /// Print the full report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Ask questions about a clip from the command line. Config: model or training config.
    Infer {
        /// Frame images in clip order.
        #[arg(long, num_args = 1.., conflicts_with = "clip_dir")]
        frames: Vec<PathBuf>,
        /// Directory of `frame_000.png`, `frame_001.png`, ...
        #[arg(long)]
        clip_dir: Option<PathBuf>,
        /// One turn per occurrence, in order.
        #[arg(long, required = true)]
        question: Vec<String>,
        /// Prompt JSON for the first turn, e.g. '{"kind":"point","t":0,"xy":[0.5,0.5]}'.
        #[arg(long)]
        prompt: Vec<String>,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the HTTP session service. Config: model or training config.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Static bundle to serve at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        capacity: usize,
        /// Idle minutes before a session is dropped.
        #[arg(long, default_value_t = 30)]
        idle_minutes: u64,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Print (or write) the canonical prompt renderings.
    Render {
        #[arg(long, required = true)]
        golden: bool,
        /// Write one `<name>.txt` per rendering here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataCommand {
    /// Write the synthetic shapes corpus. Config: corpus config.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    TeacherForced,
    OracleInjection,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::TeacherForced => EvalMode::TeacherForced,
            Mode::OracleInjection => EvalMode::OracleInjection,
        }
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    } else {
        Ok(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }
}

/// A model config on its own, or the `model` table of a training config.
fn model_config(path: Option<&Path>) -> Result<Option<ModelConfig>> {
    let Some(path) = path else { return Ok(None) };
    let raw: serde_json::Value = read_config(path)?;
    let cfg = if raw.get("model").is_some() {
        serde_json::from_value::<TrainConfig>(raw)?.model
    } else {
        serde_json::from_value(raw)?
    };
    cfg.validate()?;
    Ok(Some(cfg))
}

/// Weights from the checkpoint when given (checked against the config, if
/// any); otherwise a freshly initialized model.
pub fn load_model(checkpoint: Option<&Path>, config: Option<&Path>, seed: Option<u64>) -> Result<PixelModel> {
    let cfg = model_config(config)?;
    if let Some(path) = checkpoint {
        let model = load_checkpoint(path, cfg.as_ref()).with_context(|| format!("loading {}", path.display()))?;
        tracing::info!(checkpoint = %path.display(), "weights loaded");
        return Ok(model);
    }
    let mut cfg = cfg.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    tracing::warn!("no checkpoint given (set {CHECKPOINT_ENV} or --checkpoint); using untrained weights");
    Ok(PixelModel::new(cfg)?)
}

fn corpus(data: Option<&Path>, seed: Option<u64>) -> Result<Vec<TrainSample>> {
    match data {
        Some(path) => Ok(load_samples(path).with_context(|| format!("loading {}", path.display()))?),
        None => {
            let mut cfg = ToyCorpusConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Ok(generate_toy_corpus(&cfg)?
                .iter()
                .map(|s| s.to_train_sample())
                .collect::<pixelrt_core::Result<_>>()?)
        }
    }
}

fn clip_from_dir(dir: &Path) -> Result<VideoClip> {
    let mut paths = Vec::new();
    while dir.join(frame_file_name(paths.len())).exists() {
        paths.push(dir.join(frame_file_name(paths.len())));
    }
    if paths.is_empty() {
        bail!("{} holds no {}", dir.display(), frame_file_name(0));
    }
    Ok(VideoClip::load(&paths)?)
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Train { data, out, log, steps } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_path(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.steps = n;
            }
            let samples = corpus(data.as_deref(), None)?;
            let mut model = PixelModel::new(cfg.model.clone())?;
            tracing::info!(samples = samples.len(), parameters = model.store.count_scalars(), steps = cfg.steps, "training");
            let par = cfg.parallelism();
            let mut trainer = Trainer::new(&model, cfg)?;
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
                None => Box::new(std::io::stdout()),
            };
            let start = Instant::now();
            let summary = trainer.run(&mut model, &samples, Some(&mut *sink), |m| {
                let fit = evaluate_corpus(m, &samples, EvalMode::TeacherForced, par)?.fit();
                tracing::info!(mask_j = fit.0, lm_loss = fit.1, "train-set fit");
                Ok(fit)
            })?;
            sink.flush()?;
            save_checkpoint(&model, &out)?;
            tracing::info!(
                steps = summary.steps,
                stopped_early = summary.stopped_early,
                seconds = start.elapsed().as_secs_f64(),
                checkpoint = %out.display(),
                "done"
            );
        }
        Command::Eval { data, checkpoint, mode, json } => {
            let model = load_model(checkpoint.as_deref(), config, cli.seed)?;
            let samples = corpus(data.as_deref(), None)?;
            let report = evaluate_corpus(&model, &samples, mode.into(), Parallelism::Auto)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
        }
        Command::Infer {
            frames,
            clip_dir,
            question,
            prompt,
            checkpoint,
        } => {
            let model = load_model(checkpoint.as_deref(), config, cli.seed)?;
            let clip = match clip_dir {
                Some(dir) => clip_from_dir(&dir)?,
                None if !frames.is_empty() => VideoClip::load(&frames)?,
                None => bail!("give --frames or --clip-dir"),
            };
            let prompts = prompt
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let json: PromptJson = serde_json::from_str(p).with_context(|| format!("--prompt #{i}"))?;
                    json.validate(clip.len(), clip.frame_size())
                        .map_err(|e| anyhow::anyhow!("prompts[{i}].{}: {}", e.field, e.message))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut session = Session::new("cli", Arc::new(clip));
            for (turn, q) in question.iter().enumerate() {
                let ps = if turn == 0 { prompts.as_slice() } else { &[] };
                let out = model.run_turn(&mut session, q, ps)?;
                println!("{}", serde_json::to_string(&ask_response(out, true))?);
            }
        }
        Command::Serve {
            port,
            host,
            ui,
            checkpoint,
            capacity,
            idle_minutes,
        } => {
            let model = load_model(checkpoint.as_deref(), config, cli.seed)?;
            let cfg = ServiceConfig {
                capacity,
                idle_timeout: std::time::Duration::from_secs(idle_minutes * 60),
                ..Default::default()
            };
            let addr: SocketAddr = format!("{host}:{port}").parse().context("--host/--port")?;
            serve(model, cfg, ui, addr)?;
        }
        Command::Data {
            command: DataCommand::Synth { out },
        } => {
            let mut cfg: ToyCorpusConfig = match config {
                Some(p) => read_config(p)?,
                None => ToyCorpusConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let records = synthesize_toy_corpus(&cfg, &out)?;
            println!("wrote {} samples to {}", records.len(), out.join("manifest.jsonl").display());
        }
        Command::Render { golden: _, out } => {
            // Renderings have no tunables; --config and --seed are accepted for uniformity.
            for (name, text) in golden_renderings(&SpecialTokens::default())? {
                match &out {
                    Some(dir) => {
                        fs::create_dir_all(dir)?;
                        fs::write(dir.join(format!("{name}.txt")), text)?;
                    }
                    None => println!("=== {name}\n{text}"),
                }
            }
        }
    }
    Ok(())
}

fn serve(model: PixelModel, cfg: ServiceConfig, ui: Option<PathBuf>, addr: SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let state = AppState::new(model, cfg);
        let sweeper = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(60));
            loop {
                tick.tick().await;
                let n = sweeper.purge_expired();
                if n > 0 {
                    tracing::info!(expired = n, "idle sessions dropped");
                }
            }
        });
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(%addr, "listening");
        axum::serve(listener, router(state, ui))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
