mod bench;
mod curate;
mod toys;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rtedit_core::codec::{load_video, save_video, Codec, SPATIAL};
use rtedit_core::model::{EditorModel, HashTextEmbedder, ModelConfig};
use rtedit_core::rng;
use rtedit_core::stream::{
    run_stream, Clock, Init, LatencyReport, Mode, RolloutEditor, StageDelays, StreamConfig, TimingProfile,
};

#[derive(Parser)]
#[command(name = "rtedit", version, about = "Chunk-causal streaming video editing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// First-chunk latency and throughput report for timing profiles.
    Latency {
        #[arg(long, required = true, num_args = 1..)]
        profile: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Edit a raw video chunk by chunk through the streaming pipeline.
    Stream(StreamArgs),
    /// Fit a small flow model to a 2-D Gaussian.
    TrainToy(toys::TrainToyArgs),
    /// Distribution-matching distillation on the 1-D two-mode mixture.
    DistillDmd(toys::DmdArgs),
    /// Self-rollout distillation on the chunked autoregressive toy.
    DistillSf(toys::SfArgs),
    /// Build, score and check the editing benchmark.
    Bench {
        #[command(subcommand)]
        command: bench::BenchCommand,
    },
    /// Run curation pipelines and pair construction.
    Curate {
        #[command(subcommand)]
        command: curate::CurateCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Pipelined,
}

#[derive(clap::Args)]
struct StreamArgs {
    /// Editor directory written by `EditorModel::save`. A seeded random
    /// editor sized to the source is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    /// Latent channels kept by the codec (all when omitted).
    #[arg(long)]
    keep_channels: Option<usize>,
    #[arg(long, value_enum, default_value = "pipelined")]
    mode: ModeArg,
    /// Replay the stage times of a timing profile on a simulated clock.
    #[arg(long)]
    simulate: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn latency(profiles: &[PathBuf], json: bool) -> Result<()> {
    for path in profiles {
        let p = TimingProfile::load(path).with_context(|| format!("loading {}", path.display()))?;
        let report = LatencyReport::new(&p)?;
        if json {
            println!("{}", serde_json::to_string(&report)?);
        } else {
            println!("{report}\n");
        }
    }
    Ok(())
}

fn stream(args: &StreamArgs) -> Result<()> {
    let src = load_video::<f32>(&args.source).with_context(|| format!("loading {}", args.source.display()))?;
    let codec = match args.keep_channels {
        Some(k) => Codec::lossy(k)?,
        None => Codec::lossless(),
    };
    let model = match &args.checkpoint {
        Some(dir) => EditorModel::<f32>::load(dir).with_context(|| format!("loading {}", dir.display()))?,
        None => {
            let (h, w) = (src.height() / SPATIAL, src.width() / SPATIAL);
            let cfg = ModelConfig {
                latent_channels: codec.latent_channels(),
                latent_height: h,
                latent_width: w,
                patch: if h % 2 == 0 && w % 2 == 0 { 2 } else { 1 },
                ..ModelConfig::default()
            };
            EditorModel::new(cfg, &mut rng::seeded(args.seed))?
        }
    };
    let cfg = model.config().clone();
    if cfg.latent_channels != codec.latent_channels() {
        bail!("editor expects {} latent channels, codec gives {}", cfg.latent_channels, codec.latent_channels());
    }
    let latents = codec.encode(&src)?.len();
    if latents % cfg.chunk_latents != 0 {
        bail!("{} latents do not split into {}-latent chunks", latents, cfg.chunk_latents);
    }
    let chunks = latents / cfg.chunk_latents;
    let text = HashTextEmbedder::new(cfg.text_dim, 16).embed::<f32>(&args.instruction);
    let mut editor = RolloutEditor::new(&model, text, args.steps, chunks, cfg.mask_first_for_last, args.seed, Init::Noise)?;
    let (clock, delays) = match &args.simulate {
        Some(p) => (Clock::Simulated, StageDelays::from_profile(&TimingProfile::load(p)?, chunks)),
        None => (Clock::Wall, StageDelays::none()),
    };
    let config = StreamConfig {
        mode: match args.mode {
            ModeArg::Sequential => Mode::Sequential,
            ModeArg::Pipelined => Mode::Pipelined,
        },
        clock,
        delays,
        chunk_latents: cfg.chunk_latents,
    };
    let out = run_stream(&src, &codec, &mut editor, &config)?;
    save_video(&args.out, &out.video)?;
    let r = &out.report;
    println!("chunks {}  frames {}  NFE/chunk {}", r.chunks, r.frames, args.steps);
    println!("first chunk latency {:.1} ms", r.first_chunk_latency_ms);
    if let (Some(p), Some(fps)) = (r.period_ms, r.fps) {
        println!("steady period {p:.1} ms ({fps:.1} fps)");
    }
    for s in &r.stages {
        println!("  {:<8} mean {:>8.2} ms  max {:>8.2} ms", s.stage, s.mean_ms, s.max_ms);
    }
    if !out.stalls.is_empty() {
        println!("{} stalls", out.stalls.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Latency { profile, json } => latency(&profile, json),
        Command::Stream(args) => stream(&args),
        Command::TrainToy(args) => toys::train_toy(&args),
        Command::DistillDmd(args) => toys::distill_dmd(&args),
        Command::DistillSf(args) => toys::distill_sf(&args),
        Command::Bench { command } => bench::run(command),
        Command::Curate { command } => curate::run(command),
    }
}
