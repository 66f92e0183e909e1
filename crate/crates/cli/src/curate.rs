use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Subcommand, ValueEnum};
use rtedit_core::benchmark::{load_jsonl, save_jsonl};
use rtedit_core::curation::{
    build_pairs, dataset_stats, interaction_gate, run_pipeline, Clip, DecisionQueue, Filter, GateThresholds,
    HumanReview, Outcome, PairPolicy, PipelineManifest, RetentionLedger, Stage, StageConfig, StageKind, Version,
};
use rtedit_core::Error;

#[derive(Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    All,
    Original,
    Sampled,
}

#[derive(Subcommand)]
pub enum CurateCommand {
    /// Run a staged filter manifest over annotated clips.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        /// Recorded review decisions (JSON) for human-review stages.
        #[arg(long)]
        decisions: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
        /// Where to write dropped items and their reasons.
        #[arg(long)]
        filtered: Option<PathBuf>,
        /// Where to write the retention ledger (TOML).
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Turn per-clip version sets into directed edit pairs.
    Pairs {
        #[arg(long)]
        versions: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        policy: PolicyArg,
        #[arg(long, default_value_t = 4)]
        per_clip: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        bin_width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a stored retention ledger.
    Ledger { path: PathBuf },
}

fn param_f64(cfg: &StageConfig, key: &str, default: f64) -> rtedit_core::Result<f64> {
    match cfg.params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_float()
            .or_else(|| v.as_integer().map(|i| i as f64))
            .ok_or_else(|| Error::Format(format!("stage {:?}: {key} is not a number", cfg.name))),
    }
}

fn filter_of(cfg: &StageConfig) -> String {
    if let Some(f) = cfg.params.get("filter").and_then(|v| v.as_str()) {
        return f.to_string();
    }
    match cfg.name.as_str() {
        "camera whitelist" => "camera",
        "hand detection" => "hand",
        "interaction gate" => "gate",
        "object naming" => "named",
        other => other,
    }
    .to_string()
}

type Boxed<'a> = Box<dyn Stage<Clip> + 'a>;

fn boxed<F>(cfg: &StageConfig, f: F) -> Boxed<'static>
where
    F: Fn(Clip) -> rtedit_core::Result<Outcome<Clip>> + Sync + 'static,
{
    let mut s = Filter::new(cfg.name.clone(), f);
    s.unit = cfg.unit.clone().unwrap_or_else(|| "clips".into());
    s.expected_retention = cfg.expected_retention;
    Box::new(s)
}

/// Stages over pre-annotated clips. Detector outputs are read from the clip
/// records, so only the decision logic runs here.
fn stage(cfg: &StageConfig, queue: &Option<DecisionQueue>) -> rtedit_core::Result<Boxed<'static>> {
    if cfg.kind == StageKind::HumanReview {
        let queue = queue
            .clone()
            .ok_or_else(|| Error::Pipeline(format!("stage {:?} needs --decisions", cfg.name)))?;
        return Ok(Box::new(HumanReview {
            name: cfg.name.clone(),
            unit: cfg.unit.clone().unwrap_or_else(|| "clips".into()),
            queue,
        }));
    }
    Ok(match filter_of(cfg).as_str() {
        "camera" => {
            let allowed: Vec<String> = cfg
                .params
                .get("allowed")
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::Format(format!("stage {:?}: missing allowed cameras", cfg.name)))?
                .iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect();
            boxed(cfg, move |c: Clip| {
                Ok(if allowed.contains(&c.camera) {
                    Outcome::Keep(c)
                } else {
                    Outcome::Drop(format!("camera {:?} not allowed", c.camera))
                })
            })
        }
        "hand" => boxed(cfg, |c: Clip| {
            Ok(match &c.hand {
                Some(h) if !h.mask.is_empty() && !h.keypoints.is_empty() => Outcome::Keep(c),
                _ => Outcome::Drop("no hand".into()),
            })
        }),
        "named" => boxed(cfg, |c: Clip| {
            Ok(if c.object_name.is_some() { Outcome::Keep(c) } else { Outcome::Drop("no object name".into()) })
        }),
        "gate" => {
            let d = GateThresholds::default();
            let t = GateThresholds {
                edge: param_f64(cfg, "edge", d.edge)?,
                keypoint: param_f64(cfg, "keypoint", d.keypoint)?,
            };
            boxed(cfg, move |c: Clip| {
                let (Some(hand), Some(mask)) = (&c.hand, &c.object_mask) else {
                    return Ok(Outcome::Drop("missing hand or object mask".into()));
                };
                let g = interaction_gate(hand, mask, &t);
                Ok(if g.passed { Outcome::Keep(c) } else { Outcome::Drop(g.reason.unwrap_or_default()) })
            })
        }
        other => return Err(Error::Format(format!("stage {:?}: unknown filter {other:?}", cfg.name))),
    })
}

pub fn run(cmd: CurateCommand) -> Result<()> {
    match cmd {
        CurateCommand::Run {
            manifest,
            clips,
            decisions,
            workers,
            out,
            filtered,
            ledger,
        } => {
            let m = PipelineManifest::from_toml(&std::fs::read_to_string(&manifest)?)
                .with_context(|| format!("parsing {}", manifest.display()))?;
            let queue = decisions.as_deref().map(DecisionQueue::load).transpose()?;
            let stages = m.build(|cfg| stage(cfg, &queue))?;
            let items: Vec<Clip> = load_jsonl(&clips).with_context(|| format!("reading {}", clips.display()))?;
            let run = run_pipeline(items, &stages, workers)?;
            save_jsonl(&run.survivors, &out)?;
            if let Some(p) = filtered {
                save_jsonl(&run.filtered, &p)?;
            }
            if let Some(p) = ledger {
                std::fs::write(&p, toml::to_string(&run.ledger)?)?;
            }
            println!("{}", run.ledger);
        }
        CurateCommand::Pairs {
            versions,
            policy,
            per_clip,
            seed,
            bin_width,
            out,
        } => {
            let all: Vec<Version> = load_jsonl(&versions).with_context(|| format!("reading {}", versions.display()))?;
            let mut by_clip: BTreeMap<String, Vec<Version>> = BTreeMap::new();
            for v in all {
                by_clip.entry(v.clip_id.clone()).or_default().push(v);
            }
            let policy = match policy {
                PolicyArg::All => PairPolicy::AllPermutations,
                PolicyArg::Original => PairPolicy::OriginalAsSource,
                PolicyArg::Sampled => PairPolicy::Sampled { per_clip, seed },
            };
            let mut pairs = Vec::new();
            for (clip, vs) in &by_clip {
                pairs.extend(build_pairs(vs, policy).map_err(|e| anyhow!("clip {clip}: {e}"))?);
            }
            save_jsonl(&pairs, &out)?;
            println!("{}", serde_json::to_string_pretty(&dataset_stats(&pairs, bin_width))?);
        }
        CurateCommand::Ledger { path } => {
            println!("{}", RetentionLedger::load(&path)?);
        }
    }
    Ok(())
}
