use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Subcommand;
use rtedit_core::benchmark::{
    aggregate, build_benchmark, load_jsonl, preference_agreement, sample_sources, save_jsonl, BenchEntry, PreferenceSample,
    ScoreRecord, Source, Templates, DIVERSE_CLUSTERS, PER_CLUSTER,
};
use rtedit_core::model::HashTextEmbedder;

#[derive(Subcommand)]
pub enum BenchCommand {
    /// Pick a diverse subset of candidate source videos by clustering captions.
    Sample {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value_t = DIVERSE_CLUSTERS)]
        clusters: usize,
        #[arg(long, default_value_t = PER_CLUSTER)]
        per_cluster: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand sources into the task manifest.
    Build {
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        add_pool: PathBuf,
        #[arg(long)]
        remove_pool: PathBuf,
        /// TOML instruction templates; built-in ones when omitted.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate judge scores per task and overall.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Agreement between metric preferences and human preferences.
    Agree {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    load_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

pub fn run(cmd: BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::Sample {
            candidates,
            clusters,
            per_cluster,
            seed,
            out,
        } => {
            let cands: Vec<Source> = load(&candidates)?;
            let picked = sample_sources(&cands, &HashTextEmbedder::new(32, 16), clusters, per_cluster, seed)?;
            save_jsonl(&picked, &out)?;
            println!("{} of {} sources", picked.len(), cands.len());
        }
        BenchCommand::Build {
            sources,
            add_pool,
            remove_pool,
            templates,
            out,
        } => {
            let templates = match templates {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => Templates::default(),
            };
            let entries = build_benchmark(&load::<Source>(&sources)?, &load(&add_pool)?, &load(&remove_pool)?, &templates)?;
            save_jsonl(&entries, &out)?;
            println!("{} entries", entries.len());
        }
        BenchCommand::Score { manifest, scores, json } => {
            let entries: Vec<BenchEntry> = load(&manifest)?;
            let records: Vec<ScoreRecord> = load(&scores)?;
            let report = aggregate(&records, &entries)?;
            if json {
                println!("{}", report.to_json()?);
            } else {
                println!("{report}");
            }
        }
        BenchCommand::Agree { samples, json } => {
            let samples: Vec<PreferenceSample> = load(&samples)?;
            let rep = preference_agreement(&samples)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                for (task, a) in &rep.per_task {
                    println!("{:<28} {:>3}/{:<3} {:>6.1}%", task.label(), a.matches, a.samples, a.percent());
                }
                println!("{:<28} {:>14.1}%  ({} ties)", "overall", rep.overall_percent, rep.ties);
            }
        }
    }
    Ok(())
}
