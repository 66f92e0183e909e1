use std::path::PathBuf;

use anyhow::Result;
use rtedit_core::distill::toys::{dmd_mixture, self_forcing_ar, ArSetup, MixtureSetup};
use rtedit_core::flow::VelocityModel;
use rtedit_core::toy::{fit_gaussian, GaussianFitSetup};

#[derive(clap::Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Directory for the trained parameters.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Write the per-step losses, one per line.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct DmdArgs {
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, default_value_t = 3000)]
    teacher_steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training log as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct SfArgs {
    #[arg(long, default_value_t = 150)]
    steps: usize,
    #[arg(long, default_value_t = 1500)]
    pretrain_steps: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
}

pub fn train_toy(args: &TrainToyArgs) -> Result<()> {
    let setup = GaussianFitSetup {
        steps: args.steps,
        seed: args.seed,
        ..GaussianFitSetup::default()
    };
    let rep = fit_gaussian(&setup)?;
    let tail = &rep.losses[rep.losses.len().saturating_sub(100)..];
    println!("final loss (last 100 steps) {:.4}", tail.iter().sum::<f64>() / tail.len().max(1) as f64);
    println!("sample mean {:?}  error {:.4}", rep.mean, rep.mean_error(&setup.mean));
    println!("sample cov {:?}  error {:.4}", rep.cov.as_slice(), rep.cov_error(&setup.cov));
    if let Some(dir) = &args.save {
        std::fs::create_dir_all(dir)?;
        rep.model.params().save_dir(dir)?;
    }
    if let Some(path) = &args.losses {
        let text: String = rep.losses.iter().map(|l| format!("{l}\n")).collect();
        std::fs::write(path, text)?;
    }
    Ok(())
}

pub fn distill_dmd(args: &DmdArgs) -> Result<()> {
    let setup = MixtureSetup {
        distill_steps: args.steps,
        teacher_steps: args.teacher_steps,
        seed: args.seed,
        ..MixtureSetup::default()
    };
    let rep = dmd_mixture(&setup)?;
    println!("{:<12} {:>8} {:>8}", "", "mean", "E[x^2]");
    for (name, m) in [("data", &rep.data), ("teacher", &rep.teacher), ("undistilled", &rep.undistilled), ("student", &rep.student)] {
        println!("{name:<12} {:>8.4} {:>8.4}", m.mean, m.second);
    }
    println!("student vs teacher {:.2}%", 100.0 * rep.student.rel_err(&rep.teacher));
    println!("NFE teacher {} student {}  critic ratio {:?}", rep.teacher_nfe, rep.student_nfe, rep.critic_ratio);
    if let Some(path) = &args.log {
        rep.log.save(path)?;
    }
    Ok(())
}

pub fn distill_sf(args: &SfArgs) -> Result<()> {
    let setup = ArSetup {
        distill_steps: args.steps,
        pretrain_steps: args.pretrain_steps,
        seed: args.seed,
        ..ArSetup::default()
    };
    let rep = self_forcing_ar(&setup)?;
    println!("{:<6} {:>15} {:>15} {:>15}", "chunk", "teacher", "pretrained", "student");
    for k in 0..rep.teacher.mean.len() {
        let cell = |s: &rtedit_core::distill::toys::ChunkStats| format!("{:.3} ({:.3})", s.mean[k], s.std[k]);
        println!("{k:<6} {:>15} {:>15} {:>15}", cell(&rep.teacher), cell(&rep.pretrained), cell(&rep.student));
    }
    println!(
        "max relative error: pretrained {:.2}%, student {:.2}%",
        100.0 * rep.pretrained.rel_err(&rep.teacher),
        100.0 * rep.student.rel_err(&rep.teacher)
    );
    println!("NFE per chunk {:?}  critic ratio {:?}", rep.nfe_per_chunk, rep.critic_ratio);
    if let Some(path) = &args.log {
        rep.log.save(path)?;
    }
    Ok(())
}
