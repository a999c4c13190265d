//! The `run` command: pretrain, train and evaluate one config per seed.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;

use sbsampler::estimators::WeightedSample;
use sbsampler::losses::LossValue;
use sbsampler::ndiff::save_checkpoint;
use sbsampler::targets::make_target;
use sbsampler::trainer::{RunReport, Trainer};

use crate::config::ExperimentConfig;

/// Exclusive marker for one run directory, removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("cannot create {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
struct Timing {
    pretrain_seconds: f64,
    train_seconds: f64,
    eval_seconds: f64,
    total_seconds: f64,
}

/// Outcome of one seed.
pub enum SeedOutcome {
    Done(PathBuf),
    Failed(PathBuf, anyhow::Error),
}

pub fn run_all(cfg: &ExperimentConfig) -> Vec<SeedOutcome> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> SeedOutcome {
    let dir = cfg.run_dir(seed);
    match run_seed_in(cfg, seed, &dir) {
        Ok(()) => SeedOutcome::Done(dir),
        Err(e) => SeedOutcome::Failed(dir, e),
    }
}

fn run_seed_in(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let _lock = RunLock::acquire(dir)?;
    let train_cfg = cfg.train_config(seed);
    let (target, prior) = make_target(cfg.target);
    let mut trainer = Trainer::new(target, prior, train_cfg)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let start = Instant::now();
    let pretrain = trainer.pretrain();
    let pretrain_seconds = start.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let fit = pretrain.and_then(|_| trainer.fit());
    let train_seconds = t1.elapsed().as_secs_f64();
    if let Err(e) = fit {
        write_partial(&trainer, dir)?;
        return Err(e.into());
    }

    let t2 = Instant::now();
    let (report, samples) = trainer.report_with_samples()?;
    let eval_seconds = t2.elapsed().as_secs_f64();
    write_artifacts(&trainer, &report, &samples, dir)?;
    let timing = Timing {
        pretrain_seconds,
        train_seconds,
        eval_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    Ok(())
}

fn write_partial(trainer: &Trainer, dir: &Path) -> anyhow::Result<()> {
    save_checkpoint(trainer.phi(), &dir.join("phi.ckpt"))?;
    save_checkpoint(trainer.psi(), &dir.join("psi.ckpt"))?;
    fs::write(dir.join("history.csv"), history_csv(trainer.history()))?;
    Ok(())
}

fn write_artifacts(
    trainer: &Trainer,
    report: &RunReport,
    samples: &[WeightedSample],
    dir: &Path,
) -> anyhow::Result<()> {
    write_partial(trainer, dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    write_samples(samples, &dir.join("samples.csv"))?;
    for h in &report.metrics.histograms {
        let mut s = String::from("left,right,sampler_mass,weighted_mass,target_mass\n");
        for b in 0..h.sampler_mass.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                h.edges[b],
                h.edges[b + 1],
                h.sampler_mass[b],
                h.weighted_mass[b],
                h.target_mass[b]
            );
        }
        fs::write(dir.join(format!("histogram_{}.csv", h.coordinate)), s)?;
    }
    Ok(())
}

fn history_csv(history: &[LossValue]) -> String {
    let mut s = String::from("epoch,total,divergence,regularizer\n");
    for (e, v) in history.iter().enumerate() {
        let _ = writeln!(
            s,
            "{e},{},{},{}",
            v.total, v.divergence_part, v.regularizer_part
        );
    }
    s
}

/// Flat `key,value` summary read by `compare`.
pub fn metrics_csv(report: &RunReport) -> String {
    let m = &report.metrics;
    let w2 = m.entropic_w2.map_or_else(|| "nan".to_string(), |v| v.to_string());
    let mut s = String::from("key,value\n");
    let rows: [(&str, String); 13] = [
        ("target", report.target.clone()),
        ("loss", report.config.loss.kind.to_string()),
        ("lambda", report.config.loss.lambda.to_string()),
        ("seed", report.config.seed.to_string()),
        ("dim", m.weighted_mean.len().to_string()),
        ("epochs_run", report.epochs_run.to_string()),
        ("neg_log_z", m.neg_log_z.to_string()),
        ("elbo", m.elbo.to_string()),
        ("mean_abs_error", m.mean_abs_error.to_string()),
        ("std_rel_error", m.std_rel_error.to_string()),
        ("weight_ess", m.weight_ess.to_string()),
        ("weight_cv", m.weight_cv.to_string()),
        ("entropic_w2", w2),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

fn write_samples(samples: &[WeightedSample], path: &Path) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = samples.first().map_or(0, |s| s.point.len());
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    writeln!(w, "{},log_weight", header.join(","))?;
    for s in samples {
        for v in &s.point {
            write!(w, "{v},")?;
        }
        writeln!(w, "{}", s.log_weight)?;
    }
    w.flush()?;
    Ok(())
}
