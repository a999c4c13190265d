//! The `compare` command: loss-kind by target tables averaged over seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use sbsampler::losses::RegularizerKind;
use sbsampler::trainer::RunReport;

pub const METRICS: [&str; 5] = [
    "neg_log_z",
    "mean_abs_error",
    "std_rel_error",
    "weight_ess",
    "entropic_w2",
];

fn metric(report: &RunReport, name: &str) -> f64 {
    let m = &report.metrics;
    match name {
        "neg_log_z" => m.neg_log_z,
        "mean_abs_error" => m.mean_abs_error,
        "std_rel_error" => m.std_rel_error,
        "weight_ess" => m.weight_ess,
        "entropic_w2" => m.entropic_w2.unwrap_or(f64::NAN),
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Mean and seed count of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Debug)]
pub struct Comparison {
    pub losses: Vec<RegularizerKind>,
    pub targets: Vec<String>,
    /// `(metric, loss, target) -> cell`.
    pub cells: BTreeMap<(&'static str, RegularizerKind, String), Cell>,
    /// Set when the separately-controlled run estimates a larger `-log Z`
    /// than PINN on the double well.
    pub double_well_ordering_violated: bool,
}

pub fn load_report(path: &Path) -> anyhow::Result<RunReport> {
    let file: PathBuf = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let text =
        std::fs::read_to_string(&file).with_context(|| format!("cannot read {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid report {}", file.display()))
}

pub fn compare(reports: &[RunReport]) -> anyhow::Result<Comparison> {
    if reports.len() < 2 {
        bail!("compare needs at least two reports, got {}", reports.len());
    }
    let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reports {
        let d = r.metrics.weighted_mean.len();
        if let Some(&prev) = dims.get(r.target.as_str()) {
            if prev != d {
                bail!(
                    "target {} appears with dimensions {prev} and {d}",
                    r.target
                );
            }
        }
        dims.insert(&r.target, d);
    }
    let present: BTreeSet<RegularizerKind> = reports.iter().map(|r| r.config.loss.kind).collect();
    let losses_ordered: Vec<RegularizerKind> = RegularizerKind::ALL
        .into_iter()
        .filter(|k| present.contains(k))
        .collect();
    let targets: Vec<String> = dims.keys().map(|s| s.to_string()).collect();

    let mut cells = BTreeMap::new();
    for name in METRICS {
        for &k in &losses_ordered {
            for t in &targets {
                let vals: Vec<f64> = reports
                    .iter()
                    .filter(|r| r.config.loss.kind == k && &r.target == t)
                    .map(|r| metric(r, name))
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = if vals.len() > 1 {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                cells.insert(
                    (name, k, t.clone()),
                    Cell {
                        mean,
                        std,
                        seeds: vals.len(),
                    },
                );
            }
        }
    }
    let dw = "double_well".to_string();
    let sc = cells.get(&("neg_log_z", RegularizerKind::SeparateControl, dw.clone()));
    let pinn = cells.get(&("neg_log_z", RegularizerKind::Pinn, dw));
    let violated = matches!((sc, pinn), (Some(a), Some(b)) if a.mean > b.mean);
    Ok(Comparison {
        losses: losses_ordered,
        targets,
        cells,
        double_well_ordering_violated: violated,
    })
}

impl Comparison {
    pub fn cell(&self, metric: &'static str, loss: RegularizerKind, target: &str) -> Option<Cell> {
        self.cells.get(&(metric, loss, target.to_string())).copied()
    }

    /// Plain-text tables, one per metric, losses as rows and targets as columns.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for name in METRICS {
            let _ = writeln!(s, "{name}");
            let _ = write!(s, "{:<18}", "loss");
            for t in &self.targets {
                let _ = write!(s, "{t:>20}");
            }
            s.push('\n');
            for &k in &self.losses {
                let _ = write!(s, "{:<18}", k.as_str());
                for t in &self.targets {
                    let txt = match self.cell(name, k, t) {
                        Some(c) if c.seeds > 1 => format!("{:.4}±{:.4}", c.mean, c.std),
                        Some(c) => format!("{:.4}", c.mean),
                        None => "-".to_string(),
                    };
                    let _ = write!(s, "{txt:>20}");
                }
                s.push('\n');
            }
            s.push('\n');
        }
        if self.double_well_ordering_violated {
            s.push_str("FLAG: separate_control -log Z exceeds pinn on double_well\n");
        }
        s
    }

    /// Long-format CSV: `metric,loss,target,mean,std,seeds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,loss,target,mean,std,seeds\n");
        for ((name, k, t), c) in &self.cells {
            let _ = writeln!(s, "{name},{k},{t},{},{},{}", c.mean, c.std, c.seeds);
        }
        s
    }
}
