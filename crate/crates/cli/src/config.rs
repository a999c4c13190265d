//! Experiment configuration files.
//!
//! A config names one target and one loss and lists the seeds to run; every
//! other section is optional and falls back to the library defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use sbsampler::losses::{Direction, LossConfig, RegularizerKind};
use sbsampler::ndiff::AdamConfig;
use sbsampler::paths::SdeConfig;
use sbsampler::targets::TargetName;
use sbsampler::trainer::{default_lambda, NetConfig, PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetName,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub loss: LossSection,
    #[serde(default)]
    pub sde: SdeSection,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: RegularizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub printed_backward_pinn: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeSection {
    pub sigma: f64,
    pub steps: usize,
    pub horizon: f64,
    pub n: usize,
}

impl Default for SdeSection {
    fn default() -> Self {
        let d = SdeConfig::default();
        Self {
            sigma: d.sigma,
            steps: d.steps,
            horizon: d.horizon,
            n: d.n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub updates_per_batch: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::new(RegularizerKind::SeparateControl);
        Self {
            epochs: d.epochs,
            updates_per_batch: d.updates_per_batch,
            patience: d.patience,
            min_delta: d.min_delta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n: usize,
    pub metric_points: usize,
    pub sinkhorn_epsilon: f64,
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = TrainConfig::new(RegularizerKind::SeparateControl);
        Self {
            n: d.eval_n,
            metric_points: d.metric_points,
            sinkhorn_epsilon: d.sinkhorn_epsilon,
            histogram_bins: d.histogram_bins,
        }
    }
}

/// Command-line overrides applied on top of a loaded file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub target: Option<TargetName>,
    pub loss: Option<RegularizerKind>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(t) = o.target {
            self.target = t;
        }
        if let Some(k) = o.loss {
            if k != self.loss.kind {
                self.loss.lambda = None;
            }
            self.loss.kind = k;
        }
        if let Some(l) = o.lambda {
            self.loss.lambda = Some(l);
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(p) = &o.out {
            self.out_dir = p.clone();
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let kind = self.loss.kind;
        TrainConfig {
            loss: LossConfig {
                kind,
                lambda: self.loss.lambda.unwrap_or_else(|| default_lambda(kind)),
                direction: self.loss.direction,
                printed_backward_pinn: self.loss.printed_backward_pinn,
            },
            sde: SdeConfig {
                sigma: self.sde.sigma,
                steps: self.sde.steps,
                horizon: self.sde.horizon,
                n: self.sde.n,
                seed,
            },
            epochs: self.train.epochs,
            updates_per_batch: self.train.updates_per_batch,
            optimizer: self.optimizer,
            net: self.net,
            pretrain: self.pretrain,
            patience: self.train.patience,
            min_delta: self.train.min_delta,
            eval_n: self.eval.n,
            metric_points: self.eval.metric_points,
            sinkhorn_epsilon: self.eval.sinkhorn_epsilon,
            histogram_bins: self.eval.histogram_bins,
            seed,
        }
    }

    /// Output directory of one seed.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir
            .join(format!("{}_{}_seed{seed}", self.target, self.loss.kind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
target = "gmm9"
[loss]
kind = "td"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.seeds, vec![0]);
        let t = c.train_config(4);
        assert_eq!(t.loss.lambda, default_lambda(RegularizerKind::Td));
        assert_eq!(t.sde.seed, 4);
        assert_eq!(t.epochs, TrainSection::default().epochs);
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.loss.lambda = Some(0.25);
        c.seeds = vec![1, 2, 3];
        c.sde.steps = 17;
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn overriding_the_loss_resets_lambda() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.loss.lambda = Some(9.0);
        c.apply(&Overrides {
            loss: Some(RegularizerKind::Pinn),
            seed: Some(7),
            ..Overrides::default()
        });
        assert_eq!(c.loss.lambda, None);
        assert_eq!(c.seeds, vec![7]);
    }
}
