//! Training loop, warm start and evaluation.
//!
//! Each epoch simulates a fresh controlled batch with the current `phi`
//! (plus an uncontrolled reference batch for the variance and TD losses),
//! then takes `updates_per_batch` joint Adam steps on `(phi, psi)` against
//! that fixed batch. Training stops after `epochs` epochs or once the epoch
//! loss has not improved by a relative `min_delta` for `patience` epochs.
//!
//! Evaluation reports two sample sets:
//!
//! * raw sampler output, the terminal states of the controlled SDE, which
//!   also feed the `log Z` estimate;
//! * probability-flow samples with Laplacian importance weights, used for
//!   the weighted mean and standard deviation.

use serde::{Deserialize, Serialize};

use crate::estimators::{
    importance_weights, log_z_estimate, normalized_weights, weight_cv, weighted_mean_std,
    WeightedSample,
};
use crate::losses::{record_loss, LossConfig, LossInputs, LossValue, RegularizerKind};
use crate::ndiff::{Activation, AdamConfig, AdamState, ControlField, Field, Graph, NetShape, Need};
use crate::otmetrics::{sinkhorn_cost, SinkhornConfig};
use crate::paths::{simulate_controlled, simulate_probability_flow, simulate_reference, SdeConfig};
use crate::rng::{NoiseStream, Purpose};
use crate::stats::{mean, weighted_moments};
use crate::targets::{ground_truth, GroundTruth, PriorSpec, TargetSpec};
use crate::{Error, Result};

/// Frozen regularization weight per loss kind.
pub fn default_lambda(kind: RegularizerKind) -> f64 {
    match kind {
        RegularizerKind::Pinn => 1.0,
        RegularizerKind::Variance => 1.0,
        RegularizerKind::Td => 1.0,
        RegularizerKind::SeparateControl => 1.0,
        RegularizerKind::KlEnergy => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 3,
            activation: Activation::Softplus,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Stop once the batch mean-squared residual falls below this.
    pub tolerance: f64,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 256,
            tolerance: 0.01,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub sde: SdeConfig,
    pub epochs: usize,
    pub updates_per_batch: usize,
    pub optimizer: AdamConfig,
    pub net: NetConfig,
    pub pretrain: PretrainConfig,
    pub patience: usize,
    /// Relative improvement that resets the patience counter.
    pub min_delta: f64,
    pub eval_n: usize,
    /// Points per side in the entropic transport metric.
    pub metric_points: usize,
    pub sinkhorn_epsilon: f64,
    pub histogram_bins: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(kind: RegularizerKind) -> Self {
        Self {
            loss: LossConfig::new(kind, default_lambda(kind)),
            sde: SdeConfig::default(),
            epochs: 300,
            updates_per_batch: 8,
            optimizer: AdamConfig::default(),
            net: NetConfig::default(),
            pretrain: PretrainConfig::default(),
            patience: 30,
            min_delta: 1e-3,
            eval_n: 4096,
            metric_points: 512,
            sinkhorn_epsilon: 0.5,
            histogram_bins: 40,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sde.validate()?;
        self.optimizer.validate()?;
        let positive = [
            ("updates_per_batch", self.updates_per_batch),
            ("patience", self.patience),
            ("eval_n", self.eval_n),
            ("net.hidden", self.net.hidden),
            ("histogram_bins", self.histogram_bins),
            ("pretrain.batch", self.pretrain.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.sde.n < 2 {
            return Err(Error::Config("sde.n must be at least 2".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        if !(self.sinkhorn_epsilon > 0.0) {
            return Err(Error::Config("sinkhorn_epsilon must be positive".into()));
        }
        if !(self.pretrain.learning_rate > 0.0 && self.pretrain.tolerance >= 0.0) {
            return Err(Error::Config("invalid pretrain settings".into()));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            sde: SdeConfig {
                n: self.eval_n,
                ..self.sde
            },
            metric_points: self.metric_points,
            sinkhorn_epsilon: self.sinkhorn_epsilon,
            histogram_bins: self.histogram_bins,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub sde: SdeConfig,
    pub metric_points: usize,
    pub sinkhorn_epsilon: f64,
    pub histogram_bins: usize,
}

/// Per-coordinate bin masses over `mean +- 4 sd` of the target; samples
/// outside the range are counted in the end bins, so each mass vector sums
/// to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub coordinate: usize,
    pub edges: Vec<f64>,
    /// Raw sampler output.
    pub sampler_mass: Vec<f64>,
    /// Weighted probability-flow samples.
    pub weighted_mass: Vec<f64>,
    /// Exact target draws.
    pub target_mass: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub neg_log_z: f64,
    /// Mean per-sample log term, a lower bound on `log Z` in expectation.
    pub elbo: f64,
    pub log_z_ess: f64,
    pub weighted_mean: Vec<f64>,
    pub weighted_std: Vec<f64>,
    /// Euclidean norm of the weighted mean error.
    pub mean_abs_error: f64,
    /// Mean over coordinates of `|sd_hat - sd| / sd`.
    pub std_rel_error: f64,
    pub weight_ess: f64,
    pub weight_cv: f64,
    pub sampler_mean: Vec<f64>,
    pub sampler_std: Vec<f64>,
    pub sampler_mean_abs_error: f64,
    pub sampler_std_rel_error: f64,
    /// Entropic transport cost between weighted samples and exact draws.
    pub entropic_w2: Option<f64>,
    pub histograms: Vec<Histogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub target: String,
    pub config: TrainConfig,
    pub loss_history: Vec<LossValue>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub pretrain_residual: Option<f64>,
    pub metrics: EvalMetrics,
}

fn mean_sq_residual(phi: &ControlField, target: &TargetSpec, pts: &[f64]) -> Result<f64> {
    let d = target.dim;
    let mut acc = Vec::with_capacity(pts.len() / d);
    for x in pts.chunks_exact(d) {
        let r = phi.eval(x, 0.0)? - target.log_mu(x);
        acc.push(r * r);
    }
    Ok(mean(&acc))
}

/// Regresses `phi(., 0)` onto `log mu` over prior draws. Returns the
/// mean-squared residual on a fresh batch.
pub fn pretrain_phi(
    phi: &mut ControlField,
    target: &TargetSpec,
    prior: &PriorSpec,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<f64> {
    let d = target.dim;
    let fresh = prior.sample(cfg.batch, &NoiseStream::new(seed, Purpose::Pretrain, u64::MAX));
    if cfg.steps == 0 {
        return mean_sq_residual(phi, target, &fresh);
    }
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(phi.num_params(), adam_cfg);
    {
        let first = prior.sample(cfg.batch, &NoiseStream::new(seed, Purpose::Pretrain, 0));
        let lm: Vec<f64> = first.chunks_exact(d).map(|x| target.log_mu(x)).collect();
        *phi.output_bias_mut() += mean(&lm);
    }
    for step in 0..cfg.steps {
        let pts = prior.sample(cfg.batch, &NoiseStream::new(seed, Purpose::Pretrain, step as u64));
        let ts = vec![0.0; cfg.batch];
        let grad = {
            let mut g = Graph::new();
            let leaves = g.query(&*phi, &pts, &ts, &Need::value())?;
            let res: Vec<_> = pts
                .chunks_exact(d)
                .enumerate()
                .map(|(i, x)| {
                    let r = g.add_const(leaves.value(i), -target.log_mu(x));
                    g.square(r)
                })
                .collect();
            let loss = g.mean(&res);
            let value = g.checked_value(loss)?;
            if value <= cfg.tolerance {
                break;
            }
            g.param_grad(loss, &*phi)?
        };
        adam.step(phi.params_mut(), &grad)?;
    }
    mean_sq_residual(phi, target, &fresh)
}

pub struct Trainer {
    target: TargetSpec,
    prior: PriorSpec,
    cfg: TrainConfig,
    phi: ControlField,
    psi: ControlField,
    adam_phi: AdamState,
    adam_psi: AdamState,
    history: Vec<LossValue>,
    pretrain_residual: Option<f64>,
    best: f64,
    wait: usize,
    stopped_early: bool,
}

impl Trainer {
    pub fn new(target: TargetSpec, prior: PriorSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if prior.dim != target.dim {
            return Err(Error::Shape("prior and target dimensions differ".into()));
        }
        let shape = NetShape::new(target.dim, cfg.net.hidden, cfg.net.depth);
        let phi = ControlField::new(shape, cfg.net.activation, cfg.seed.wrapping_mul(2));
        let psi = ControlField::new(shape, cfg.net.activation, cfg.seed.wrapping_mul(2) + 1);
        Ok(Self::with_fields(target, prior, cfg, phi, psi))
    }

    /// Starts from given fields (e.g. loaded checkpoints).
    pub fn with_fields(
        target: TargetSpec,
        prior: PriorSpec,
        cfg: TrainConfig,
        phi: ControlField,
        psi: ControlField,
    ) -> Self {
        let adam_phi = AdamState::new(phi.num_params(), cfg.optimizer);
        let adam_psi = AdamState::new(psi.num_params(), cfg.optimizer);
        Self {
            target,
            prior,
            cfg,
            phi,
            psi,
            adam_phi,
            adam_psi,
            history: Vec::new(),
            pretrain_residual: None,
            best: f64::INFINITY,
            wait: 0,
            stopped_early: false,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn phi(&self) -> &ControlField {
        &self.phi
    }

    pub fn psi(&self) -> &ControlField {
        &self.psi
    }

    pub fn into_fields(self) -> (ControlField, ControlField) {
        (self.phi, self.psi)
    }

    pub fn history(&self) -> &[LossValue] {
        &self.history
    }

    pub fn stopped_early(&self) -> bool {
        self.stopped_early
    }

    pub fn pretrain(&mut self) -> Result<f64> {
        let r = pretrain_phi(
            &mut self.phi,
            &self.target,
            &self.prior,
            &self.cfg.pretrain,
            self.cfg.seed,
        )?;
        self.pretrain_residual = Some(r);
        Ok(r)
    }

    /// Runs one epoch and returns the loss of its batch before the updates.
    pub fn step_epoch(&mut self) -> Result<LossValue> {
        let epoch = self.history.len();
        let wrap = |e: Error| Error::Training {
            epoch,
            source: Box::new(e),
        };
        let sde = SdeConfig {
            seed: self.cfg.seed,
            ..self.cfg.sde
        };
        let stream = NoiseStream::new(self.cfg.seed, Purpose::Controlled, epoch as u64);
        let traj = simulate_controlled(&self.phi, &self.prior, &sde, &stream).map_err(wrap)?;
        let reference = if self.cfg.loss.kind.needs_reference() {
            let rs = NoiseStream::new(self.cfg.seed, Purpose::Reference, epoch as u64);
            Some(simulate_reference(&self.prior, &sde, &rs).map_err(wrap)?)
        } else {
            None
        };
        let mut first = None;
        for _ in 0..self.cfg.updates_per_batch {
            let (value, grads) = {
                let inputs = LossInputs {
                    controlled: &traj,
                    reference: reference.as_ref(),
                    nu: &self.prior,
                    mu: &self.target,
                };
                let mut g = Graph::new();
                let vars = record_loss(&mut g, &self.cfg.loss, &inputs, &self.phi, &self.psi)
                    .map_err(wrap)?;
                let value = vars.value(&g).map_err(wrap)?;
                let grads = g
                    .param_grads(vars.total, &[&self.phi, &self.psi])
                    .map_err(wrap)?;
                (value, grads)
            };
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(wrap(Error::NonFinite {
                    what: "parameter gradient".into(),
                }));
            }
            self.adam_phi.step(self.phi.params_mut(), &grads[0]).map_err(wrap)?;
            self.adam_psi.step(self.psi.params_mut(), &grads[1]).map_err(wrap)?;
            first.get_or_insert(value);
        }
        let value = first.expect("updates_per_batch is positive");
        let scale = self.best.abs().max(f64::MIN_POSITIVE);
        if value.total < self.best - self.cfg.min_delta * scale || !self.best.is_finite() {
            self.best = value.total;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.history.push(value.clone());
        Ok(value)
    }

    /// Trains until the epoch budget or the stopping rule is exhausted.
    pub fn fit(&mut self) -> Result<()> {
        while self.history.len() < self.cfg.epochs {
            self.step_epoch()?;
            if self.wait >= self.cfg.patience {
                self.stopped_early = true;
                break;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<RunReport> {
        Ok(self.report_with_samples()?.0)
    }

    pub fn report_with_samples(&self) -> Result<(RunReport, Vec<WeightedSample>)> {
        let (metrics, samples) = evaluate_with_samples(
            &self.phi,
            &self.psi,
            &self.target,
            &self.prior,
            &self.cfg.eval_config(),
        )?;
        let report = RunReport {
            target: self.target.name.to_string(),
            config: self.cfg,
            loss_history: self.history.clone(),
            epochs_run: self.history.len(),
            stopped_early: self.stopped_early,
            pretrain_residual: self.pretrain_residual,
            metrics,
        };
        Ok((report, samples))
    }
}

/// Pretrains, fits and evaluates.
pub fn train(
    target: &TargetSpec,
    prior: &PriorSpec,
    cfg: &TrainConfig,
) -> Result<(ControlField, ControlField, RunReport)> {
    let mut t = Trainer::new(*target, prior.clone(), *cfg)?;
    t.pretrain()?;
    t.fit()?;
    let report = t.report()?;
    let (phi, psi) = t.into_fields();
    Ok((phi, psi, report))
}

fn errors(m: &[f64], s: &[f64], truth: &GroundTruth) -> (f64, f64) {
    let me = m
        .iter()
        .zip(&truth.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let se = s
        .iter()
        .zip(&truth.stddev)
        .map(|(a, b)| (a - b).abs() / b)
        .sum::<f64>()
        / s.len() as f64;
    (me, se)
}

fn histogram(values: &[f64], weights: &[f64], edges: &[f64]) -> Vec<f64> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let width = (hi - lo) / bins as f64;
    let mut out = vec![0.0; bins];
    let total: f64 = weights.iter().sum();
    for (v, w) in values.iter().zip(weights) {
        let b = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
        out[b] += w / total;
    }
    out
}

/// Metrics of a pair of fields, a pure function of the fields and `cfg`.
pub fn evaluate(
    phi: &dyn Field,
    psi: &dyn Field,
    target: &TargetSpec,
    prior: &PriorSpec,
    cfg: &EvalConfig,
) -> Result<EvalMetrics> {
    Ok(evaluate_with_samples(phi, psi, target, prior, cfg)?.0)
}

/// [`evaluate`] plus the weighted probability-flow samples.
pub fn evaluate_with_samples(
    phi: &dyn Field,
    psi: &dyn Field,
    target: &TargetSpec,
    prior: &PriorSpec,
    cfg: &EvalConfig,
) -> Result<(EvalMetrics, Vec<WeightedSample>)> {
    let d = target.dim;
    let truth = ground_truth(target.name);
    let seed = cfg.sde.seed;
    let sde_stream = NoiseStream::new(seed, Purpose::Evaluation, 0);
    let traj = simulate_controlled(phi, prior, &cfg.sde, &sde_stream)?;
    let z = log_z_estimate(&traj, psi, prior, target)?;
    let raw = traj.final_states();
    let ones = vec![1.0; traj.n];
    let (sampler_mean, sampler_std) = weighted_moments(&raw, d, &ones);
    let (sampler_mean_abs_error, sampler_std_rel_error) = errors(&sampler_mean, &sampler_std, &truth);

    let flow_stream = NoiseStream::new(seed, Purpose::Evaluation, 1);
    let flow = simulate_probability_flow(phi, psi, prior, &cfg.sde, &flow_stream)?;
    let samples = importance_weights(&flow, phi, psi, prior, target)?;
    let (weighted_mean, weighted_std) = weighted_mean_std(&samples)?;
    let (mean_abs_error, std_rel_error) = errors(&weighted_mean, &weighted_std, &truth);
    let w = normalized_weights(&samples)?;
    let weight_ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();

    let exact = target.sample(
        cfg.metric_points.max(1),
        &NoiseStream::new(seed, Purpose::Evaluation, 2),
    );
    let entropic_w2 = transport_metric(&samples, &w, &exact, d, cfg);

    let flow_pts: Vec<f64> = samples.iter().flat_map(|s| s.point.iter().copied()).collect();
    let histograms = (0..d)
        .map(|j| {
            let (lo, hi) = (
                truth.mean[j] - 4.0 * truth.stddev[j],
                truth.mean[j] + 4.0 * truth.stddev[j],
            );
            let bins = cfg.histogram_bins;
            let edges: Vec<f64> = (0..=bins)
                .map(|b| lo + (hi - lo) * b as f64 / bins as f64)
                .collect();
            let col = |pts: &[f64]| pts.iter().skip(j).step_by(d).copied().collect::<Vec<_>>();
            let ex = col(&exact);
            Histogram {
                coordinate: j,
                sampler_mass: histogram(&col(&raw), &ones, &edges),
                weighted_mass: histogram(&col(&flow_pts), &w, &edges),
                target_mass: histogram(&ex, &vec![1.0; ex.len()], &edges),
                edges,
            }
        })
        .collect();

    let weight_cv = weight_cv(&samples)?;
    let metrics = EvalMetrics {
        neg_log_z: z.neg_log_z(),
        elbo: z.mean_log_term(),
        log_z_ess: z.ess,
        weighted_mean,
        weighted_std,
        mean_abs_error,
        std_rel_error,
        weight_ess,
        weight_cv,
        sampler_mean,
        sampler_std,
        sampler_mean_abs_error,
        sampler_std_rel_error,
        entropic_w2,
        histograms,
    };
    Ok((metrics, samples))
}

/// Sinkhorn cost on the first `metric_points` samples with non-zero weight;
/// `None` if the solver does not converge.
fn transport_metric(
    samples: &[WeightedSample],
    w: &[f64],
    exact: &[f64],
    d: usize,
    cfg: &EvalConfig,
) -> Option<f64> {
    if cfg.metric_points == 0 {
        return None;
    }
    let mut xs = Vec::new();
    let mut wa = Vec::new();
    for (s, &wi) in samples.iter().zip(w) {
        if wa.len() == cfg.metric_points {
            break;
        }
        if wi > 0.0 {
            xs.extend_from_slice(&s.point);
            wa.push(wi);
        }
    }
    let wb = vec![1.0; exact.len() / d];
    let sk = SinkhornConfig {
        epsilon: cfg.sinkhorn_epsilon,
        tol: 1e-6,
        max_iter: 5000,
    };
    sinkhorn_cost(&xs, &wa, exact, &wb, d, &sk).ok().map(|s| s.cost)
}
