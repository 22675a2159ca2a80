//! Two-stage training loop: a pruning stage driven by the pressure
//! scheduler, then a stabilization stage with zero pressure and a decaying
//! presence learning rate. Also hosts the constant-pressure mode used for
//! convergence and pruning-law sweeps, and dense pretraining.
//!
//! Weights `ω` (and biases) are updated from `∇_ω L` only; presence
//! parameters from `∇_t L + γ/d`. Both update once per mini-batch, `γ`
//! once per epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::data::Dataset;
use crate::error::{AutodiffError, CheckpointError, NetError, TrainError};
use crate::mask::{record_flips, FlipLog, SteKind, Topology};
use crate::net::MaskedNet;
use crate::optim::{PresenceOptimizer, PresenceStepper, Sgd};
use crate::pressure::{
    pressure_loss, CurveSpec, PolicyConfig, Scheduler, DEFAULT_EXPONENT, DEFAULT_STEP,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightOptConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for WeightOptConfig {
    fn default() -> Self {
        Self {
            lr_start: 0.05,
            lr_end: 0.005,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresenceOptConfig {
    pub lr: f64,
    pub optimizer: PresenceOptimizer,
    pub ste: SteKind,
    /// Per-epoch multiplier applied to `η_t` during stabilization.
    pub stabilization_decay: f64,
    /// Clear the optimizer state when stabilization begins.
    pub reset_on_stabilization: bool,
}

impl Default for PresenceOptConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            optimizer: PresenceOptimizer::Adam,
            ste: SteKind::Identity,
            stabilization_decay: 0.9,
            reset_on_stabilization: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PressureMode {
    Scheduled {
        #[serde(default = "default_step")]
        step: f64,
        #[serde(default = "default_exponent")]
        exponent: f64,
        #[serde(default = "default_policy")]
        policy: PolicyConfig,
    },
    Constant {
        gamma: f64,
    },
}

fn default_step() -> f64 {
    DEFAULT_STEP
}

fn default_exponent() -> f64 {
    DEFAULT_EXPONENT
}

fn default_policy() -> PolicyConfig {
    PolicyConfig::Trajectory {
        curve: CurveSpec::Geometric { target_pct: 10.0 },
        invert: false,
    }
}

impl Default for PressureMode {
    fn default() -> Self {
        Self::Scheduled {
            step: DEFAULT_STEP,
            exponent: DEFAULT_EXPONENT,
            policy: default_policy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pruning_epochs: usize,
    pub stabilization_epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: WeightOptConfig,
    pub presence: PresenceOptConfig,
    pub pressure: PressureMode,
    /// Keep every step's flux vector for later replay (memory heavy).
    pub record_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pruning_epochs: 60,
            stabilization_epochs: 20,
            pretrain_epochs: 20,
            batch_size: 32,
            seed: 0,
            weights: WeightOptConfig::default(),
            presence: PresenceOptConfig::default(),
            pressure: PressureMode::default(),
            record_gradients: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.pruning_epochs == 0 {
            return bad("pruning_epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.weights.lr_start > 0.0 && self.weights.lr_end > 0.0) {
            return bad("weight learning rates must be > 0");
        }
        if self.presence.lr.is_nan() || self.presence.lr <= 0.0 {
            return bad("presence learning rate must be > 0");
        }
        if !(self.weights.momentum >= 0.0 && self.weights.momentum < 1.0) {
            return bad("momentum must be in [0, 1)");
        }
        if let PressureMode::Constant { gamma } = self.pressure {
            if gamma.is_nan() || gamma < 0.0 {
                return bad("constant gamma must be >= 0");
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.pruning_epochs + self.stabilization_epochs
    }

    /// `η_ω` in effect during `epoch` (1-based) of the main run.
    pub fn weight_lr(&self, epoch: usize) -> f64 {
        let w = &self.weights;
        match w.schedule {
            LrSchedule::Constant => w.lr_start,
            LrSchedule::Cosine => {
                let total = self.total_epochs().max(1);
                if total == 1 {
                    return w.lr_start;
                }
                let progress = (epoch.clamp(1, total) - 1) as f64 / (total - 1) as f64;
                w.lr_end
                    + 0.5
                        * (w.lr_start - w.lr_end)
                        * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// `η_t` in effect during `epoch`: constant while pruning, then
    /// multiplied by the decay once per stabilization epoch.
    pub fn presence_lr(&self, epoch: usize) -> f64 {
        let p = &self.presence;
        if epoch <= self.pruning_epochs {
            p.lr
        } else {
            p.lr * p
                .stabilization_decay
                .powi((epoch - self.pruning_epochs) as i32)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Pruning,
    Stabilization,
    Constant,
    Retrain,
}

/// Summary of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub density: f64,
    /// Mean task loss over the epoch's mini-batches.
    pub task_loss: f64,
    /// `(γ/d)·Σ t` at the end of the epoch.
    pub pressure_loss: f64,
    pub gamma: f64,
    pub flips: u64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub active_per_layer: Vec<usize>,
    pub eta_t: f64,
    pub eta_w: f64,
}

/// What one mini-batch update observed.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    /// `G = −∂L/∂t` per weight (flux when pruned), pressure excluded.
    pub flux: Vec<f64>,
    /// `∇_t J = ∂L/∂t + γ/d` per weight, the gradient handed to the optimizer.
    pub presence_grad: Vec<f64>,
    pub flips: u32,
}

/// One logged mini-batch step for flux replay.
#[derive(Debug, Clone)]
pub struct LoggedStep {
    /// Topology used by the forward pass of this step.
    pub topology: Topology,
    pub flux: Vec<f64>,
    pub pressure_grad: f64,
    pub eta_t: f64,
}

/// State of a training run. Owns the network and all optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: MaskedNet,
    config: TrainConfig,
    weight_opt: Vec<(Sgd, Sgd)>,
    presence_opt: Vec<PresenceStepper>,
    pub scheduler: Option<Scheduler>,
    /// Completed epochs of the main run (pretraining excluded).
    pub epoch: usize,
    pub flip_log: FlipLog,
    pub gradient_log: Vec<LoggedStep>,
}

impl Trainer {
    pub fn new(mut net: MaskedNet, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if net.num_weights() == 0 {
            return Err(NetError::NoWeights.into());
        }
        net.set_ste(config.presence.ste);
        let scheduler = match &config.pressure {
            PressureMode::Scheduled {
                step,
                exponent,
                policy,
            } => Some(Scheduler::new(
                policy.clone(),
                *step,
                *exponent,
                config.pruning_epochs,
            )?),
            PressureMode::Constant { .. } => None,
        };
        let weight_opt = fresh_weight_opt(&net, &config);
        let presence_opt = net
            .layers()
            .iter()
            .map(|l| PresenceStepper::new(config.presence.optimizer, l.presence.len()))
            .collect();
        let d = net.num_weights();
        Ok(Self {
            net,
            config,
            weight_opt,
            presence_opt,
            scheduler,
            epoch: 0,
            flip_log: FlipLog::new(d),
            gradient_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// `γ` for the next epoch of the main run.
    pub fn current_gamma(&self) -> f64 {
        if self.epoch >= self.config.pruning_epochs {
            return 0.0;
        }
        match (&self.config.pressure, &self.scheduler) {
            (PressureMode::Constant { gamma }, _) => *gamma,
            (_, Some(s)) => s.gamma(),
            _ => 0.0,
        }
    }

    /// One mini-batch update.
    pub fn step(
        &mut self,
        x: &Tensor,
        y: &[usize],
        gamma: f64,
        eta_t: f64,
        eta_w: f64,
    ) -> Result<StepReport, TrainError> {
        let d = self.net.num_weights();
        let pressure_grad = gamma / d as f64;
        let before = self.net.topology();
        let grads = self.net.compute_grads(x, y).map_err(|e| match e {
            NetError::Autodiff(AutodiffError::NonFinite { .. }) => TrainError::NonFiniteLoss {
                epoch: self.epoch + 1,
                step: self.flip_log.steps.len(),
            },
            other => other.into(),
        })?;
        if !grads.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: self.epoch + 1,
                step: self.flip_log.steps.len(),
            });
        }

        let mut flux = Vec::with_capacity(d);
        let mut presence_grad = Vec::with_capacity(d);
        for g in &grads.layers {
            for &v in g.presence.data() {
                flux.push(-v);
                presence_grad.push(v + pressure_grad);
            }
        }
        if self.config.record_gradients {
            self.gradient_log.push(LoggedStep {
                topology: before.clone(),
                flux: flux.clone(),
                pressure_grad,
                eta_t,
            });
        }

        let mut offset = 0;
        for (i, (layer, g)) in self
            .net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .enumerate()
        {
            let (wopt, bopt) = &mut self.weight_opt[i];
            wopt.step(layer.weight.data_mut(), g.weight.data(), eta_w);
            bopt.step(layer.bias.data_mut(), g.bias.data(), eta_w);
            let n = layer.presence.len();
            if eta_t > 0.0 {
                self.presence_opt[i].step(
                    layer.presence.data_mut(),
                    &presence_grad[offset..offset + n],
                    eta_t,
                );
            }
            offset += n;
        }

        let after = self.net.topology();
        let flips = record_flips(&before, &after, &mut self.flip_log)?;
        Ok(StepReport {
            loss: grads.loss,
            flux,
            presence_grad,
            flips: flips.total(),
        })
    }

    /// One shuffled pass over the training split.
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        gamma: f64,
        eta_t: f64,
        eta_w: f64,
        epoch: usize,
        phase: Phase,
    ) -> Result<EpochRecord, TrainError> {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, phase, epoch));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut flips = 0u64;
        for chunk in order.chunks(self.config.batch_size) {
            let (x, y) = data.train.gather(chunk);
            let report = self.step(&x, &y, gamma, eta_t, eta_w)?;
            loss_sum += report.loss;
            flips += u64::from(report.flips);
            batches += 1;
        }
        let presence = self.net.presence_flat();
        Ok(EpochRecord {
            epoch,
            phase,
            density: self.net.density(),
            task_loss: loss_sum / batches.max(1) as f64,
            pressure_loss: pressure_loss(&presence, gamma)?,
            gamma,
            flips,
            train_accuracy: self.net.accuracy(&data.train.inputs, &data.train.labels)?,
            val_accuracy: self
                .net
                .accuracy(&data.validation.inputs, &data.validation.labels)?,
            active_per_layer: self.net.active_per_layer(),
            eta_t,
            eta_w,
        })
    }

    /// Runs the remaining epochs of the two-stage schedule, handing each
    /// record to `sink` as soon as it completes.
    pub fn run_training(
        &mut self,
        data: &Dataset,
        mut sink: impl FnMut(&EpochRecord) -> Result<(), TrainError>,
    ) -> Result<Vec<EpochRecord>, TrainError> {
        let cfg = self.config.clone();
        let mut records = Vec::new();
        for e in (self.epoch + 1)..=cfg.total_epochs() {
            let pruning = e <= cfg.pruning_epochs;
            if e == cfg.pruning_epochs + 1 && cfg.presence.reset_on_stabilization {
                self.presence_opt
                    .iter_mut()
                    .for_each(PresenceStepper::reset);
            }
            let gamma = self.current_gamma();
            let phase = if pruning {
                Phase::Pruning
            } else {
                Phase::Stabilization
            };
            let rec =
                self.train_epoch(data, gamma, cfg.presence_lr(e), cfg.weight_lr(e), e, phase)?;
            if pruning && e < cfg.pruning_epochs {
                if let Some(s) = &mut self.scheduler {
                    s.observe(100.0 * rec.density, e)?;
                }
            }
            self.epoch = e;
            sink(&rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    /// Fixed `γ`, constant learning rates, no stabilization.
    pub fn run_constant_pressure(
        &mut self,
        data: &Dataset,
        gamma: f64,
        epochs: usize,
        mut sink: impl FnMut(&EpochRecord) -> Result<(), TrainError>,
    ) -> Result<Vec<EpochRecord>, TrainError> {
        if gamma.is_nan() || gamma < 0.0 {
            return Err(TrainError::Config(format!(
                "gamma must be >= 0, got {gamma}"
            )));
        }
        let (eta_t, eta_w) = (self.config.presence.lr, self.config.weights.lr_start);
        let mut records = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let e = self.epoch + 1;
            let rec = self.train_epoch(data, gamma, eta_t, eta_w, e, Phase::Constant)?;
            self.epoch = e;
            sink(&rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    /// Trains `ω` with presence frozen and no pressure.
    pub fn run_frozen(
        &mut self,
        data: &Dataset,
        epochs: usize,
        eta_w: f64,
        phase: Phase,
    ) -> Result<Vec<EpochRecord>, TrainError> {
        let mut records = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let e = self.epoch + 1;
            records.push(self.train_epoch(data, 0.0, 0.0, eta_w, e, phase)?);
            self.epoch = e;
        }
        Ok(records)
    }

    pub fn into_net(self) -> MaskedNet {
        self.net
    }

    /// Full run state: network, optimizer moments, scheduler and counters.
    pub fn to_archive(&self) -> Archive {
        let mut a = self.net.to_archive();
        a.insert_scalars("trainer.epoch", &[self.epoch as f64]);
        for (i, (w, b)) in self.weight_opt.iter().enumerate() {
            a.insert_scalars(format!("opt.w.{i}.velocity"), &w.velocity);
            a.insert_scalars(format!("opt.b.{i}.velocity"), &b.velocity);
        }
        for (i, p) in self.presence_opt.iter().enumerate() {
            match p {
                PresenceStepper::Adam(adam) => {
                    a.insert_scalars(format!("opt.t.{i}.m"), &adam.m);
                    a.insert_scalars(format!("opt.t.{i}.v"), &adam.v);
                    a.insert_scalars(format!("opt.t.{i}.steps"), &[adam.steps as f64]);
                }
                PresenceStepper::Sgd(sgd) => {
                    a.insert_scalars(format!("opt.t.{i}.velocity"), &sgd.velocity);
                }
            }
        }
        if let Some(s) = &self.scheduler {
            a.insert_scalars("sched.state", &s.state.to_array());
            a.insert_scalars("sched.history", &s.history);
        }
        let counts: Vec<f64> = self
            .flip_log
            .per_weight
            .iter()
            .map(|&c| f64::from(c))
            .collect();
        a.insert_scalars("flips.per_weight", &counts);
        a
    }

    /// Restores a run saved with [`Trainer::to_archive`].
    pub fn from_archive(archive: &Archive, config: TrainConfig) -> Result<Self, TrainError> {
        let net = MaskedNet::from_archive(archive)?;
        let mut t = Self::new(net, config)?;
        let malformed = |m: String| TrainError::Checkpoint(CheckpointError::Malformed(m));
        t.epoch = archive.require("trainer.epoch")?.data()[0] as usize;
        for (i, (w, b)) in t.weight_opt.iter_mut().enumerate() {
            w.velocity = archive
                .require(&format!("opt.w.{i}.velocity"))?
                .data()
                .to_vec();
            b.velocity = archive
                .require(&format!("opt.b.{i}.velocity"))?
                .data()
                .to_vec();
        }
        for (i, p) in t.presence_opt.iter_mut().enumerate() {
            match p {
                PresenceStepper::Adam(adam) => {
                    adam.m = archive.require(&format!("opt.t.{i}.m"))?.data().to_vec();
                    adam.v = archive.require(&format!("opt.t.{i}.v"))?.data().to_vec();
                    adam.steps = archive.require(&format!("opt.t.{i}.steps"))?.data()[0] as u64;
                }
                PresenceStepper::Sgd(sgd) => {
                    sgd.velocity = archive
                        .require(&format!("opt.t.{i}.velocity"))?
                        .data()
                        .to_vec();
                }
            }
        }
        if let Some(s) = &mut t.scheduler {
            let state: [f64; 6] = archive
                .require("sched.state")?
                .data()
                .try_into()
                .map_err(|_| malformed("sched.state must hold 6 values".into()))?;
            s.state = crate::pressure::PressureState::from_array(state);
            s.history = archive.require("sched.history")?.data().to_vec();
        }
        t.flip_log.per_weight = archive
            .require("flips.per_weight")?
            .data()
            .iter()
            .map(|&c| c as u32)
            .collect();
        Ok(t)
    }
}

fn fresh_weight_opt(net: &MaskedNet, config: &TrainConfig) -> Vec<(Sgd, Sgd)> {
    net.layers()
        .iter()
        .map(|l| {
            (
                Sgd::new(
                    l.weight.len(),
                    config.weights.momentum,
                    config.weights.weight_decay,
                ),
                Sgd::new(l.bias.len(), config.weights.momentum, 0.0),
            )
        })
        .collect()
}

/// Shuffling stream for one epoch; independent of run history so a resumed
/// run reshuffles identically.
pub fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 40) | epoch as u64);
    rng
}

/// Dense pretraining: presence frozen, no pressure, constant `η_ω`.
pub fn pretrain(
    net: MaskedNet,
    data: &Dataset,
    config: &TrainConfig,
    epochs: usize,
) -> Result<(MaskedNet, Vec<EpochRecord>), TrainError> {
    let mut trainer = Trainer::new(net, config.clone())?;
    let records = trainer.run_frozen(data, epochs, config.weights.lr_start, Phase::Pretrain)?;
    Ok((trainer.into_net(), records))
}

/// Full two-stage run from an (ideally pretrained) network.
pub fn run_training(
    net: MaskedNet,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(MaskedNet, Vec<EpochRecord>), TrainError> {
    let mut trainer = Trainer::new(net, config.clone())?;
    let records = trainer.run_training(data, |_| Ok(()))?;
    Ok((trainer.into_net(), records))
}

/// Constant-pressure run for `epochs` epochs.
pub fn run_constant_pressure(
    net: MaskedNet,
    data: &Dataset,
    gamma: f64,
    epochs: usize,
    config: &TrainConfig,
) -> Result<(MaskedNet, Vec<EpochRecord>), TrainError> {
    let mut trainer = Trainer::new(net, config.clone())?;
    let records = trainer.run_constant_pressure(data, gamma, epochs, |_| Ok(()))?;
    Ok((trainer.into_net(), records))
}

/// Density spread over the last `fraction` of `records`, in percentage
/// points, plus the mean density over that window.
pub fn tail_density_stats(records: &[EpochRecord], fraction: f64) -> (f64, f64) {
    let n = records.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let window = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let tail = &records[n - window..];
    let (lo, hi, sum) = tail
        .iter()
        .fold((f64::MAX, f64::MIN, 0.0), |(lo, hi, s), r| {
            (lo.min(r.density), hi.max(r.density), s + r.density)
        });
    (100.0 * (hi - lo), sum / window as f64)
}

/// A maximal run of steps during which one weight kept the same state.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub weight: usize,
    pub start: usize,
    pub len: usize,
    pub pruned: bool,
    /// Whether the interval ended with a flip (as opposed to running off the
    /// end of the log).
    pub flipped: bool,
    /// Mean of `G` over the interval.
    pub mean_flux: f64,
    /// Mean of `γ/d` over the interval.
    pub mean_pressure: f64,
    /// `Σ η_t·(G − γ/d)`: the net change of `t` under plain gradient descent.
    pub weighted_drive: f64,
    /// Whether `η_t` was the same at every step of the interval.
    pub constant_lr: bool,
}

/// Splits a gradient log into per-weight state intervals.
pub fn replay_intervals(log: &[LoggedStep], final_topology: &Topology) -> Vec<Interval> {
    let Some(first) = log.first() else {
        return Vec::new();
    };
    let d = first.topology.len();
    let mut out = Vec::new();
    for w in 0..d {
        let mut start = 0;
        while start < log.len() {
            let state = log[start].topology.bits()[w];
            let mut end = start;
            while end + 1 < log.len() && log[end + 1].topology.bits()[w] == state {
                end += 1;
            }
            let next_state = if end + 1 < log.len() {
                log[end + 1].topology.bits()[w]
            } else {
                final_topology.bits()[w]
            };
            let steps = &log[start..=end];
            let len = steps.len();
            let mean_flux = steps.iter().map(|s| s.flux[w]).sum::<f64>() / len as f64;
            let mean_pressure = steps.iter().map(|s| s.pressure_grad).sum::<f64>() / len as f64;
            let weighted_drive = steps
                .iter()
                .map(|s| s.eta_t * (s.flux[w] - s.pressure_grad))
                .sum();
            let constant_lr = steps.iter().all(|s| s.eta_t == steps[0].eta_t);
            out.push(Interval {
                weight: w,
                start,
                len,
                pruned: !state,
                flipped: next_state != state,
                mean_flux,
                mean_pressure,
                weighted_drive,
                constant_lr,
            });
            start = end + 1;
        }
    }
    out
}
