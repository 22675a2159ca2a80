//! Saliency baselines (magnitude and first-order Taylor) with iterative
//! pruning, and the saliency/density series consumed by [`crate::powerlaw`].

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ExportError, SaliencyError};
use crate::net::MaskedNet;
use crate::trainer::{tail_density_stats, EpochRecord, Phase, TrainConfig, Trainer};

/// Presence value assigned to weights removed by iterative pruning.
pub const PRUNED_PRESENCE: f64 = -1.0;

/// Saliency of one active weight, addressed by its flat index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub index: usize,
    pub score: f64,
}

/// `|ω|` for every active weight.
pub fn magnitude_saliency(net: &MaskedNet) -> Vec<Scored> {
    let mut out = Vec::new();
    let mut index = 0;
    for layer in net.layers() {
        for (&w, &t) in layer.weight.data().iter().zip(layer.presence.data()) {
            if t > 0.0 {
                out.push(Scored {
                    index,
                    score: w.abs(),
                });
            }
            index += 1;
        }
    }
    out
}

/// `|ω·∂L/∂ω|` for every active weight, where `L` is the mean loss of the
/// batch.
pub fn taylor_saliency(
    net: &MaskedNet,
    x: &crate::Tensor,
    y: &[usize],
) -> Result<Vec<Scored>, SaliencyError> {
    let grads = net.forward(x, y)?.backward()?;
    let mut out = Vec::new();
    let mut index = 0;
    for (layer, g) in net.layers().iter().zip(&grads.layers) {
        let w = layer.weight.data();
        let t = layer.presence.data();
        let gw = g.weight.data();
        for i in 0..w.len() {
            if t[i] > 0.0 {
                out.push(Scored {
                    index,
                    score: (w[i] * gw[i]).abs(),
                });
            }
            index += 1;
        }
    }
    Ok(out)
}

/// Taylor saliency averaged over consecutive mini-batches of the training
/// split (fixed order).
pub fn taylor_saliency_dataset(
    net: &MaskedNet,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<Scored>, SaliencyError> {
    let order: Vec<usize> = (0..data.train.len()).collect();
    let mut acc: Option<Vec<Scored>> = None;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = data.train.gather(chunk);
        let scores = taylor_saliency(net, &x, &y)?;
        match &mut acc {
            None => acc = Some(scores),
            Some(a) => a
                .iter_mut()
                .zip(&scores)
                .for_each(|(s, n)| s.score += n.score),
        }
        batches += 1;
    }
    let mut scores = acc.unwrap_or_default();
    scores
        .iter_mut()
        .for_each(|s| s.score /= batches.max(1) as f64);
    Ok(scores)
}

/// Prunes `ceil(q·n_active)` lowest-saliency weights for good. Ties break by
/// flat index, i.e. by (layer, position). Returns the count and the largest
/// pruned score.
pub fn imp_step(
    net: &mut MaskedNet,
    fraction: f64,
    scores: &[Scored],
) -> Result<(usize, f64), SaliencyError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SaliencyError::InvalidFraction(fraction));
    }
    if scores.is_empty() {
        return Err(SaliencyError::NoActiveWeights);
    }
    let count = prune_count(scores.len(), fraction);
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.index.cmp(&b.index))
    });
    let mut threshold = 0.0f64;
    for s in &ranked[..count] {
        let (layer, idx) = net.locate(s.index).ok_or(SaliencyError::NoActiveWeights)?;
        net.layers_mut()[layer].presence.data_mut()[idx] = PRUNED_PRESENCE;
        threshold = threshold.max(s.score);
    }
    Ok((count, threshold))
}

/// Number of weights one iterative step removes from `active`.
pub fn prune_count(active: usize, fraction: f64) -> usize {
    ((fraction * active as f64).ceil() as usize).clamp(1, active)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Magnitude,
    Taylor,
    Hyperflux,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Magnitude => "magnitude",
            Self::Taylor => "taylor",
            Self::Hyperflux => "hyperflux",
        })
    }
}

/// Iterative pruning protocol: prune a fraction of the remaining weights,
/// retrain at a constant rate, repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterativeConfig {
    pub fraction: f64,
    pub steps: usize,
    pub retrain_epochs: usize,
    pub lr: f64,
    /// Stop early once density falls below this fraction.
    pub min_density: f64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            steps: 45,
            retrain_epochs: 10,
            lr: 0.05,
            min_density: 0.005,
        }
    }
}

/// One prune-and-retrain step of an iterative trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub pruned: usize,
    pub active: usize,
    pub threshold: f64,
    pub density: f64,
    /// Validation accuracy after retraining.
    pub accuracy: f64,
    /// Cumulative retraining epochs.
    pub epoch: usize,
}

/// Runs the iterative protocol with magnitude or Taylor saliency.
pub fn iterative_prune(
    net: MaskedNet,
    data: &Dataset,
    method: Method,
    cfg: &IterativeConfig,
    train: &TrainConfig,
) -> Result<(MaskedNet, Vec<TraceStep>), SaliencyError> {
    if method == Method::Hyperflux {
        return Err(SaliencyError::Train(crate::TrainError::Config(
            "hyperflux series come from constant-pressure runs".into(),
        )));
    }
    let mut trainer = Trainer::new(net, train.clone())?;
    let mut trace = Vec::new();
    for step in 1..=cfg.steps {
        if trainer.net.density() < cfg.min_density || trainer.net.active_weights() <= 1 {
            break;
        }
        let scores = match method {
            Method::Magnitude => magnitude_saliency(&trainer.net),
            _ => taylor_saliency_dataset(&trainer.net, data, train.batch_size)?,
        };
        let (pruned, threshold) = imp_step(&mut trainer.net, cfg.fraction, &scores)?;
        let records = trainer.run_frozen(data, cfg.retrain_epochs, cfg.lr, Phase::Retrain)?;
        let accuracy = match records.last() {
            Some(r) => r.val_accuracy,
            None => trainer
                .net
                .accuracy(&data.validation.inputs, &data.validation.labels)?,
        };
        trace.push(TraceStep {
            step,
            pruned,
            active: trainer.net.active_weights(),
            threshold,
            density: trainer.net.density(),
            accuracy,
            epoch: trainer.epoch,
        });
    }
    Ok((trainer.into_net(), trace))
}

/// One (saliency threshold, density) observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub threshold: f64,
    pub density: f64,
    pub accuracy: f64,
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    method: Method,
    threshold: f64,
    density: f64,
    accuracy: f64,
    epoch: usize,
}

/// Saliency/density series for one method. Points flagged as unconverged
/// are kept aside and never fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencySeries {
    pub method: Method,
    pub points: Vec<SeriesPoint>,
    pub flagged: Vec<SeriesPoint>,
}

impl SaliencySeries {
    pub fn new(method: Method, points: Vec<SeriesPoint>) -> Self {
        Self {
            method,
            points,
            flagged: Vec::new(),
        }
    }

    pub fn densities_strictly_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].density < w[0].density)
    }

    pub fn thresholds_non_negative(&self) -> bool {
        self.points.iter().all(|p| p.threshold >= 0.0)
    }

    /// `(threshold, density)` pairs for fitting.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|p| (p.threshold, p.density))
            .collect()
    }

    /// Writes `method,threshold,density,accuracy,epoch`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ExportError> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        w.write_record(["method", "threshold", "density", "accuracy", "epoch"])?;
        for p in &self.points {
            w.serialize(SeriesRow {
                method: self.method,
                threshold: p.threshold,
                density: p.density,
                accuracy: p.accuracy,
                epoch: p.epoch,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, ExportError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut method = None;
        let mut points = Vec::new();
        for row in r.deserialize() {
            let row: SeriesRow = row?;
            match method {
                None => method = Some(row.method),
                Some(m) if m != row.method => {
                    return Err(ExportError::BadRecord(format!(
                        "mixed methods in one series: {m} and {}",
                        row.method
                    )))
                }
                _ => {}
            }
            if row.threshold.is_nan() || row.threshold < 0.0 {
                return Err(ExportError::BadRecord(format!(
                    "negative threshold {}",
                    row.threshold
                )));
            }
            points.push(SeriesPoint {
                threshold: row.threshold,
                density: row.density,
                accuracy: row.accuracy,
                epoch: row.epoch,
            });
        }
        let method = method.ok_or_else(|| ExportError::BadRecord("series has no rows".into()))?;
        Ok(Self::new(method, points))
    }
}

/// Series from an iterative trace: (threshold, density after the step).
pub fn trace_to_series(method: Method, trace: &[TraceStep]) -> SaliencySeries {
    SaliencySeries::new(
        method,
        trace
            .iter()
            .map(|s| SeriesPoint {
                threshold: s.threshold,
                density: s.density,
                accuracy: s.accuracy,
                epoch: s.epoch,
            })
            .collect(),
    )
}

/// Convergence test for constant-pressure runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceCriterion {
    /// Trailing fraction of epochs inspected.
    pub window: f64,
    /// Largest tolerated density range over the window, in percentage points.
    pub max_spread: f64,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        Self {
            window: 0.2,
            max_spread: 2.0,
        }
    }
}

impl ConvergenceCriterion {
    pub fn converged(&self, records: &[EpochRecord]) -> bool {
        !records.is_empty() && tail_density_stats(records, self.window).0 < self.max_spread
    }
}

/// Series from constant-pressure runs, one per `γ`, sorted by `γ`. Each
/// point uses the final epoch's density; unconverged runs are flagged.
pub fn sweep_to_series(
    runs: &[(f64, Vec<EpochRecord>)],
    criterion: &ConvergenceCriterion,
) -> SaliencySeries {
    let mut sorted: Vec<&(f64, Vec<EpochRecord>)> =
        runs.iter().filter(|(_, r)| !r.is_empty()).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut series = SaliencySeries::new(Method::Hyperflux, Vec::new());
    for (gamma, records) in sorted {
        let last = records.last().expect("filtered non-empty");
        let point = SeriesPoint {
            threshold: *gamma,
            density: last.density,
            accuracy: last.val_accuracy,
            epoch: last.epoch,
        };
        if criterion.converged(records) {
            series.points.push(point);
        } else {
            series.flagged.push(point);
        }
    }
    series
}
