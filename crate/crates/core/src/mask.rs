//! Presence parameters, the step-function mask and flux bookkeeping.
//!
//! Each maskable weight `ω_i` is paired with a presence parameter `t_i`.
//! The weight is active iff `t_i > 0`; the effective weight used in the
//! forward pass is `θ_i = ω_i · H(t_i)`. With `A_i = −∂L/∂θ_i`, the
//! descent direction on `t_i` is `G_i = A_i · ω_i` (straight-through
//! estimator fixed to 1). `G_i` is called flux while the weight is pruned
//! and magnitude tendency while it is active.

use serde::{Deserialize, Serialize};

use crate::error::{AnalysisError, NetError};

/// `H(t) = 1` if `t > 0`, else `0`. `H(0) = 0`.
pub fn heaviside(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Surrogate derivative used for `∂H/∂t` during backpropagation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteKind {
    /// `STE_H ≡ 1`.
    #[default]
    Identity,
    /// `σ(t)·(1 − σ(t))`.
    SigmoidDerivative,
    /// `1 − tanh²(t)`.
    TanhDerivative,
}

impl SteKind {
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            SteKind::Identity => 1.0,
            SteKind::SigmoidDerivative => {
                let s = 1.0 / (1.0 + (-t).exp());
                s * (1.0 - s)
            }
            SteKind::TanhDerivative => {
                let th = t.tanh();
                1.0 - th * th
            }
        }
    }
}

/// `θ = ω ⊙ H(t)`.
pub fn effective_weights(weights: &[f64], presence: &[f64]) -> Result<Vec<f64>, NetError> {
    if weights.len() != presence.len() {
        return Err(NetError::ShapeMismatch(
            vec![weights.len()],
            vec![presence.len()],
        ));
    }
    Ok(weights
        .iter()
        .zip(presence)
        .map(|(w, &t)| w * heaviside(t))
        .collect())
}

/// `G_i = A_i · ω_i`. Positive values push `t_i` upward.
pub fn flux_gradient(flux_signal: f64, weight: f64) -> f64 {
    flux_signal * weight
}

/// Which branch of the gradient split a value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientKind {
    /// `G⁻`: the weight is pruned (`t ≤ 0`); the gradient is its flux.
    Flux,
    /// `G⁺`: the weight is active; the gradient tracks `|ω|`'s tendency.
    MagnitudeTendency,
}

/// Tags a gradient by the presence value it was computed at. The numeric
/// value is never altered.
pub fn classify_gradient(_gradient: f64, presence: f64) -> GradientKind {
    if presence > 0.0 {
        GradientKind::MagnitudeTendency
    } else {
        GradientKind::Flux
    }
}

/// Fraction of presence parameters that are strictly positive.
pub fn density(presence: &[f64]) -> f64 {
    if presence.is_empty() {
        return 0.0;
    }
    presence.iter().filter(|&&t| t > 0.0).count() as f64 / presence.len() as f64
}

/// Mean of per-step flux values over a family of topologies.
pub fn aggregated_flux(per_step: &[f64]) -> Result<f64, AnalysisError> {
    if per_step.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(per_step.iter().sum::<f64>() / per_step.len() as f64)
}

/// Binary mask over all maskable weights, flattened layer by layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology(Vec<bool>);

impl Topology {
    pub fn from_presence<'a>(presence: impl IntoIterator<Item = &'a f64>) -> Self {
        Self(presence.into_iter().map(|&t| t > 0.0).collect())
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Per-step flip counts of one mini-batch update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlips {
    /// 0→1 transitions (regrowth).
    pub regrown: u32,
    /// 1→0 transitions (pruning).
    pub pruned: u32,
}

impl StepFlips {
    pub fn total(&self) -> u32 {
        self.regrown + self.pruned
    }
}

/// History of topology transitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlipLog {
    pub steps: Vec<StepFlips>,
    pub per_weight: Vec<u32>,
}

impl FlipLog {
    pub fn new(weights: usize) -> Self {
        Self {
            steps: Vec::new(),
            per_weight: vec![0; weights],
        }
    }

    pub fn total_flips(&self) -> u64 {
        self.steps.iter().map(|s| u64::from(s.total())).sum()
    }
}

/// Appends the transitions between two topologies to `log` and returns
/// the step's counts.
pub fn record_flips(
    prev: &Topology,
    curr: &Topology,
    log: &mut FlipLog,
) -> Result<StepFlips, NetError> {
    if prev.len() != curr.len() {
        return Err(NetError::ShapeMismatch(vec![prev.len()], vec![curr.len()]));
    }
    if log.per_weight.len() != curr.len() {
        log.per_weight.resize(curr.len(), 0);
    }
    let mut flips = StepFlips::default();
    for (i, (&a, &b)) in prev.bits().iter().zip(curr.bits()).enumerate() {
        if a != b {
            log.per_weight[i] += 1;
            if b {
                flips.regrown += 1;
            } else {
                flips.pruned += 1;
            }
        }
    }
    log.steps.push(flips);
    Ok(flips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn heaviside_cases() {
        assert_eq!(heaviside(0.3), 1.0);
        assert_eq!(heaviside(0.0), 0.0);
        assert_eq!(heaviside(-1.2), 0.0);
    }

    #[test]
    fn effective_weights_cases() {
        assert_eq!(
            effective_weights(&[2.0, -3.0], &[0.5, -0.1]).unwrap(),
            vec![2.0, 0.0]
        );
        let w = [1.5, -0.25, 3.0];
        assert_eq!(effective_weights(&w, &[0.1, 0.2, 0.3]).unwrap(), w.to_vec());
        assert!(effective_weights(&w, &[0.0, -1.0, -0.1])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(effective_weights(&w, &[1.0]).is_err());
    }

    #[test]
    fn flux_cases() {
        assert_eq!(flux_gradient(0.5, 0.5), 0.25);
        assert_eq!(flux_gradient(0.5, -2.0), -1.0);
        assert_eq!(flux_gradient(0.0, 123.0), 0.0);
    }

    #[test]
    fn classify_cases() {
        assert_eq!(classify_gradient(0.3, -0.1), GradientKind::Flux);
        assert_eq!(classify_gradient(0.3, 0.1), GradientKind::MagnitudeTendency);
        assert_eq!(classify_gradient(0.0, 0.0), GradientKind::Flux);
    }

    #[test]
    fn density_cases() {
        assert_eq!(density(&[0.5, -0.1, 0.2, -3.0]), 0.5);
        assert_eq!(density(&[0.1, 2.0]), 1.0);
        assert_eq!(density(&[0.0, -2.0]), 0.0);
    }

    #[test]
    fn aggregated_flux_cases() {
        assert_eq!(aggregated_flux(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(aggregated_flux(&[0.7]).unwrap(), 0.7);
        assert_eq!(aggregated_flux(&[]).unwrap_err(), AnalysisError::Empty);
    }

    #[test]
    fn flip_counts() {
        let mut log = FlipLog::new(3);
        let a = Topology::from_bits(vec![true, false, true]);
        let b = Topology::from_bits(vec![true, true, false]);
        let f = record_flips(&a, &b, &mut log).unwrap();
        assert_eq!(
            f,
            StepFlips {
                regrown: 1,
                pruned: 1
            }
        );
        assert_eq!(record_flips(&b, &b, &mut log).unwrap().total(), 0);
        assert_eq!(log.per_weight, vec![0, 1, 1]);
    }

    #[test]
    fn ste_variants_are_positive_surrogates() {
        assert_eq!(SteKind::Identity.derivative(-4.0), 1.0);
        assert!((SteKind::SigmoidDerivative.derivative(0.0) - 0.25).abs() < 1e-15);
        assert!((SteKind::TanhDerivative.derivative(0.0) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn flips_conserve_counts(
            seq in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 2..10)
        ) {
            let mut log = FlipLog::new(12);
            for pair in seq.windows(2) {
                let prev = Topology::from_bits(pair[0].clone());
                let curr = Topology::from_bits(pair[1].clone());
                let hamming = pair[0].iter().zip(&pair[1]).filter(|(a, b)| a != b).count();
                let step = record_flips(&prev, &curr, &mut log).unwrap();
                prop_assert_eq!(step.total() as usize, hamming);
            }
            let per_weight: u64 = log.per_weight.iter().map(|&c| u64::from(c)).sum();
            prop_assert_eq!(per_weight, log.total_flips());
        }
    }
}
