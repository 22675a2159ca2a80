//! Pressure term, inertia scheduler and pressure policies.
//!
//! Pressure is the linear penalty `(γ/d)·Σ t_i`, whose gradient is the same
//! constant `γ/d` for every presence parameter. The scheduler adjusts `γ`
//! once per epoch: a policy answers "raise pressure?", the base scalar moves
//! by `±(u + inertia)` and `γ = max(p, 0)^α`.

use serde::{Deserialize, Serialize};

use crate::error::ScheduleError;

/// `(γ/d)·Σ t_i` with `d = t.len()`.
pub fn pressure_loss(presence: &[f64], gamma: f64) -> Result<f64, ScheduleError> {
    if presence.is_empty() {
        return Err(ScheduleError::NoWeights);
    }
    Ok(gamma / presence.len() as f64 * presence.iter().sum::<f64>())
}

/// `∂L₋∞/∂t_i = γ/d`, identical for every presence parameter.
pub fn pressure_gradient(gamma: f64, num_weights: usize) -> Result<f64, ScheduleError> {
    if num_weights == 0 {
        return Err(ScheduleError::NoWeights);
    }
    Ok(gamma / num_weights as f64)
}

pub const DEFAULT_STEP: f64 = 0.1;
pub const DEFAULT_EXPONENT: f64 = 1.5;

/// Scheduler internals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureState {
    /// Base scalar `p`. May go negative; only the exponentiation is clamped.
    pub base: f64,
    pub inertia_up: f64,
    pub inertia_down: f64,
    pub step: f64,
    pub exponent: f64,
    pub gamma: f64,
}

impl PressureState {
    pub fn new(step: f64, exponent: f64) -> Self {
        Self {
            base: 0.0,
            inertia_up: 0.0,
            inertia_down: 0.0,
            step,
            exponent,
            gamma: 0.0,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.base,
            self.inertia_up,
            self.inertia_down,
            self.step,
            self.exponent,
            self.gamma,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            base: a[0],
            inertia_up: a[1],
            inertia_down: a[2],
            step: a[3],
            exponent: a[4],
            gamma: a[5],
        }
    }
}

impl Default for PressureState {
    fn default() -> Self {
        Self::new(DEFAULT_STEP, DEFAULT_EXPONENT)
    }
}

/// One scheduler update. `raise` is the policy decision.
pub fn sched_step(state: PressureState, raise: bool) -> PressureState {
    let mut next = state;
    let u = state.step;
    if raise {
        next.base = state.base + u + state.inertia_up;
        next.inertia_up = state.inertia_up + u / 4.0;
        next.inertia_down = 0.0;
    } else {
        next.base = state.base - u - state.inertia_down;
        next.inertia_down = state.inertia_down + u / 4.0;
        next.inertia_up = 0.0;
    }
    next.gamma = next.base.max(0.0).powf(state.exponent);
    next
}

/// Target density curve `f(e) = 100·∏_{i≤e} d(i)`, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityCurve {
    decays: Vec<f64>,
}

impl SparsityCurve {
    pub fn new(decays: Vec<f64>) -> Result<Self, ScheduleError> {
        if let Some(&bad) = decays.iter().find(|&&d| !(d > 0.0 && d <= 1.0)) {
            return Err(ScheduleError::InvalidDecay(bad));
        }
        Ok(Self { decays })
    }

    /// Constant per-epoch decay reaching `target_pct` after `epochs` epochs.
    pub fn geometric(target_pct: f64, epochs: usize) -> Result<Self, ScheduleError> {
        if !(target_pct > 0.0 && target_pct < 100.0) {
            return Err(ScheduleError::InvalidTarget(target_pct));
        }
        let ratio = (target_pct / 100.0).powf(1.0 / epochs as f64);
        Self::new(vec![ratio; epochs])
    }

    pub fn horizon(&self) -> usize {
        self.decays.len()
    }

    pub fn decays(&self) -> &[f64] {
        &self.decays
    }
}

/// `f(e)`; `f(0) = 100`.
pub fn curve_eval(curve: &SparsityCurve, epoch: usize) -> Result<f64, ScheduleError> {
    if epoch > curve.horizon() {
        return Err(ScheduleError::BeyondHorizon {
            epoch,
            horizon: curve.horizon(),
        });
    }
    Ok(curve.decays[..epoch].iter().fold(100.0, |acc, d| acc * d))
}

/// Trajectory policy: raise pressure iff more parameters remain than the
/// curve allows (`density_pct > f(e)`). Ties relax.
pub fn policy_trajectory(
    density_pct: f64,
    epoch: usize,
    curve: &SparsityCurve,
) -> Result<bool, ScheduleError> {
    Ok(density_pct > curve_eval(curve, epoch)?)
}

/// Upper-boundary policy.
///
/// `history` holds densities (any consistent unit) up to and including
/// epoch `epoch`. The boundary is a geometric schedule from the current
/// density to `target` over the remaining `pruning_epochs − epoch` epochs;
/// pressure rises iff the last observed per-epoch ratio is slower than the
/// schedule's ratio.
pub fn policy_upper_boundary(
    history: &[f64],
    epoch: usize,
    pruning_epochs: usize,
    target: f64,
) -> Result<bool, ScheduleError> {
    let Some(&current) = history.last() else {
        return Err(ScheduleError::EmptyHistory);
    };
    if epoch >= pruning_epochs {
        return Err(ScheduleError::NoRemainingEpochs {
            epoch,
            pruning_epochs,
        });
    }
    if current <= target {
        return Ok(false);
    }
    if history.len() < 2 {
        return Ok(true);
    }
    let previous = history[history.len() - 2];
    let required = (target / current).powf(1.0 / (pruning_epochs - epoch) as f64);
    let observed = current / previous;
    Ok(observed > required)
}

/// Which policy decides the scheduler's direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyConfig {
    Trajectory {
        curve: CurveSpec,
        /// Flip the comparison to `density_pct < f(e)`.
        #[serde(default)]
        invert: bool,
    },
    UpperBoundary {
        /// Target density in percent.
        target_pct: f64,
    },
}

/// Curve description as written in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CurveSpec {
    Explicit { decays: Vec<f64> },
    Geometric { target_pct: f64 },
}

impl CurveSpec {
    pub fn build(&self, pruning_epochs: usize) -> Result<SparsityCurve, ScheduleError> {
        match self {
            CurveSpec::Explicit { decays } => SparsityCurve::new(decays.clone()),
            CurveSpec::Geometric { target_pct } => {
                SparsityCurve::geometric(*target_pct, pruning_epochs)
            }
        }
    }
}

/// Stateful wrapper used by the trainer: policy + scheduler + history.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub state: PressureState,
    policy: PolicyConfig,
    curve: Option<SparsityCurve>,
    pruning_epochs: usize,
    /// Densities in percent, one per completed pruning epoch.
    pub history: Vec<f64>,
}

impl Scheduler {
    pub fn new(
        policy: PolicyConfig,
        step: f64,
        exponent: f64,
        pruning_epochs: usize,
    ) -> Result<Self, ScheduleError> {
        let curve = match &policy {
            PolicyConfig::Trajectory { curve, .. } => Some(curve.build(pruning_epochs)?),
            PolicyConfig::UpperBoundary { target_pct } => {
                if !(*target_pct > 0.0 && *target_pct < 100.0) {
                    return Err(ScheduleError::InvalidTarget(*target_pct));
                }
                None
            }
        };
        Ok(Self {
            state: PressureState::new(step, exponent),
            policy,
            curve,
            pruning_epochs,
            history: Vec::new(),
        })
    }

    pub fn gamma(&self) -> f64 {
        self.state.gamma
    }

    /// Feeds the density observed after `epoch` and returns the new `γ`.
    pub fn observe(&mut self, density_pct: f64, epoch: usize) -> Result<f64, ScheduleError> {
        self.history.push(density_pct);
        let raise = match (&self.policy, &self.curve) {
            (PolicyConfig::Trajectory { invert, .. }, Some(curve)) => {
                let f = curve_eval(curve, epoch.min(curve.horizon()))?;
                if *invert {
                    density_pct < f
                } else {
                    density_pct > f
                }
            }
            (PolicyConfig::UpperBoundary { target_pct }, _) => {
                policy_upper_boundary(&self.history, epoch, self.pruning_epochs, *target_pct)?
            }
            (PolicyConfig::Trajectory { .. }, None) => unreachable!("curve built in new()"),
        };
        self.state = sched_step(self.state, raise);
        Ok(self.state.gamma)
    }
}
