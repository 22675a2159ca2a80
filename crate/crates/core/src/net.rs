//! Masked feed-forward classifier.
//!
//! Every layer holds weights `ω` (fan_in × fan_out), presence parameters
//! `t` of the same shape, an unmasked bias row and the cached signal
//! `A = −∂L/∂θ` from the most recent backward pass. Hidden layers use ReLU;
//! the loss is mean softmax cross-entropy over the batch.

use std::path::Path;

use rand::Rng;

use crate::autodiff::{gradient_check, Tape, Var};
use crate::checkpoint::Archive;
use crate::error::{CheckpointError, NetError};
use crate::mask::{heaviside, SteKind, Topology};
use crate::tensor::Tensor;

/// Range used to initialise presence parameters.
pub const PRESENCE_INIT: (f64, f64) = (0.2, 0.5);

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    pub weight: Tensor,
    pub presence: Tensor,
    pub bias: Tensor,
    /// `A = −∂L/∂θ` from the latest backward pass.
    pub flux_signal: Tensor,
}

impl MaskedLayer {
    /// Builds a fully present layer (`t = 1`) from weights and bias.
    pub fn dense(weight: Tensor, bias: Tensor) -> Self {
        let shape = weight.shape().to_vec();
        Self {
            presence: Tensor::full(shape.clone(), 1.0),
            flux_signal: Tensor::zeros(shape),
            weight,
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn active(&self) -> usize {
        self.presence.data().iter().filter(|&&t| t > 0.0).count()
    }

    pub fn effective_weight(&self) -> Tensor {
        let data = self
            .weight
            .data()
            .iter()
            .zip(self.presence.data())
            .map(|(w, &t)| w * heaviside(t))
            .collect();
        Tensor::from_parts(self.weight.shape().to_vec(), data)
    }
}

/// Ordered stack of masked layers (the `LayerStack` of the design notes).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNet {
    layers: Vec<MaskedLayer>,
    ste: SteKind,
}

/// Handles to one layer's nodes on a forward tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub presence: Var,
    pub theta: Var,
    pub bias: Var,
}

/// A recorded forward pass, ready for [`ForwardPass::backward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: Var,
    pub logits: Var,
    pub layers: Vec<LayerVars>,
}

/// Per-layer gradients of the mean task loss.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    /// `∂L/∂ω = ∂L/∂θ · H(t)`.
    pub weight: Tensor,
    /// `∂L/∂t = ∂L/∂θ · ω · STE_H(t)`, pressure excluded.
    pub presence: Tensor,
    /// `∂L/∂θ`.
    pub theta: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct NetGrads {
    pub loss: f64,
    pub logits: Tensor,
    pub layers: Vec<LayerGrads>,
}

impl ForwardPass {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }

    pub fn backward(self) -> Result<NetGrads, NetError> {
        let mut g = self.tape.backward(self.loss)?;
        let loss = g.value(self.loss).data()[0];
        let logits = g.value(self.logits).clone();
        let layers = self
            .layers
            .iter()
            .map(|lv| LayerGrads {
                weight: g.take_grad(lv.weight).expect("weight is a parameter"),
                presence: g.take_grad(lv.presence).expect("presence is a parameter"),
                theta: g.take_grad(lv.theta).expect("theta depends on parameters"),
                bias: g.take_grad(lv.bias).expect("bias is a parameter"),
            })
            .collect();
        Ok(NetGrads {
            loss,
            logits,
            layers,
        })
    }
}

impl MaskedNet {
    pub fn new(layers: Vec<MaskedLayer>) -> Result<Self, NetError> {
        for (i, layer) in layers.iter().enumerate() {
            if layer.presence.shape() != layer.weight.shape()
                || layer.flux_signal.shape() != layer.weight.shape()
            {
                return Err(NetError::PresenceShape {
                    layer: i,
                    weight: layer.weight.shape().to_vec(),
                    presence: layer.presence.shape().to_vec(),
                });
            }
            if layer.bias.len() != layer.fan_out() {
                return Err(NetError::ShapeMismatch(
                    layer.weight.shape().to_vec(),
                    layer.bias.shape().to_vec(),
                ));
            }
            if i > 0 && layers[i - 1].fan_out() != layer.fan_in() {
                return Err(NetError::DimensionMismatch {
                    layer: i,
                    expected: layer.fan_in(),
                    found: layers[i - 1].fan_out(),
                });
            }
        }
        Ok(Self {
            layers,
            ste: SteKind::Identity,
        })
    }

    /// Random network with He-uniform weights, zero biases and presence
    /// parameters drawn from [`PRESENCE_INIT`].
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
                let presence = Tensor::from_fn(fan_in, fan_out, |_, _| {
                    rng.gen_range(PRESENCE_INIT.0..PRESENCE_INIT.1)
                });
                MaskedLayer {
                    weight,
                    presence,
                    bias: Tensor::zeros(vec![1, fan_out]),
                    flux_signal: Tensor::zeros(vec![fan_in, fan_out]),
                }
            })
            .collect();
        Self {
            layers,
            ste: SteKind::Identity,
        }
    }

    pub fn with_ste(mut self, ste: SteKind) -> Self {
        self.ste = ste;
        self
    }

    pub fn ste(&self) -> SteKind {
        self.ste
    }

    pub fn set_ste(&mut self, ste: SteKind) {
        self.ste = ste;
    }

    pub fn layers(&self) -> &[MaskedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MaskedLayer] {
        &mut self.layers
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.layers.iter().map(MaskedLayer::fan_in).collect();
        if let Some(last) = self.layers.last() {
            sizes.push(last.fan_out());
        }
        sizes
    }

    /// `d`: the number of maskable weights (biases excluded).
    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn active_weights(&self) -> usize {
        self.layers.iter().map(MaskedLayer::active).sum()
    }

    pub fn active_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(MaskedLayer::active).collect()
    }

    pub fn density(&self) -> f64 {
        let d = self.num_weights();
        if d == 0 {
            return 0.0;
        }
        self.active_weights() as f64 / d as f64
    }

    pub fn topology(&self) -> Topology {
        Topology::from_presence(self.layers.iter().flat_map(|l| l.presence.data()))
    }

    /// All presence values, flattened layer by layer.
    pub fn presence_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.presence.data().iter().copied())
            .collect()
    }

    pub fn weights_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().copied())
            .collect()
    }

    pub fn flux_signal_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.flux_signal.data().iter().copied())
            .collect()
    }

    /// Maps a flat weight index to `(layer, index within layer)`.
    pub fn locate(&self, flat: usize) -> Option<(usize, usize)> {
        let mut offset = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            if flat < offset + layer.weight.len() {
                return Some((li, flat - offset));
            }
            offset += layer.weight.len();
        }
        None
    }

    /// Records the forward computation of the mean cross-entropy loss.
    pub fn forward(&self, x: &Tensor, y: &[usize]) -> Result<ForwardPass, NetError> {
        if x.rows() != y.len() {
            return Err(NetError::BatchMismatch {
                inputs: x.rows(),
                labels: y.len(),
            });
        }
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        let mut vars = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let width = tape.value(h).cols();
            if width != layer.fan_in() {
                return Err(NetError::DimensionMismatch {
                    layer: i,
                    expected: layer.fan_in(),
                    found: width,
                });
            }
            let weight = tape.param(layer.weight.clone());
            let presence = tape.param(layer.presence.clone());
            let bias = tape.param(layer.bias.clone());
            let mask = tape.step(presence, self.ste)?;
            let theta = tape.mul(weight, mask)?;
            let z = tape.matmul(h, theta)?;
            let z = tape.add_bias(z, bias)?;
            h = if i + 1 < self.layers.len() {
                tape.relu(z)?
            } else {
                z
            };
            vars.push(LayerVars {
                weight,
                presence,
                theta,
                bias,
            });
        }
        let per_sample = tape.softmax_cross_entropy(h, y)?;
        let total = tape.sum(per_sample)?;
        let loss = tape.scale(total, 1.0 / y.len().max(1) as f64)?;
        Ok(ForwardPass {
            tape,
            loss,
            logits: h,
            layers: vars,
        })
    }

    pub fn loss(&self, x: &Tensor, y: &[usize]) -> Result<f64, NetError> {
        Ok(self.forward(x, y)?.loss_value())
    }

    /// Forward pass plus backward pass; also refreshes each layer's cached
    /// flux signal `A = −∂L/∂θ`.
    pub fn compute_grads(&mut self, x: &Tensor, y: &[usize]) -> Result<NetGrads, NetError> {
        let grads = self.forward(x, y)?.backward()?;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.flux_signal = g.theta.map(|v| -v);
        }
        Ok(grads)
    }

    /// Logits without recording a tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if h.cols() != layer.fan_in() {
                return Err(NetError::DimensionMismatch {
                    layer: i,
                    expected: layer.fan_in(),
                    found: h.cols(),
                });
            }
            let theta = layer.effective_weight();
            let (m, k, n) = (h.rows(), layer.fan_in(), layer.fan_out());
            let mut z = crate::autodiff::matmul_raw(h.data(), theta.data(), m, k, n);
            for row in z.chunks_mut(n) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                    if i + 1 < self.layers.len() && *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = Tensor::from_parts(vec![m, n], z);
        }
        Ok(h)
    }

    /// Fraction of rows whose argmax logit equals the label.
    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64, NetError> {
        if y.is_empty() {
            return Ok(0.0);
        }
        let logits = self.logits(x)?;
        let c = logits.cols();
        let correct = y
            .iter()
            .enumerate()
            .filter(|(r, &label)| {
                let row = &logits.data()[r * c..(r + 1) * c];
                argmax(row) == label
            })
            .count();
        Ok(correct as f64 / y.len() as f64)
    }

    /// Copy of the network in which pruned weights are physically zero and
    /// every presence parameter is positive.
    pub fn physically_pruned(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| MaskedLayer::dense(l.effective_weight(), l.bias.clone()))
            .collect();
        Self {
            layers,
            ste: self.ste,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.insert_scalars("net.layers", &[self.layers.len() as f64]);
        a.insert_scalars("net.ste", &[ste_code(self.ste)]);
        for (i, l) in self.layers.iter().enumerate() {
            a.insert(format!("layer.{i}.weight"), l.weight.clone());
            a.insert(format!("layer.{i}.presence"), l.presence.clone());
            a.insert(format!("layer.{i}.bias"), l.bias.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self, CheckpointError> {
        let count = a.require("net.layers")?.data()[0] as usize;
        let ste = ste_from_code(a.require("net.ste")?.data()[0])?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let weight = a.require(&format!("layer.{i}.weight"))?.clone();
            let presence = a.require(&format!("layer.{i}.presence"))?.clone();
            let bias = a.require(&format!("layer.{i}.bias"))?.clone();
            let flux_signal = Tensor::zeros(weight.shape().to_vec());
            layers.push(MaskedLayer {
                weight,
                presence,
                bias,
                flux_signal,
            });
        }
        Self::new(layers)
            .map(|n| n.with_ste(ste))
            .map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_archive(&Archive::read(path)?)
    }
}

fn ste_code(ste: SteKind) -> f64 {
    match ste {
        SteKind::Identity => 0.0,
        SteKind::SigmoidDerivative => 1.0,
        SteKind::TanhDerivative => 2.0,
    }
}

fn ste_from_code(code: f64) -> Result<SteKind, CheckpointError> {
    match code as i64 {
        0 => Ok(SteKind::Identity),
        1 => Ok(SteKind::SigmoidDerivative),
        2 => Ok(SteKind::TanhDerivative),
        other => Err(CheckpointError::Malformed(format!(
            "unknown STE code {other}"
        ))),
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy loss and the recorded tape.
pub fn forward_eval(
    net: &MaskedNet,
    x: &Tensor,
    y: &[usize],
) -> Result<(f64, ForwardPass), NetError> {
    let pass = net.forward(x, y)?;
    Ok((pass.loss_value(), pass))
}

/// Largest relative error between backpropagated gradients and central
/// differences, over every weight and bias of `net`.
///
/// Presence parameters are excluded: `H` is piecewise constant, so their
/// finite differences vanish almost everywhere while the straight-through
/// estimator is nonzero by construction.
pub fn finite_diff_check(
    net: &MaskedNet,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
) -> Result<f64, NetError> {
    let grads = net.forward(x, y)?.backward()?;
    let mut params = Vec::new();
    let mut analytic = Vec::new();
    for (layer, g) in net.layers.iter().zip(&grads.layers) {
        params.push(layer.weight.clone());
        analytic.push(g.weight.clone());
        params.push(layer.bias.clone());
        analytic.push(g.bias.clone());
    }
    let mut probe = net.clone();
    Ok(gradient_check(&params, &analytic, epsilon, |p| {
        for (i, layer) in probe.layers.iter_mut().enumerate() {
            layer.weight = p[2 * i].clone();
            layer.bias = p[2 * i + 1].clone();
        }
        probe.loss(x, y).expect("shapes validated above")
    }))
}
