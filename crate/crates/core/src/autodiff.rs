//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order. Because inputs
//! must already exist on the tape when an operation is recorded, the tape
//! is topologically ordered by construction, and [`Tape::backward`] simply
//! walks it in reverse.
//!
//! The op set is deliberately small: matrix multiply, bias add, elementwise
//! multiply, ReLU, the Heaviside step (with a straight-through surrogate
//! derivative), softmax cross-entropy, sum and scalar scaling.

use crate::error::AutodiffError;
use crate::mask::SteKind;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Step(Var, SteKind),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Scale(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Relu(..) => "relu",
            Op::Step(..) => "step",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Sum(..) => "sum",
            Op::Scale(..) => "scale",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// `(m×k) · (k×n) → (m×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        self.record(value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds `b` to every row of `a`. `b` is either a `(1×n)` row or has the
    /// same shape as `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n) = (av.rows(), av.cols());
        let broadcast = bv.rows() == 1 && bv.cols() == n;
        if !broadcast && av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = av.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let brow = if broadcast {
                bv.data()
            } else {
                &bv.data()[r * n..(r + 1) * n]
            };
            for (o, &bb) in row.iter_mut().zip(brow) {
                *o += bb;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.record(value, Op::AddBias(a, b), &[a, b])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.record(value, Op::Mul(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.record(value, Op::Relu(a), &[a])
    }

    /// Heaviside step `H(x) = 1 if x > 0 else 0`; backward uses `ste`.
    pub fn step(&mut self, a: Var, ste: SteKind) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(crate::mask::heaviside);
        self.record(value, Op::Step(a, ste), &[a])
    }

    /// Per-sample softmax cross-entropy. Returns an `(m×1)` column of losses.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        let (m, c) = (lv.rows(), lv.cols());
        if labels.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; m * c];
        let mut losses = Vec::with_capacity(m);
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(AutodiffError::LabelOutOfRange { label, classes: c });
            }
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (p, &z) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (z - max).exp();
                total += *p;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= total;
            }
            losses.push(max + total.ln() - row[label]);
        }
        let value = Tensor::from_parts(vec![m, 1], losses);
        self.record(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Sum of all elements, as a `(1×1)` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(value, Op::Sum(a), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(|x| x * factor);
        self.record(value, Op::Scale(a, factor), &[a])
    }

    /// Propagates `∂root/∂node` to every node that requires a gradient.
    /// Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients, AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(AutodiffError::NotScalar(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(upstream);
                continue;
            }
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        let (values, flags): (Vec<Tensor>, Vec<bool>) = self
            .nodes
            .into_iter()
            .map(|n| (n.value, n.requires_grad))
            .unzip();
        let grads = grads
            .into_iter()
            .zip(values.iter().zip(&flags))
            .map(|(g, (v, &req))| {
                if !req {
                    return None;
                }
                Some(Tensor::from_parts(
                    v.shape().to_vec(),
                    g.unwrap_or_else(|| vec![0.0; v.len()]),
                ))
            })
            .collect();
        Ok(Gradients { values, grads })
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    // dA[i,p] = Σ_j dC[i,j]·B[p,j]
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            da[i * k + p] = urow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    // dB[p,j] = Σ_i A[i,p]·dC[i,j]
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (d, &u) in db[p * n..(p + 1) * n].iter_mut().zip(urow) {
                                *d += a_ip * u;
                            }
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, up);
                }
                if wants(*b) {
                    let bv = self.value(*b);
                    if bv.len() == up.len() {
                        accumulate(grads, *b, up);
                    } else {
                        let n = bv.len();
                        let mut db = vec![0.0; n];
                        for row in up.chunks(n) {
                            for (d, &u) in db.iter_mut().zip(row) {
                                *d += u;
                            }
                        }
                        accumulate(grads, *b, &db);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let da: Vec<f64> = up.iter().zip(bv.data()).map(|(u, y)| u * y).collect();
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    let db: Vec<f64> = up.iter().zip(av.data()).map(|(u, x)| u * x).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da: Vec<f64> = up
                    .iter()
                    .zip(av.data())
                    .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Step(a, ste) => {
                let av = self.value(*a);
                let da: Vec<f64> = up
                    .iter()
                    .zip(av.data())
                    .map(|(&u, &x)| u * ste.derivative(x))
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let mut dl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * c + label] -= 1.0;
                    for d in &mut dl[r * c..(r + 1) * c] {
                        *d *= up[r];
                    }
                }
                accumulate(grads, *logits, &dl);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![up[0]; n]);
            }
            Op::Scale(a, factor) => {
                let da: Vec<f64> = up.iter().map(|u| u * factor).collect();
                accumulate(grads, *a, &da);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(g) => {
            for (x, d) in g.iter_mut().zip(delta) {
                *x += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            for (o, &bb) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bb;
            }
        }
    }
    out
}

/// Values and gradients left behind by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    /// `∂root/∂var`, or `None` for nodes that do not require a gradient.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Tensor> {
        self.grads[var.0].take()
    }
}

/// Largest relative disagreement between analytic gradients and central
/// differences of `loss` around `params`.
///
/// The per-element error is `|a − c| / max(|a|, |c|, 1e-12)`. An empty
/// parameter list yields 0.
pub fn gradient_check(
    params: &[Tensor],
    analytic: &[Tensor],
    epsilon: f64,
    mut loss: impl FnMut(&[Tensor]) -> f64,
) -> f64 {
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    for (p, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), params[p].len());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + epsilon;
            let plus = loss(&probe);
            probe[p].data_mut()[i] = orig - epsilon;
            let minus = loss(&probe);
            probe[p].data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let denom = a.abs().max(central.abs()).max(1e-12);
            worst = worst.max((a - central).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.param(Tensor::scalar(v))
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let a = scalar(&mut tape, 3.0);
        let b = scalar(&mut tape, 4.0);
        let f = tape.mul(a, b).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn inactive_relu_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = scalar(&mut tape, -2.0);
        let r = tape.relu(a).unwrap();
        let g = tape.backward(r).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_on_empty_tape_fails() {
        let tape = Tape::new();
        assert_eq!(tape.backward(Var(0)).unwrap_err(), AutodiffError::EmptyTape);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.backward(a), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(vec![2, 3]));
        let b = tape.param(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let f = tape.mul(a, c).unwrap();
        let g = tape.backward(f).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(a).unwrap().data(), &[5.0]);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(vec![1, 2]));
        assert_eq!(
            tape.softmax_cross_entropy(z, &[2]).unwrap_err(),
            AutodiffError::LabelOutOfRange {
                label: 2,
                classes: 2
            }
        );
    }

    #[test]
    fn step_uses_straight_through_gradient() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::new(vec![1, 3], vec![-0.5, 0.0, 0.7]).unwrap());
        let h = tape.step(t, SteKind::Identity).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0, 1.0]);
        let s = tape.sum(h).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(a) = a·a + a → f'(a) = 2a + 1
        let mut tape = Tape::new();
        let a = scalar(&mut tape, 1.5);
        let sq = tape.mul(a, a).unwrap();
        let f = tape.add_bias(sq, a).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[4.0]);
    }

    #[test]
    fn empty_gradient_check_is_zero() {
        assert_eq!(gradient_check(&[], &[], 1e-6, |_| 0.0), 0.0);
    }
}
