use super::ops::{self, ConvGeom, Padding, StandardizeStats};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    Reshape { x: Var },
    Standardize { x: Var, stats: StandardizeStats },
    Xent { logits: Var, labels: Vec<usize>, probs: Vec<f64>, mean: bool },
    CwMargin { logits: Var, labels: Vec<usize>, info: Vec<(usize, bool)> },
    Sum { x: Var },
    Scale { x: Var, c: f64 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } | Op::Conv2d { x, k: w, b, .. } => vec![*x, *w, *b],
            Op::MaxPool2 { x, .. }
            | Op::Relu { x }
            | Op::Reshape { x }
            | Op::Standardize { x, .. }
            | Op::Sum { x }
            | Op::Scale { x, .. } => vec![*x],
            Op::Xent { logits, .. } | Op::CwMargin { logits, .. } => vec![*logits],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in creation order, so every node's inputs have
/// smaller ids and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Removes and returns a gradient without copying.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .take()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g))
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, padding: Padding) -> Result<Var> {
        let (out, geom, cols) =
            ops::conv2d_forward(self.value(x), self.value(k), self.value(b), padding)?;
        Ok(self.push(out, Op::Conv2d { x, k, b, geom, cols }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2_forward(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Flattens every dimension after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn standardize(&mut self, x: Var) -> Result<Var> {
        let (out, stats) = ops::standardize_forward(self.value(x))?;
        Ok(self.push(out, Op::Standardize { x, stats }))
    }

    /// Mean cross-entropy over the batch (scalar).
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.xent(logits, labels, true)
    }

    /// Summed cross-entropy over the batch (scalar); per-example gradients
    /// are then unscaled.
    pub fn softmax_xent_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.xent(logits, labels, false)
    }

    fn xent(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        let (losses, probs) = ops::xent_forward(self.value(logits), labels)?;
        let mut total: f64 = losses.iter().sum();
        if mean {
            total /= losses.len() as f64;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Xent {
                logits,
                labels: labels.to_vec(),
                probs,
                mean,
            },
        ))
    }

    /// Summed clipped margin `Σ min(max_{i≠y} z_i − z_y, κ)` (scalar).
    pub fn cw_margin_sum(&mut self, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
        let (vals, info) = ops::cw_forward(self.value(logits), labels, kappa)?;
        Ok(self.push(
            Tensor::scalar(vals.iter().sum()),
            Op::CwMargin {
                logits,
                labels: labels.to_vec(),
                info,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c)?;
        Ok(self.push(out, Op::Scale { x, c }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::RootNotScalar(root_val.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                // Leaves keep their gradient for the caller.
                grads[id] = Some(g);
                continue;
            }
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(Error::TapeOrder {
                        node: id,
                        input: input.0,
                    });
                }
            }
            let need = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let r = ops::affine_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        [need(*x), need(*w), need(*b)],
                    );
                    accumulate(&mut grads, *x, r.x);
                    accumulate(&mut grads, *w, r.w);
                    accumulate(&mut grads, *b, r.b);
                }
                Op::Conv2d { x, k, b, geom, cols } => {
                    let r = ops::conv2d_backward(
                        geom,
                        cols,
                        self.value(*k),
                        &g,
                        [need(*x), need(*k), need(*b)],
                    );
                    accumulate(&mut grads, *x, r.x);
                    accumulate(&mut grads, *k, r.k);
                    accumulate(&mut grads, *b, r.b);
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = ops::maxpool2_backward(self.value(*x).len(), argmax, &g);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Reshape { x } => accumulate(&mut grads, *x, Some(g)),
                Op::Standardize { x, stats } => {
                    let dx = ops::standardize_backward(&node.value, stats, &g);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Xent {
                    logits,
                    labels,
                    probs,
                    mean,
                } => {
                    let k = self.value(*logits).shape()[1];
                    let scale = if *mean { g[0] / labels.len() as f64 } else { g[0] };
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dz[i * k + y] -= scale;
                    }
                    accumulate(&mut grads, *logits, Some(dz));
                }
                Op::CwMargin {
                    logits,
                    labels,
                    info,
                } => {
                    let k = self.value(*logits).shape()[1];
                    let mut dz = vec![0.0; labels.len() * k];
                    for (i, (&y, &(j, active))) in labels.iter().zip(info).enumerate() {
                        if active {
                            dz[i * k + j] += g[0];
                            dz[i * k + y] -= g[0];
                        }
                    }
                    accumulate(&mut grads, *logits, Some(dz));
                }
                Op::Sum { x } => {
                    let len = self.value(*x).len();
                    accumulate(&mut grads, *x, Some(vec![g[0]; len]));
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, Some(g.iter().map(|v| v * c).collect()));
                }
                Op::Add { a, b } => {
                    if need(*a) {
                        accumulate(&mut grads, *a, Some(g.clone()));
                    }
                    accumulate(&mut grads, *b, Some(g));
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if need(*a) {
                        let da = g.iter().zip(vb).map(|(p, q)| p * q).collect();
                        accumulate(&mut grads, *a, Some(da));
                    }
                    let db = g.iter().zip(va).map(|(p, q)| p * q).collect();
                    accumulate(&mut grads, *b, Some(db));
                }
            }
        }

        // Leaves are visited after their consumers, so their slots hold the
        // final accumulated gradient.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].requires_grad {
                *slot = None;
            }
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
