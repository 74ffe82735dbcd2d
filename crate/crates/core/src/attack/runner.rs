use rand::Rng;

use super::budget::{Norm, PerturbationBudget};
use crate::seed::{self, tag};
use crate::tensor::{ops, Tape, Tensor};
use crate::nn::Model;
use crate::{Error, Result};

/// What an attack ascends, per example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Goal {
    Xent,
    Cw(f64),
    /// Negated cross-entropy of the target class.
    Targeted,
}

impl Goal {
    fn values(&self, logits: &Tensor, labels: &[usize], targets: Option<&[usize]>) -> Result<Vec<f64>> {
        match self {
            Goal::Xent => ops::xent_rows(logits, labels),
            Goal::Cw(kappa) => ops::cw_rows(logits, labels, *kappa),
            Goal::Targeted => {
                let t = targets.ok_or_else(|| Error::InvalidAttack("targeted goal without targets".into()))?;
                Ok(ops::xent_rows(logits, t)?.into_iter().map(|v| -v).collect())
            }
        }
    }

    pub(crate) fn success(&self, logits: &Tensor, labels: &[usize], targets: Option<&[usize]>) -> Vec<bool> {
        (0..labels.len())
            .map(|i| {
                let z = logits.row(i);
                let y = labels[i];
                match self {
                    Goal::Xent => ops::argmax(z) != y,
                    Goal::Cw(kappa) => {
                        let m = z[ops::runner_up(z, y)] - z[y];
                        m > 0.0 && m >= *kappa
                    }
                    Goal::Targeted => ops::argmax(z) == targets.expect("targets")[i],
                }
            })
            .collect()
    }
}

/// Where each restart begins.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Start {
    Zero,
    Uniform,
    /// `x + a·sgn(u)` with `u` uniform in `[-1, 1]`.
    SignNoise(f64),
}

pub(crate) struct Probe {
    pub values: Vec<f64>,
    pub logits: Tensor,
    pub grad: Option<Tensor>,
}

/// Objective values at `x`, and optionally their input gradient (each row
/// receives the gradient of its own objective).
pub(crate) fn probe(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    targets: Option<&[usize]>,
    goal: Goal,
    want_grad: bool,
) -> Result<Probe> {
    if !want_grad {
        let logits = model.forward(x)?;
        let values = goal.values(&logits, labels, targets)?;
        return Ok(Probe { values, logits, grad: None });
    }
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let pv = model.params_on(&mut tape, false);
    let lv = model.record(&mut tape, xv, &pv)?;
    let root = match goal {
        Goal::Xent => tape.softmax_xent_sum(lv, labels)?,
        Goal::Cw(kappa) => tape.cw_margin_sum(lv, labels, kappa)?,
        Goal::Targeted => {
            let t = targets.ok_or_else(|| Error::InvalidAttack("targeted goal without targets".into()))?;
            let s = tape.softmax_xent_sum(lv, t)?;
            tape.scale(s, -1.0)?
        }
    };
    let logits = tape.value(lv).clone();
    let values = goal.values(&logits, labels, targets)?;
    let mut g = tape.backward(root)?;
    let grad = g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    if grad.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "input_gradient" });
    }
    Ok(Probe { values, logits, grad: Some(grad) })
}

pub(crate) struct RestartRun {
    pub x: Tensor,
    pub values: Vec<f64>,
    pub success: Vec<bool>,
    /// Objective at iterates 1..=steps, per row.
    pub trajectory: Vec<Vec<f64>>,
    pub zero_grad: usize,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One projected-ascent run over a block of rows. `keys[i] = (id, restart)`
/// selects the random stream of row `i`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_restart(
    model: &Model,
    x0: &Tensor,
    labels: &[usize],
    targets: Option<&[usize]>,
    goal: Goal,
    budget: &PerturbationBudget,
    start: Start,
    steps: usize,
    alpha: f64,
    keys: &[(u64, u64)],
    seed: u64,
) -> Result<RestartRun> {
    let n = x0.shape()[0];
    let d = x0.row_len();
    let mut x = x0.data().to_vec();
    if start != Start::Zero {
        for i in 0..n {
            let (id, r) = keys[i];
            let mut rng = seed::stream(seed, &[tag::ATTACK, id, r]);
            let row0 = x0.row(i);
            let out = &mut x[i * d..(i + 1) * d];
            match start {
                Start::Uniform => out.copy_from_slice(&budget.random_point(row0, &mut rng)),
                Start::SignNoise(a) => {
                    let moved: Vec<f64> = row0
                        .iter()
                        .map(|&v| v + a * sgn(rng.random_range(-1.0..=1.0)))
                        .collect();
                    budget.project_row(row0, &moved, out);
                }
                Start::Zero => unreachable!(),
            }
        }
    }

    let shape = x0.shape().to_vec();
    let mut trajectory = vec![Vec::with_capacity(steps); n];
    let mut zero_grad = 0;
    let mut cur = Tensor::new(shape.clone(), x)?;
    let mut moved = vec![0.0; d];
    for t in 0..=steps {
        let last = t == steps;
        let p = probe(model, &cur, labels, targets, goal, !last)?;
        if t > 0 {
            for (row, v) in trajectory.iter_mut().zip(&p.values) {
                row.push(*v);
            }
        }
        if last {
            let success = goal.success(&p.logits, labels, targets);
            return Ok(RestartRun {
                x: cur,
                values: p.values,
                success,
                trajectory,
                zero_grad,
            });
        }
        let g = p.grad.expect("gradient requested");
        let mut next = cur.data().to_vec();
        for i in 0..n {
            let gi = g.row(i);
            let xi = cur.row(i);
            match budget.norm {
                Norm::Linf => {
                    for ((m, &a), &gv) in moved.iter_mut().zip(xi).zip(gi) {
                        *m = a + alpha * sgn(gv);
                    }
                }
                Norm::L2 => {
                    let gn = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gn == 0.0 {
                        zero_grad += 1;
                        continue;
                    }
                    for ((m, &a), &gv) in moved.iter_mut().zip(xi).zip(gi) {
                        *m = a + alpha * gv / gn;
                    }
                }
            }
            budget.project_row(x0.row(i), &moved, &mut next[i * d..(i + 1) * d]);
        }
        cur = Tensor::new(shape.clone(), next)?;
    }
    unreachable!("loop returns on the last step")
}
