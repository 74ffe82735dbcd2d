use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::Rng as Stream;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

/// The allowed perturbation set: a norm ball of radius `epsilon` around the
/// natural input, intersected with the pixel box `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBudget {
    pub norm: Norm,
    pub epsilon: f64,
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
}

fn default_lo() -> f64 {
    0.0
}

fn default_hi() -> f64 {
    1.0
}

/// Relative slack under which an ℓ2 difference counts as already inside the
/// ball; keeps the projection exactly idempotent under rounding.
const L2_SLACK: f64 = 1e-12;

impl PerturbationBudget {
    pub fn new(norm: Norm, epsilon: f64) -> Result<Self> {
        Self::with_box(norm, epsilon, 0.0, 1.0)
    }

    pub fn linf(epsilon: f64) -> Result<Self> {
        Self::new(Norm::Linf, epsilon)
    }

    pub fn l2(epsilon: f64) -> Result<Self> {
        Self::new(Norm::L2, epsilon)
    }

    pub fn with_box(norm: Norm, epsilon: f64, lo: f64, hi: f64) -> Result<Self> {
        let b = Self { norm, epsilon, lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidBudget(format!("epsilon {} < 0", self.epsilon)));
        }
        if !(self.lo < self.hi) {
            return Err(Error::InvalidBudget(format!("box [{}, {}] is empty", self.lo, self.hi)));
        }
        Ok(())
    }

    /// Same budget with a different radius.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::with_box(self.norm, epsilon, self.lo, self.hi)
    }

    /// Projects one example's coordinates (`x` onto the set around `x0`).
    pub fn project_row(&self, x0: &[f64], x: &[f64], out: &mut [f64]) {
        let (lo, hi, eps) = (self.lo, self.hi, self.epsilon);
        match self.norm {
            Norm::Linf => {
                for ((o, &a), &b) in out.iter_mut().zip(x0).zip(x) {
                    let l = (a - eps).max(lo);
                    let h = (a + eps).min(hi);
                    *o = b.clamp(l, h);
                }
            }
            Norm::L2 => {
                let norm = x0
                    .iter()
                    .zip(x)
                    .map(|(a, b)| (b - a) * (b - a))
                    .sum::<f64>()
                    .sqrt();
                if norm <= eps * (1.0 + L2_SLACK) {
                    for (o, &b) in out.iter_mut().zip(x) {
                        *o = b.clamp(lo, hi);
                    }
                } else {
                    let s = eps / norm;
                    for ((o, &a), &b) in out.iter_mut().zip(x0).zip(x) {
                        *o = (a + (b - a) * s).clamp(lo, hi);
                    }
                }
            }
        }
    }

    /// Largest amount by which `x` leaves the set around `x0` (0 if inside).
    pub fn violation_row(&self, x0: &[f64], x: &[f64]) -> f64 {
        let boxv = x
            .iter()
            .map(|&v| (self.lo - v).max(v - self.hi).max(0.0))
            .fold(0.0, f64::max);
        let normv = match self.norm {
            Norm::Linf => x0
                .iter()
                .zip(x)
                .map(|(a, b)| (b - a).abs())
                .fold(0.0, f64::max),
            Norm::L2 => x0
                .iter()
                .zip(x)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt(),
        };
        boxv.max(normv - self.epsilon)
    }

    /// Uniform draw from the ball around `x0`, then projected into the box.
    /// ℓ2 draws are uniform in the ε-cube, radially pulled into the ball.
    pub fn random_point(&self, x0: &[f64], rng: &mut Stream) -> Vec<f64> {
        let eps = self.epsilon;
        let mut delta: Vec<f64> = x0
            .iter()
            .map(|_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 })
            .collect();
        if self.norm == Norm::L2 {
            let n = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > eps {
                let s = eps / n;
                delta.iter_mut().for_each(|v| *v *= s);
            }
        }
        let x: Vec<f64> = x0.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let mut out = vec![0.0; x0.len()];
        self.project_row(x0, &x, &mut out);
        out
    }
}

/// Row-wise projection of a batch `x` onto the budget around `x0`.
pub fn project(x0: &Tensor, x: &Tensor, budget: &PerturbationBudget) -> Result<Tensor> {
    if x0.shape() != x.shape() {
        return Err(Error::shape(
            "project",
            format!("{:?} vs {:?}", x0.shape(), x.shape()),
        ));
    }
    let n = x.shape()[0];
    let r = x.row_len();
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        budget.project_row(x0.row(i), x.row(i), &mut out[i * r..(i + 1) * r]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest budget violation over a batch.
pub fn max_violation(x0: &Tensor, x: &Tensor, budget: &PerturbationBudget) -> f64 {
    (0..x.shape()[0])
        .map(|i| budget.violation_row(x0.row(i), x.row(i)))
        .fold(0.0, f64::max)
}

/// Fails unless every row of `x` lies inside the budget to within `tol`.
pub fn verify_budget(x0: &Tensor, x: &Tensor, budget: &PerturbationBudget, tol: f64) -> Result<()> {
    let v = max_violation(x0, x, budget);
    if v > tol {
        return Err(Error::InvalidBudget(format!(
            "adversarial example leaves the budget by {v:e}"
        )));
    }
    Ok(())
}
