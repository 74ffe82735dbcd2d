//! Loss-landscape studies around single examples: many-restart PGD,
//! concentration of the final losses, geometry of the maxima, segment probes
//! between maxima and loss profiles along attack directions.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackKind, Goal, Norm, PerturbationBudget, Start};
use crate::data::Batch;
use crate::eval::angle_deg;
use crate::nn::Model;
use crate::seed::{self, tag};
use crate::tensor::{ops, Tensor};
use crate::{par, Error, Result};

/// Default cap on the number of pairs examined by [`maxima_geometry`].
pub const MAX_PAIRS: usize = 10_000;

/// Final iterates of many PGD restarts on one example.
#[derive(Clone, Debug, PartialEq)]
pub struct MaximaSet {
    pub example_index: u64,
    pub label: usize,
    /// The natural input, shape `[1, h, w, c]`.
    pub x: Tensor,
    /// `δ* = x_final − x` per restart.
    pub deltas: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    /// Per-restart losses at iterates 1..=steps.
    pub trajectories: Vec<Vec<f64>>,
    pub natural_loss: f64,
    pub natural_grad: Vec<f64>,
}

impl MaximaSet {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Loss change over the last `k` steps of every restart.
    pub fn plateau_deltas(&self, k: usize) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|t| {
                let n = t.len();
                if n == 0 {
                    return 0.0;
                }
                t[n - 1] - t[n.saturating_sub(k + 1)]
            })
            .collect()
    }

    /// Trajectory CSV (`restart,step,loss`); steps count from 1.
    pub fn write_trajectories_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "restart,step,loss")?;
        for (r, t) in self.trajectories.iter().enumerate() {
            for (s, l) in t.iter().enumerate() {
                writeln!(w, "{r},{},{l}", s + 1)?;
            }
        }
        Ok(())
    }
}

/// Runs `n_restarts` independent PGD restarts on row `index` of `batch`.
/// Restart `r` draws its start from the stream `(cfg.seed, id, r)`.
pub fn restart_study(
    model: &Model,
    batch: &Batch,
    index: usize,
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
    n_restarts: usize,
) -> Result<MaximaSet> {
    if n_restarts < 2 {
        return Err(Error::InvalidArgument("restart_study needs at least two restarts".into()));
    }
    if cfg.kind != AttackKind::Pgd {
        return Err(Error::InvalidAttack("restart_study runs pgd".into()));
    }
    cfg.validate()?;
    budget.validate()?;
    let one = batch.slice(index..index + 1);
    model.check_input(&one.images)?;
    let id = one.ids[0];
    let label = one.labels[0];
    let start = if cfg.random_start { Start::Uniform } else { Start::Zero };

    let ranges = par::chunk_ranges(n_restarts, attack::CHUNK);
    let runs = par::try_map(&ranges, |r| {
        let k = r.len();
        let x0 = one.images.select(&vec![0; k]);
        let labels = vec![label; k];
        let keys: Vec<(u64, u64)> = r.clone().map(|i| (id, i as u64)).collect();
        attack::run_restart(
            model, &x0, &labels, None, Goal::Xent, budget, start, cfg.steps, cfg.alpha, &keys, cfg.seed,
        )
    })?;

    let x = one.images.clone();
    let mut set = MaximaSet {
        example_index: id,
        label,
        deltas: Vec::with_capacity(n_restarts),
        losses: Vec::with_capacity(n_restarts),
        trajectories: Vec::with_capacity(n_restarts),
        natural_loss: 0.0,
        natural_grad: vec![],
        x,
    };
    for run in runs {
        for i in 0..run.values.len() {
            let d: Vec<f64> = run.x.row(i).iter().zip(set.x.data()).map(|(a, b)| a - b).collect();
            set.deltas.push(d);
            set.losses.push(run.values[i]);
            set.trajectories.push(run.trajectory[i].clone());
        }
    }
    check_maxima(&set, budget)?;
    let (nl, g) = attack::input_gradient(model, &one)?;
    set.natural_loss = nl[0];
    set.natural_grad = g.into_data();
    Ok(set)
}

/// Independent re-check that every maximum is inside the budget.
fn check_maxima(m: &MaximaSet, budget: &PerturbationBudget) -> Result<()> {
    for (r, (d, l)) in m.deltas.iter().zip(&m.losses).enumerate() {
        let size = match budget.norm {
            Norm::Linf => d.iter().fold(0.0f64, |a, v| a.max(v.abs())),
            Norm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        let outside_box = m
            .x
            .data()
            .iter()
            .zip(d)
            .any(|(x, v)| x + v < budget.lo - attack::BUDGET_TOL || x + v > budget.hi + attack::BUDGET_TOL);
        if size > budget.epsilon + attack::BUDGET_TOL || outside_box || !l.is_finite() {
            return Err(Error::InvalidBudget(format!(
                "restart {r}: |δ| = {size}, box violated: {outside_box}, loss {l}"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStats {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    /// Losses above `median + 5·iqr`.
    pub outliers: usize,
}

/// Inverse empirical CDF: the smallest sample `v` with `F(v) ≥ p`.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Summary of the final losses. Quartiles use the inverse empirical CDF.
pub fn concentration_stats(losses: &[f64]) -> Result<ConcentrationStats> {
    if losses.is_empty() {
        return Err(Error::InsufficientData("no losses".into()));
    }
    let mut s = losses.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let fence = median + 5.0 * iqr;
    Ok(ConcentrationStats {
        n: s.len(),
        min: s[0],
        max: s[s.len() - 1],
        median,
        q1,
        q3,
        iqr,
        outliers: s.iter().filter(|&&v| v > fence).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    /// Angle between `δ*_i` and `δ*_j` seen from the natural point; `None`
    /// when either is zero.
    pub angle_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub pairs: Vec<PairStat>,
    pub mean_distance: f64,
    pub mean_angle: f64,
    pub baseline: Vec<PairStat>,
    pub baseline_mean_distance: f64,
    pub baseline_mean_angle: f64,
    pub baseline_mean_sq_distance: f64,
}

impl Geometry {
    pub fn write_pairs_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "i,j,distance,angle_deg")?;
        for p in &self.pairs {
            let a = p.angle_deg.map(|a| a.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{a}", p.i, p.j, p.distance)?;
        }
        Ok(())
    }
}

/// Analytic `E‖u − v‖₂²` for independent uniform points of the ℓ∞ ball.
pub fn linf_expected_sq_distance(d: usize, eps: f64) -> f64 {
    2.0 * d as f64 * eps * eps / 3.0
}

/// A uniform draw from the norm ball alone (no pixel box).
fn ball_point(d: usize, budget: &PerturbationBudget, rng: &mut seed::Rng) -> Vec<f64> {
    let eps = budget.epsilon;
    let mut v: Vec<f64> = (0..d)
        .map(|_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 })
        .collect();
    if budget.norm == Norm::L2 {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > eps {
            v.iter_mut().for_each(|x| *x *= eps / n);
        }
    }
    v
}

fn pair_stat(i: usize, j: usize, a: &[f64], b: &[f64]) -> PairStat {
    let distance = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    PairStat {
        i,
        j,
        distance,
        angle_deg: angle_deg(a, b),
    }
}

/// Distances and angles between `n_samples` pairs of uniform ball points.
pub fn random_pair_baseline(d: usize, budget: &PerturbationBudget, n_samples: usize, seed: u64) -> Vec<PairStat> {
    let mut rng = seed::stream(seed, &[tag::BASELINE]);
    (0..n_samples)
        .map(|s| {
            let u = ball_point(d, budget, &mut rng);
            let v = ball_point(d, budget, &mut rng);
            pair_stat(s, s, &u, &v)
        })
        .collect()
}

fn pair_means(p: &[PairStat]) -> (f64, f64, f64) {
    let n = p.len() as f64;
    let dist = p.iter().map(|s| s.distance).sum::<f64>() / n;
    let sq = p.iter().map(|s| s.distance * s.distance).sum::<f64>() / n;
    let angles: Vec<f64> = p.iter().filter_map(|s| s.angle_deg).collect();
    let ang = angles.iter().sum::<f64>() / angles.len() as f64;
    (dist, ang, sq)
}

/// Pairwise distances and angles between the maxima (all pairs, or a
/// seeded sample of `max_pairs`), with a random-pair baseline of the same
/// size.
pub fn maxima_geometry(m: &MaximaSet, budget: &PerturbationBudget, max_pairs: usize, seed: u64) -> Result<Geometry> {
    let n = m.len();
    if n < 2 {
        return Err(Error::InsufficientData("maxima_geometry needs two maxima".into()));
    }
    let total = n * (n - 1) / 2;
    let index_pairs: Vec<(usize, usize)> = if total <= max_pairs {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = seed::stream(seed, &[tag::PAIRS, m.example_index]);
        (0..max_pairs)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect()
    };
    let pairs: Vec<PairStat> = index_pairs
        .iter()
        .map(|&(i, j)| pair_stat(i, j, &m.deltas[i], &m.deltas[j]))
        .collect();
    let baseline = random_pair_baseline(m.deltas[0].len(), budget, pairs.len(), seed);
    let (md, ma, _) = pair_means(&pairs);
    let (bd, ba, bsq) = pair_means(&baseline);
    Ok(Geometry {
        pairs,
        mean_distance: md,
        mean_angle: ma,
        baseline,
        baseline_mean_distance: bd,
        baseline_mean_angle: ba,
        baseline_mean_sq_distance: bsq,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentProfile {
    pub ts: Vec<f64>,
    pub losses: Vec<f64>,
    pub midpoint_loss: f64,
    /// Loss at one fresh uniform point of the budget.
    pub random_point_loss: f64,
}

impl SegmentProfile {
    /// Whether no interior point exceeds the larger endpoint loss.
    pub fn max_at_endpoint(&self, tol: f64) -> bool {
        let n = self.losses.len();
        let ends = self.losses[0].max(self.losses[n - 1]);
        self.losses.iter().all(|&l| l <= ends + tol)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,loss")?;
        for (t, l) in self.ts.iter().zip(&self.losses) {
            writeln!(w, "{t},{l}")?;
        }
        Ok(())
    }
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Loss along `x + (1−t)δ1 + tδ2` for `n_points` evenly spaced `t`.
#[allow(clippy::too_many_arguments)]
pub fn segment_probe(
    model: &Model,
    x: &Tensor,
    label: usize,
    d1: &[f64],
    d2: &[f64],
    n_points: usize,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<SegmentProfile> {
    if n_points < 3 {
        return Err(Error::InvalidArgument("segment_probe needs at least three points".into()));
    }
    if x.shape()[0] != 1 || d1.len() != x.len() || d2.len() != x.len() {
        return Err(Error::shape("segment_probe", "one example and two matching perturbations"));
    }
    let x0 = x.data();
    let at = |d: &[f64]| Tensor::new(x.shape().to_vec(), x0.iter().zip(d).map(|(a, b)| a + b).collect());
    let p1 = at(d1)?;
    let p2 = at(d2)?;
    attack::verify_budget(x, &p1, budget, attack::BUDGET_TOL)?;
    attack::verify_budget(x, &p2, budget, attack::BUDGET_TOL)?;

    let mut ts = grid(n_points);
    ts.push(0.5);
    let rows: Vec<f64> = ts
        .iter()
        .flat_map(|&t| (0..x.len()).map(move |i| x0[i] + (1.0 - t) * d1[i] + t * d2[i]))
        .collect();
    let mut shape = x.shape().to_vec();
    shape[0] = ts.len();
    let mut random_rng = seed::stream(seed, &[tag::PROBE]);
    let r = budget.random_point(x0, &mut random_rng);
    let mut all = rows;
    all.extend_from_slice(&r);
    shape[0] += 1;
    let losses = ops::xent_rows(&model.forward(&Tensor::new(shape, all)?)?, &vec![label; ts.len() + 1])?;
    Ok(SegmentProfile {
        ts: ts[..n_points].to_vec(),
        losses: losses[..n_points].to_vec(),
        midpoint_loss: losses[n_points],
        random_point_loss: losses[n_points + 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionProfile {
    pub ts: Vec<f64>,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl DirectionProfile {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,loss_source,loss_target")?;
        for ((t, s), g) in self.ts.iter().zip(&self.source).zip(&self.target) {
            writeln!(w, "{t},{s},{g}")?;
        }
        Ok(())
    }
}

/// Both models' losses along `x + t(x_adv − x)`, `t ∈ [0, 1]`.
pub fn direction_profile(
    source: &Model,
    target: &Model,
    x: &Tensor,
    x_adv: &Tensor,
    label: usize,
    n_points: usize,
) -> Result<DirectionProfile> {
    if source.spec.input != target.spec.input || source.num_classes() != target.num_classes() {
        return Err(Error::IncompatibleModels(format!(
            "{:?} vs {:?}",
            source.spec.input, target.spec.input
        )));
    }
    if n_points < 2 {
        return Err(Error::InvalidArgument("direction_profile needs at least two points".into()));
    }
    let ts = grid(n_points);
    let labels = [label];
    let col = |m: &Model| -> Result<Vec<f64>> {
        Ok(crate::eval::losses_along(m, x, x_adv, &labels, &ts)?
            .into_iter()
            .map(|v| v[0])
            .collect())
    };
    Ok(DirectionProfile {
        source: col(source)?,
        target: col(target)?,
        ts,
    })
}
