//! Robustness measurement: accuracy under attack, epsilon sweeps, transfer
//! matrices, gradient-angle histograms and weight inspection.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, Norm, PerturbationBudget};
use crate::data::Batch;
use crate::nn::{Layer, Model};
use crate::seed::{self, tag};
use crate::tensor::{ops, Tensor};
use crate::{Error, Result};

/// Filters whose largest absolute weight is at or below this are unused.
pub const UTILIZED_THRESHOLD: f64 = 1e-3;
/// A filter is thresholding-like when its top weight carries more than this
/// share of its ℓ1 mass.
pub const DOMINANCE_THRESHOLD: f64 = 0.9;

/// Fraction of rows the model classifies correctly.
pub fn natural_accuracy(model: &Model, batch: &Batch) -> Result<f64> {
    let pred = model.predict(&batch.images)?;
    Ok(count_correct(&pred, &batch.labels) as f64 / batch.len() as f64)
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// One example's fate under one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub example_index: u64,
    pub attack: String,
    pub source: String,
    pub target: String,
    pub natural_pred: usize,
    pub adv_pred: usize,
    pub correct: bool,
}

/// One cell of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub attack: String,
    pub source: String,
    pub target: String,
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    #[serde(skip)]
    pub verdicts: Vec<Verdict>,
}

impl EvalReport {
    pub fn row(&self, attack: &str, source: &str, target: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.attack == attack && r.source == source && r.target == target)
    }

    /// Rebuilds every row from the verdicts alone.
    pub fn recount(&self) -> Vec<EvalRow> {
        self.rows
            .iter()
            .map(|r| {
                let vs: Vec<&Verdict> = self
                    .verdicts
                    .iter()
                    .filter(|v| v.attack == r.attack && v.source == r.source && v.target == r.target)
                    .collect();
                let correct = vs.iter().filter(|v| v.correct).count();
                EvalRow {
                    correct,
                    n: vs.len(),
                    accuracy: correct as f64 / vs.len() as f64,
                    ..r.clone()
                }
            })
            .collect()
    }

    pub fn write_verdicts_jsonl(&self, mut w: impl Write) -> Result<()> {
        for v in &self.verdicts {
            serde_json::to_writer(&mut w, v)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// A model with the label used for it in reports.
#[derive(Clone, Copy, Debug)]
pub struct Named<'a> {
    pub id: &'a str,
    pub model: &'a Model,
}

fn check_compatible(a: &Model, b: &Model) -> Result<()> {
    if a.spec.input != b.spec.input || a.num_classes() != b.num_classes() {
        return Err(Error::IncompatibleModels(format!(
            "input {:?}/{} classes vs {:?}/{} classes",
            a.spec.input,
            a.num_classes(),
            b.spec.input,
            b.num_classes()
        )));
    }
    Ok(())
}

/// Crafts adversarial examples with `source` gradients and scores them on
/// `target`; `source == target` is the white-box case.
pub fn robust_accuracy(
    target: Named,
    source: Named,
    batch: &Batch,
    cfg: &AttackConfig,
    budget: &PerturbationBudget,
) -> Result<EvalReport> {
    check_compatible(target.model, source.model)?;
    let out = attack::run(source.model, batch, budget, cfg)?;
    score(target, source.id, &cfg.label(), batch, &out.x_adv)
}

fn score(target: Named, source: &str, attack: &str, batch: &Batch, x_adv: &Tensor) -> Result<EvalReport> {
    let nat = target.model.predict(&batch.images)?;
    let adv = target.model.predict(x_adv)?;
    let verdicts: Vec<Verdict> = (0..batch.len())
        .map(|i| Verdict {
            example_index: batch.ids[i],
            attack: attack.to_string(),
            source: source.to_string(),
            target: target.id.to_string(),
            natural_pred: nat[i],
            adv_pred: adv[i],
            correct: adv[i] == batch.labels[i],
        })
        .collect();
    let correct = count_correct(&adv, &batch.labels);
    Ok(EvalReport {
        rows: vec![EvalRow {
            attack: attack.to_string(),
            source: source.to_string(),
            target: target.id.to_string(),
            accuracy: correct as f64 / batch.len() as f64,
            correct,
            n: batch.len(),
        }],
        verdicts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub alpha: f64,
    pub accuracy: f64,
    pub correct: usize,
}

/// PGD accuracy at each ε (ascending) with `α = 2.5·ε/steps`. Each attack
/// also considers the previous ε's adversarial example, so the curve is
/// exactly non-increasing.
pub fn epsilon_sweep(
    model: &Model,
    batch: &Batch,
    norm: Norm,
    epsilons: &[f64],
    steps: usize,
    restarts: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if epsilons.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("epsilons must be ascending".into()));
    }
    let mut prev = batch.images.clone();
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let budget = PerturbationBudget::new(norm, eps)?;
        let (x_adv, alpha) = if eps == 0.0 {
            (batch.images.clone(), 0.0)
        } else {
            let alpha = 2.5 * eps / steps as f64;
            let cfg = AttackConfig::pgd(steps, alpha, restarts, seed);
            (attack::pgd_with_prefix(model, batch, &budget, &cfg, &prev)?.x_adv, alpha)
        };
        let correct = count_correct(&model.predict(&x_adv)?, &batch.labels);
        out.push(SweepPoint {
            epsilon: eps,
            alpha,
            accuracy: correct as f64 / batch.len() as f64,
            correct,
        });
        prev = x_adv;
    }
    Ok(out)
}

/// Source × target accuracy grid for every attack. Adversarial examples are
/// crafted once per (attack, source) and scored on every target.
pub fn transfer_matrix(
    models: &[Named],
    attacks: &[AttackConfig],
    budget: &PerturbationBudget,
    batch: &Batch,
) -> Result<EvalReport> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("transfer_matrix needs at least two models".into()));
    }
    for m in &models[1..] {
        check_compatible(models[0].model, m.model)?;
    }
    let mut report = EvalReport::default();
    for cfg in attacks {
        for src in models {
            let x_adv = attack::run(src.model, batch, budget, cfg)?.x_adv;
            for tgt in models {
                let r = score(*tgt, src.id, &cfg.label(), batch, &x_adv)?;
                report.rows.extend(r.rows);
                report.verdicts.extend(r.verdicts);
            }
        }
    }
    Ok(report)
}

/// Fixed-width histogram on `[lo, hi]`; values outside are clamped into the
/// edge bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let w = (hi - lo) / counts.len() as f64;
        for &v in values {
            let b = (((v - lo) / w).floor().max(0.0) as usize).min(counts.len() - 1);
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }

    /// Range-covering histogram of `values`.
    pub fn auto(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if lo == hi {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        Self::new(values, bins, lo, hi)
    }

    /// `(lo, hi, count)` per bin.
    pub fn bins(&self) -> Vec<(f64, f64, usize)> {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w, c))
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "lo,hi,count")?;
        for (lo, hi, c) in self.bins() {
            writeln!(w, "{lo},{hi},{c}")?;
        }
        Ok(())
    }
}

/// Angle in degrees between two vectors, `None` if either is zero.
pub fn angle_deg(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // half-angle form stays accurate near 0° and 180°, unlike acos
    let (mut d, mut s) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        d += (u - v) * (u - v);
        s += (u + v) * (u + v);
    }
    Some((2.0 * d.sqrt().atan2(s.sqrt())).to_degrees())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleStudy {
    /// Per-example angle between the two models' input gradients.
    pub angles: Vec<f64>,
    /// Angles between model A's gradients at random example pairs.
    pub baseline: Vec<f64>,
    /// Examples or pairs skipped for a zero gradient.
    pub skipped: usize,
    pub histogram: Histogram,
    pub baseline_histogram: Histogram,
}

impl AngleStudy {
    pub fn mean(&self) -> f64 {
        mean(&self.angles)
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(&self.baseline)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Angles between `∇ₓL_a` and `∇ₓL_b` at each example, with a baseline of
/// `∇ₓL_a` at random pairs of distinct examples.
pub fn gradient_angle_histogram(a: &Model, b: &Model, batch: &Batch, bins: usize, seed: u64) -> Result<AngleStudy> {
    check_compatible(a, b)?;
    let (_, ga) = attack::input_gradient(a, batch)?;
    let (_, gb) = attack::input_gradient(b, batch)?;
    let n = batch.len();
    let mut skipped = 0;
    let mut angles = Vec::with_capacity(n);
    for i in 0..n {
        match angle_deg(ga.row(i), gb.row(i)) {
            Some(t) => angles.push(t),
            None => skipped += 1,
        }
    }
    let mut baseline = Vec::with_capacity(n);
    if n >= 2 {
        let mut rng = seed::stream(seed, &[tag::PAIRS]);
        for i in 0..n {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            match angle_deg(ga.row(i), ga.row(j)) {
                Some(t) => baseline.push(t),
                None => skipped += 1,
            }
        }
    }
    Ok(AngleStudy {
        histogram: Histogram::new(&angles, bins, 0.0, 180.0),
        baseline_histogram: Histogram::new(&baseline, bins, 0.0, 180.0),
        angles,
        baseline,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub first_layer_filters: usize,
    /// Filters with `max|w| > UTILIZED_THRESHOLD`.
    pub utilized_filters: usize,
    /// Top-weight share of each filter's ℓ1 mass (0 for all-zero filters).
    pub dominant_ratio: Vec<f64>,
    pub thresholding_filters: usize,
    /// Biases of the logit layer.
    pub class_biases: Vec<f64>,
    pub bias_spread: f64,
    /// One histogram per parameter tensor.
    pub histograms: Vec<Histogram>,
}

/// Census of the first conv layer and the logit biases.
pub fn inspect_weights(model: &Model, bins: usize) -> Result<WeightReport> {
    let layers = &model.spec.layers;
    if !layers.iter().any(|l| matches!(l, Layer::Conv { .. })) || !matches!(layers.last(), Some(Layer::Logits)) {
        return Err(Error::InvalidArgument(
            "inspect_weights needs a conv layer and a final logit layer".into(),
        ));
    }
    let k = &model.params.tensors[0];
    let co = *k.shape().last().unwrap();
    let per = k.len() / co;
    let mut utilized = 0;
    let mut ratios = Vec::with_capacity(co);
    for f in 0..co {
        let w: Vec<f64> = (0..per).map(|i| k.data()[i * co + f].abs()).collect();
        let top = w.iter().cloned().fold(0.0, f64::max);
        let l1: f64 = w.iter().sum();
        if top > UTILIZED_THRESHOLD {
            utilized += 1;
        }
        ratios.push(if l1 > 0.0 { top / l1 } else { 0.0 });
    }
    let biases = model.params.tensors.last().unwrap().data().to_vec();
    let spread = biases.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - biases.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(WeightReport {
        first_layer_filters: co,
        utilized_filters: utilized,
        thresholding_filters: ratios.iter().filter(|&&r| r > DOMINANCE_THRESHOLD).count(),
        dominant_ratio: ratios,
        class_biases: biases,
        bias_spread: spread,
        histograms: model.params.tensors.iter().map(|t| Histogram::auto(t.data(), bins)).collect(),
    })
}

/// Per-example cross-entropy of `model` along `x + t(x_adv − x)`.
pub fn losses_along(model: &Model, x: &Tensor, x_adv: &Tensor, labels: &[usize], ts: &[f64]) -> Result<Vec<Vec<f64>>> {
    ts.iter()
        .map(|&t| {
            let p = x.zip_map(x_adv, |a, b| a + t * (b - a))?;
            ops::xent_rows(&model.forward(&p)?, labels)
        })
        .collect()
}
