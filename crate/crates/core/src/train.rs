//! The outer minimization: mini-batch SGD with momentum on natural, FGSM- or
//! PGD-perturbed batches.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackKind, PerturbationBudget};
use crate::data::{epoch_batches, Batch, Dataset};
use crate::nn::{Model, ModelParams, ModelSpec};
use crate::seed::{self, tag};
use crate::tensor::Tensor;
use crate::{eval, par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Natural,
    Fgsm,
    Pgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Training adversary for the `pgd` regime; restarts are always 1.
    pub attack: AttackConfig,
    pub budget: PerturbationBudget,
    pub epochs: usize,
    pub batch_size: usize,
    /// Piecewise-constant learning rate: `(first epoch, lr)` pairs.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub seed: u64,
    /// Held-out examples scored at the end of each epoch (0 disables).
    pub monitor_examples: usize,
    /// Epochs over which the training ε grows linearly from 0 to the budget,
    /// step by step (0 disables).
    pub epsilon_ramp_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Pgd,
            attack: desk_profile(),
            budget: PerturbationBudget {
                norm: attack::Norm::Linf,
                epsilon: 0.3,
                lo: 0.0,
                hi: 1.0,
            },
            epochs: 1,
            batch_size: 50,
            lr_schedule: vec![(0, 0.01)],
            momentum: 0.9,
            seed: 0,
            monitor_examples: 0,
            epsilon_ramp_epochs: 0,
        }
    }
}

/// Training adversary at desk scale: 20 steps of 0.02 from a random start.
pub fn desk_profile() -> AttackConfig {
    AttackConfig::pgd(20, 0.02, 1, 0)
}

/// Full-strength training adversary: 40 steps of 0.01 from a random start.
pub fn full_profile() -> AttackConfig {
    AttackConfig::pgd(40, 0.01, 1, 0)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidTrain("batch_size must be >= 1".into()));
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return Err(Error::InvalidTrain("lr_schedule must start at epoch 0".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidTrain("lr_schedule epochs must be increasing".into()));
        }
        if let Some(&(e, lr)) = self.lr_schedule.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidTrain(format!("lr {lr} at epoch {e} must be > 0")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidTrain(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        self.budget.validate()?;
        if self.regime == Regime::Pgd {
            if self.attack.kind != AttackKind::Pgd {
                return Err(Error::InvalidTrain("pgd regime needs a pgd attack config".into()));
            }
            self.attack.validate()?;
        }
        Ok(())
    }

    /// Training ε at optimizer step `step` given `per_epoch` steps per epoch.
    pub fn epsilon_at(&self, step: usize, per_epoch: usize) -> f64 {
        let ramp = self.epsilon_ramp_epochs * per_epoch;
        if step >= ramp {
            self.budget.epsilon
        } else {
            self.budget.epsilon * (step + 1) as f64 / ramp as f64
        }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map(|&(_, lr)| lr)
            .expect("validated schedule starts at 0")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub natural_accuracy: Option<f64>,
    pub adversarial_accuracy: Option<f64>,
}

/// One entry per optimizer step plus per-epoch summaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Mean batch loss over the steps of `epoch`.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Step log as CSV (`step,epoch,lr,epsilon,loss`).
    pub fn write_steps_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,epoch,lr,epsilon,loss")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{},{}", s.step, s.epoch, s.lr, s.epsilon, s.loss)?;
        }
        Ok(())
    }
}

/// Momentum state owned by the trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity(pub Vec<Tensor>);

impl Velocity {
    pub fn zeros(params: &ModelParams) -> Self {
        Self(params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }
}

/// `v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    if grads.len() != params.tensors.len() || velocity.0.len() != params.tensors.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} params, {} grads, {} velocities",
                params.tensors.len(),
                grads.len(),
                velocity.0.len()
            ),
        ));
    }
    for ((p, g), v) in params.tensors.iter_mut().zip(grads).zip(velocity.0.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Mean cross-entropy over `x` and its parameter gradient. The batch is cut
/// into fixed chunks whose gradients are combined in chunk order.
pub fn batch_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let n = labels.len();
    let ranges = par::chunk_ranges(n, attack::CHUNK);
    if ranges.len() == 1 {
        return model.param_gradient(x, labels);
    }
    let parts = par::try_map(&ranges, |r| {
        let (l, g) = model.param_gradient(&x.rows(r.clone()), &labels[r.clone()])?;
        Ok::<_, Error>((r.len() as f64 / n as f64, l, g))
    })?;
    let mut loss = 0.0;
    let mut acc: Vec<Vec<f64>> = model.params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    for (w, l, g) in parts {
        loss += w * l;
        for (a, t) in acc.iter_mut().zip(&g) {
            a.iter_mut().zip(t.data()).for_each(|(a, b)| *a += w * b);
        }
    }
    let grads = acc
        .into_iter()
        .zip(&model.params.tensors)
        .map(|(d, t)| Tensor::new(t.shape().to_vec(), d))
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

/// Perturbs the batch with the regime's adversary.
pub fn perturb(model: &Model, batch: &Batch, regime: Regime, budget: &PerturbationBudget, cfg: &AttackConfig) -> Result<Tensor> {
    Ok(match regime {
        Regime::Natural => batch.images.clone(),
        Regime::Fgsm => attack::fgsm(model, batch, budget)?.x_adv,
        Regime::Pgd => {
            let cfg = AttackConfig { restarts: 1, ..cfg.clone() };
            attack::pgd(model, batch, budget, &cfg)?.x_adv
        }
    })
}

/// Danskin gradient: the mean parameter gradient at the attack's
/// perturbed batch. Returns the loss there too.
pub fn adversarial_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch,
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let model = Model::new(spec.clone(), params.clone())?;
    let regime = match cfg.kind {
        AttackKind::Fgsm => Regime::Fgsm,
        AttackKind::Pgd => Regime::Pgd,
        other => {
            return Err(Error::InvalidTrain(format!("{other:?} is not a training adversary")));
        }
    };
    let x = perturb(&model, batch, regime, budget, cfg)?;
    batch_gradient(&model, &x, &batch.labels)
}

/// Mini-batch SGD over `data` for `cfg.epochs` epochs. When `monitor` is
/// given, the first `cfg.monitor_examples` of it are scored after every
/// epoch, naturally and under the training adversary.
pub fn train(
    spec: &ModelSpec,
    init: ModelParams,
    data: &Dataset,
    monitor: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let mut model = Model::new(spec.clone(), init)?;
    let mut velocity = Velocity::zeros(&model.params);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let attack_cfg = AttackConfig {
            restarts: 1,
            seed: seed::derive(cfg.seed, &[tag::EPOCH, epoch as u64]),
            ..cfg.attack.clone()
        };
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let per_epoch = batches.len();
        for idx in batches {
            let batch = data.batch(&idx);
            let budget = PerturbationBudget {
                epsilon: cfg.epsilon_at(step, per_epoch),
                ..cfg.budget
            };
            let x = perturb(&model, &batch, cfg.regime, &budget, &attack_cfg)?;
            let (loss, grads) = match batch_gradient(&model, &x, &batch.labels) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            sgd_step(&mut model.params, &grads, lr, cfg.momentum, &mut velocity)?;
            if model.params.tensors.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { step, loss });
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                epsilon: budget.epsilon,
                loss,
            });
            step += 1;
        }
        let (mut nat, mut adv) = (None, None);
        if let Some(m) = monitor.filter(|_| cfg.monitor_examples > 0) {
            let held = m.head(cfg.monitor_examples).all();
            nat = Some(eval::natural_accuracy(&model, &held)?);
            let mon_cfg = AttackConfig {
                restarts: 1,
                seed: seed::derive(cfg.seed, &[tag::PROBE, epoch as u64]),
                ..cfg.attack.clone()
            };
            let regime = if cfg.regime == Regime::Fgsm { Regime::Fgsm } else { Regime::Pgd };
            let x = perturb(&model, &held, regime, &cfg.budget, &mon_cfg)?;
            adv = Some(eval::natural_accuracy(&model, &held.with_images(x))?);
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: log.epoch_mean(epoch).unwrap_or(f64::NAN),
            natural_accuracy: nat,
            adversarial_accuracy: adv,
        });
    }
    Ok((model.params, log))
}
