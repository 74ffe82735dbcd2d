//! The inner maximization: projections, FGSM, multi-restart PGD, the CW/CW+
//! margin objective, targeted PGD and R+FGSM.
//!
//! All attacks work on a [`Batch`] and treat its rows independently. Rows are
//! processed in fixed-size chunks (in parallel under the `parallel`
//! feature); the random start of row `i` in restart `r` is drawn from the
//! stream `(seed, id_i, r)`, so outcomes do not depend on chunking or thread
//! count.

mod budget;
mod runner;

pub use budget::{max_violation, project, verify_budget, Norm, PerturbationBudget};
pub(crate) use runner::{probe, run_restart, Goal, Start};

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::nn::Model;
use crate::tensor::{ops, Tensor};
use crate::{par, Error, Result};

/// Rows per tape when attacking a batch.
pub const CHUNK: usize = 50;

/// Post-hoc tolerance for budget membership.
pub const BUDGET_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    FgsmRandom,
    Pgd,
    CwPgd,
    TargetedPgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Highest non-true logit at the natural input.
    RunnerUp,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub steps: usize,
    pub alpha: f64,
    pub restarts: usize,
    pub random_start: bool,
    /// CW confidence; only read by `cw_pgd`.
    pub kappa: f64,
    /// Only read by `targeted_pgd`.
    pub target_rule: TargetRule,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            steps: 40,
            alpha: 0.01,
            restarts: 1,
            random_start: true,
            kappa: 0.0,
            target_rule: TargetRule::RunnerUp,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn pgd(steps: usize, alpha: f64, restarts: usize, seed: u64) -> Self {
        Self {
            steps,
            alpha,
            restarts,
            seed,
            ..Self::default()
        }
    }

    pub fn fgsm() -> Self {
        Self {
            kind: AttackKind::Fgsm,
            steps: 1,
            restarts: 1,
            random_start: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidAttack("steps must be >= 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidAttack("restarts must be >= 1".into()));
        }
        let needs_alpha = !matches!(self.kind, AttackKind::Fgsm | AttackKind::FgsmRandom);
        if needs_alpha && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidAttack(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidAttack(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }

    /// Short human-readable label, e.g. `pgd-40x1`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => "fgsm".into(),
            AttackKind::FgsmRandom => "fgsm_random".into(),
            AttackKind::Pgd => format!("pgd-{}x{}", self.steps, self.restarts),
            AttackKind::CwPgd => format!("cw{}-{}x{}", self.kappa, self.steps, self.restarts),
            AttackKind::TargetedPgd => format!("targeted-{}x{}", self.steps, self.restarts),
        }
    }
}

/// Result of attacking a batch; every per-example field is indexed like the
/// batch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    /// Max over restarts of the restart-final objective.
    pub final_loss: Vec<f64>,
    /// Per-step objective of the selected restart.
    pub trajectory: Vec<Vec<f64>>,
    pub per_restart_final: Vec<Vec<f64>>,
    /// Whether the selected iterate succeeds on the attacked model.
    pub success: Vec<bool>,
    /// Index of the selected candidate (restarts first, then any prefix
    /// candidate).
    pub selected: Vec<usize>,
    /// ℓ2 steps skipped because the input gradient was exactly zero.
    pub zero_grad_steps: usize,
}

impl AttackOutcome {
    fn concat(parts: Vec<AttackOutcome>) -> Result<AttackOutcome> {
        let x_adv = Tensor::concat(&parts.iter().map(|p| p.x_adv.clone()).collect::<Vec<_>>())?;
        let mut out = AttackOutcome {
            x_adv,
            final_loss: vec![],
            trajectory: vec![],
            per_restart_final: vec![],
            success: vec![],
            selected: vec![],
            zero_grad_steps: 0,
        };
        for p in parts {
            out.final_loss.extend(p.final_loss);
            out.trajectory.extend(p.trajectory);
            out.per_restart_final.extend(p.per_restart_final);
            out.success.extend(p.success);
            out.selected.extend(p.selected);
            out.zero_grad_steps += p.zero_grad_steps;
        }
        Ok(out)
    }
}

/// Runs whichever attack `cfg.kind` names.
pub fn run(model: &Model, batch: &Batch, budget: &PerturbationBudget, cfg: &AttackConfig) -> Result<AttackOutcome> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, batch, budget),
        AttackKind::FgsmRandom => fgsm_random(model, batch, budget, cfg.seed),
        AttackKind::Pgd => pgd(model, batch, budget, cfg),
        AttackKind::CwPgd => cw_pgd(model, batch, budget, cfg),
        AttackKind::TargetedPgd => targeted_pgd(model, batch, budget, cfg),
    }
}

/// One signed-gradient step of size ε from the natural input.
pub fn fgsm(model: &Model, batch: &Batch, budget: &PerturbationBudget) -> Result<AttackOutcome> {
    require_linf(budget, "fgsm")?;
    let plan = Plan {
        goal: Goal::Xent,
        start: Start::Zero,
        steps: 1,
        alpha: budget.epsilon,
        restarts: 1,
        seed: 0,
    };
    execute(model, batch, budget, &plan, None, None)
}

/// R+FGSM: a sign-of-uniform step of ε/2, then a gradient-sign step of ε/2.
pub fn fgsm_random(model: &Model, batch: &Batch, budget: &PerturbationBudget, seed: u64) -> Result<AttackOutcome> {
    require_linf(budget, "fgsm_random")?;
    let half = budget.epsilon / 2.0;
    let plan = Plan {
        goal: Goal::Xent,
        start: Start::SignNoise(half),
        steps: 1,
        alpha: half,
        restarts: 1,
        seed,
    };
    execute(model, batch, budget, &plan, None, None)
}

/// Multi-restart PGD ascending the cross-entropy.
pub fn pgd(model: &Model, batch: &Batch, budget: &PerturbationBudget, cfg: &AttackConfig) -> Result<AttackOutcome> {
    expect_kind(cfg, AttackKind::Pgd)?;
    execute(model, batch, budget, &Plan::from_cfg(cfg, Goal::Xent), None, None)
}

/// PGD where the given points (already inside the budget) join the restart
/// candidates. Used to make epsilon sweeps exactly monotone.
pub fn pgd_with_prefix(
    model: &Model,
    batch: &Batch,
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
    prefix: &Tensor,
) -> Result<AttackOutcome> {
    expect_kind(cfg, AttackKind::Pgd)?;
    verify_budget(&batch.images, prefix, budget, BUDGET_TOL)?;
    execute(model, batch, budget, &Plan::from_cfg(cfg, Goal::Xent), None, Some(prefix))
}

/// PGD ascending the clipped margin `min(max_{i≠y} z_i − z_y, κ)`.
/// Success requires a positive margin of at least κ.
pub fn cw_pgd(model: &Model, batch: &Batch, budget: &PerturbationBudget, cfg: &AttackConfig) -> Result<AttackOutcome> {
    expect_kind(cfg, AttackKind::CwPgd)?;
    execute(model, batch, budget, &Plan::from_cfg(cfg, Goal::Cw(cfg.kappa)), None, None)
}

/// PGD descending the cross-entropy of a target class. The reported
/// objective is the negated target cross-entropy.
pub fn targeted_pgd(model: &Model, batch: &Batch, budget: &PerturbationBudget, cfg: &AttackConfig) -> Result<AttackOutcome> {
    expect_kind(cfg, AttackKind::TargetedPgd)?;
    let targets = choose_targets(model, batch, cfg.target_rule)?;
    execute(model, batch, budget, &Plan::from_cfg(cfg, Goal::Targeted), Some(&targets), None)
}

/// Target class per row under `rule`.
pub fn choose_targets(model: &Model, batch: &Batch, rule: TargetRule) -> Result<Vec<usize>> {
    match rule {
        TargetRule::Fixed(c) => {
            if c >= model.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: model.num_classes(),
                });
            }
            if batch.labels.contains(&c) {
                return Err(Error::TargetEqualsLabel(c));
            }
            Ok(vec![c; batch.len()])
        }
        TargetRule::RunnerUp => {
            let logits = model.forward(&batch.images)?;
            Ok(batch
                .labels
                .iter()
                .enumerate()
                .map(|(i, &y)| ops::runner_up(logits.row(i), y))
                .collect())
        }
    }
}

/// Cosine between the perturbation `x_adv − x` and a gradient.
pub fn gradient_alignment(x: &Tensor, x_adv: &Tensor, grad: &Tensor) -> Result<f64> {
    if x.shape() != x_adv.shape() || x.len() != grad.len() {
        return Err(Error::shape(
            "gradient_alignment",
            format!("{:?}, {:?}, {:?}", x.shape(), x_adv.shape(), grad.shape()),
        ));
    }
    let delta: Vec<f64> = x_adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    let nd = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ng = grad.norm_l2();
    if nd == 0.0 || ng == 0.0 {
        return Err(Error::ZeroVector("gradient_alignment"));
    }
    let dot: f64 = delta.iter().zip(grad.data()).map(|(a, b)| a * b).sum();
    Ok(dot / (nd * ng))
}

/// Input gradient of the (unscaled, per-example) cross-entropy.
pub fn input_gradient(model: &Model, batch: &Batch) -> Result<(Vec<f64>, Tensor)> {
    let p = probe(model, &batch.images, &batch.labels, None, Goal::Xent, true)?;
    Ok((p.values, p.grad.expect("gradient requested")))
}

/// Per-example cross-entropy at `x`.
pub fn losses_at(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    ops::xent_rows(&model.forward(x)?, labels)
}

fn require_linf(budget: &PerturbationBudget, op: &str) -> Result<()> {
    budget.validate()?;
    if budget.norm != Norm::Linf {
        return Err(Error::InvalidAttack(format!("{op} is defined for l-inf budgets only")));
    }
    Ok(())
}

fn expect_kind(cfg: &AttackConfig, kind: AttackKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(Error::InvalidAttack(format!(
            "config kind {:?} passed to {kind:?} attack",
            cfg.kind
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Plan {
    goal: Goal,
    start: Start,
    steps: usize,
    alpha: f64,
    restarts: usize,
    seed: u64,
}

impl Plan {
    fn from_cfg(cfg: &AttackConfig, goal: Goal) -> Self {
        Self {
            goal,
            start: if cfg.random_start { Start::Uniform } else { Start::Zero },
            steps: cfg.steps,
            alpha: cfg.alpha,
            restarts: cfg.restarts,
            seed: cfg.seed,
        }
    }
}

fn execute(
    model: &Model,
    batch: &Batch,
    budget: &PerturbationBudget,
    plan: &Plan,
    targets: Option<&[usize]>,
    prefix: Option<&Tensor>,
) -> Result<AttackOutcome> {
    budget.validate()?;
    model.check_input(&batch.images)?;
    let ranges = par::chunk_ranges(batch.len(), CHUNK);
    let parts = par::try_map(&ranges, |range| {
        let chunk = batch.slice(range.clone());
        let t = targets.map(|t| &t[range.clone()]);
        let p = prefix.map(|p| p.rows(range.clone()));
        attack_chunk(model, &chunk, budget, plan, t, p.as_ref())
    })?;
    let out = AttackOutcome::concat(parts)?;
    verify_budget(&batch.images, &out.x_adv, budget, BUDGET_TOL)?;
    Ok(out)
}

fn attack_chunk(
    model: &Model,
    chunk: &Batch,
    budget: &PerturbationBudget,
    plan: &Plan,
    targets: Option<&[usize]>,
    prefix: Option<&Tensor>,
) -> Result<AttackOutcome> {
    let n = chunk.len();
    let mut runs = Vec::with_capacity(plan.restarts + 1);
    let mut zero_grad = 0;
    for r in 0..plan.restarts {
        let keys: Vec<(u64, u64)> = chunk.ids.iter().map(|&id| (id, r as u64)).collect();
        let run = run_restart(
            model,
            &chunk.images,
            &chunk.labels,
            targets,
            plan.goal,
            budget,
            plan.start,
            plan.steps,
            plan.alpha,
            &keys,
            plan.seed,
        )?;
        zero_grad += run.zero_grad;
        runs.push(run);
    }
    if let Some(p) = prefix {
        let pr = probe(model, p, &chunk.labels, targets, plan.goal, false)?;
        runs.push(runner::RestartRun {
            x: p.clone(),
            success: plan.goal.success(&pr.logits, &chunk.labels, targets),
            values: pr.values,
            trajectory: vec![Vec::new(); n],
            zero_grad: 0,
        });
    }

    let row_len = chunk.images.row_len();
    let mut x_adv = Vec::with_capacity(n * row_len);
    let mut out = AttackOutcome {
        x_adv: chunk.images.clone(),
        final_loss: Vec::with_capacity(n),
        trajectory: Vec::with_capacity(n),
        per_restart_final: Vec::with_capacity(n),
        success: Vec::with_capacity(n),
        selected: Vec::with_capacity(n),
        zero_grad_steps: zero_grad,
    };
    for i in 0..n {
        let per: Vec<f64> = runs.iter().map(|r| r.values[i]).collect();
        let best = select(&per, &runs.iter().map(|r| r.success[i]).collect::<Vec<_>>());
        x_adv.extend_from_slice(runs[best].x.row(i));
        out.final_loss.push(per.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        out.trajectory.push(runs[best].trajectory[i].clone());
        out.success.push(runs[best].success[i]);
        out.selected.push(best);
        out.per_restart_final.push(per);
    }
    out.x_adv = Tensor::new(chunk.images.shape().to_vec(), x_adv)?;
    Ok(out)
}

/// Successful candidates beat unsuccessful ones; within a group the highest
/// objective wins, earliest index on ties.
fn select(values: &[f64], success: &[bool]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        let better = match (success[i], success[best]) {
            (true, false) => true,
            (false, true) => false,
            _ => values[i] > values[best],
        };
        if better {
            best = i;
        }
    }
    best
}
