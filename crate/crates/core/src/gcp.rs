//! The pruning loop: sparsify BN scales with weights and statistics frozen,
//! remove the cheapest-to-lose channels until the step budget is met, let the
//! survivors recover, refresh the statistics, repeat; then fine-tune.

use serde::{Deserialize, Serialize};

use crate::cost::{group_alpha, step_budget, total_cost, Objective, ObjectiveKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::{fold_all, importance_scores, rank_channels, ChannelScore, FoldSummary};
use crate::network::{absorb_group_masks, apply_mask, effective_spec, spec_with_widths, LayerId, Model, PruneMask, Trainable};
use crate::tensor::BnMode;
use crate::train::{recalibrate_bn, train, train_epoch, EpochOptions, EpochRecord, Penalty, Sgd, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcpConfig {
    pub objective: ObjectiveKind,
    /// Fraction of the original cost to remove, in (0, 1).
    pub eta: f64,
    pub iterations: usize,
    pub lambda: f64,
    /// How many times λ may double within one regularization phase.
    pub max_lambda_doublings: u32,
    pub epochs_reg: usize,
    pub epochs_rec: usize,
    pub lr_reg: f32,
    pub lr_rec: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub calibration_batches: usize,
    pub finetune: TrainConfig,
    pub seed: u64,
}

impl Default for GcpConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Flops,
            eta: 0.5,
            iterations: 5,
            lambda: 0.3,
            max_lambda_doublings: 5,
            epochs_reg: 1,
            epochs_rec: 1,
            lr_reg: 0.01,
            lr_rec: 0.05,
            momentum: 0.9,
            batch_size: 64,
            calibration_batches: 16,
            finetune: TrainConfig {
                lr: 0.03,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

impl GcpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta must lie in (0, 1), got {}", self.eta));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.finetune.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.calibration_batches == 0 {
            return bad("calibration_batches must be positive".into());
        }
        for (name, lr) in [
            ("lr_reg", self.lr_reg),
            ("lr_rec", self.lr_rec),
            ("finetune.lr", self.finetune.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.finetune.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// One pass of the loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub lambda_doublings: u32,
    /// A stronger λ tried and discarded because it zeroed a whole group.
    pub lambda_rejected: Option<f64>,
    pub budget: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    /// Cost-weighted count of exactly-zero γ-type entries when the
    /// regularization phase ended.
    pub prunable_mass: f64,
    pub fold: FoldSummary,
    /// Mean regularized objective per regularization epoch.
    pub reg_objective: Vec<f64>,
    pub reg_loss: f64,
    pub recovery_loss: Option<f64>,
    pub pruned_per_group: Vec<usize>,
    pub kept_per_group: Vec<usize>,
}

impl IterationRecord {
    pub fn achieved(&self) -> f64 {
        self.cost_before - self.cost_after
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneHistory {
    pub objective: Option<ObjectiveKind>,
    pub eta: f64,
    pub iterations: usize,
    pub original_cost: f64,
    pub max_alpha: f64,
    pub steps: Vec<IterationRecord>,
    pub finetune: Vec<EpochRecord>,
    pub final_cost: Option<f64>,
    /// Set when a phase failed; the records before it are kept.
    pub error: Option<String>,
}

impl PruneHistory {
    pub fn target_cost(&self) -> f64 {
        (1.0 - self.eta) * self.original_cost
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: "history".into(),
            reason: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            path: "history".into(),
            reason: e.to_string(),
        })
    }
}

/// α divided by its mean over all kept group-channels.
pub fn normalize_alpha(alpha: &[f64], widths: &[usize]) -> Result<Vec<f64>> {
    let channels: usize = widths.iter().sum();
    let mass: f64 = alpha.iter().zip(widths).map(|(a, &w)| a * w as f64).sum();
    if channels == 0 || !(mass > 0.0) {
        return Err(Error::Config("channel costs are all zero; nothing to weigh".into()));
    }
    let mean = mass / channels as f64;
    Ok(alpha.iter().map(|a| a / mean).collect())
}

/// How `prune_step` measures what each removal saves.
#[derive(Clone, Copy, Debug)]
pub enum StepCost<'a> {
    /// Fixed α per group, summed.
    Fixed(&'a [f64]),
    /// The exact drop in total cost, recounted after every removal so that
    /// the shrinking neighbours of a pruned group are accounted for.
    Recount(&'a Objective),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneStep {
    pub mask: PruneMask,
    /// (group, channel), in removal order.
    pub removed: Vec<(usize, usize)>,
    pub achieved: f64,
}

/// Picks the lowest-scoring channels until the accumulated saving reaches
/// `budget`. Already pruned channels and the last channel of a group are
/// skipped. Does not touch the model.
pub fn select_channels(model: &Model, scores: &[ChannelScore], cost: StepCost, budget: f64) -> Result<PruneStep> {
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(Error::Input(format!("invalid budget {budget}")));
    }
    let groups = model.group_infos();
    let mut mask = PruneMask::current(model);
    let mut widths: Vec<usize> = model.groups().iter().map(|g| g.kept_count()).collect();
    let recount = |widths: &[usize], obj: &Objective| -> Result<f64> {
        Ok(total_cost(&spec_with_widths(model.spec(), &groups, widths), &groups, obj)?.total)
    };
    let start = match cost {
        StepCost::Fixed(a) => {
            if a.len() != groups.len() {
                return Err(Error::dim("alpha per group", &[a.len()], &[groups.len()]));
            }
            0.0
        }
        StepCost::Recount(obj) => recount(&widths, obj)?,
    };
    let mut achieved = 0.0;
    let mut removed = Vec::new();
    for i in rank_channels(scores) {
        if achieved >= budget {
            break;
        }
        let ChannelScore { group: g, channel: c, .. } = scores[i];
        if g >= widths.len() || c >= mask.keep[g].len() {
            return Err(Error::Input(format!("score names unknown channel {c} of group {g}")));
        }
        if !mask.keep[g][c] || widths[g] == 1 {
            continue;
        }
        mask.keep[g][c] = false;
        widths[g] -= 1;
        removed.push((g, c));
        achieved = match cost {
            StepCost::Fixed(a) => achieved + a[g],
            StepCost::Recount(obj) => start - recount(&widths, obj)?,
        };
    }
    if achieved < budget {
        return Err(Error::Budget(format!(
            "step budget {budget} unreachable while keeping one channel per group; shortfall {}",
            budget - achieved
        )));
    }
    Ok(PruneStep { mask, removed, achieved })
}

/// [`select_channels`], then applies the chosen mask.
pub fn prune_step(model: &mut Model, scores: &[ChannelScore], cost: StepCost, budget: f64) -> Result<PruneStep> {
    let step = select_channels(model, scores, cost, budget)?;
    apply_mask(model, &step.mask)?;
    Ok(step)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseStats {
    /// Mean objective per epoch.
    pub objective: Vec<f64>,
    pub mean_loss: f64,
}

fn run_phase(
    model: &mut Model,
    data: &Dataset,
    opt: &mut Sgd,
    epochs: usize,
    opts: EpochOptions,
    penalty: Option<&Penalty>,
) -> Result<PhaseStats> {
    let mut out = PhaseStats::default();
    let mut loss = 0.0;
    for e in 0..epochs {
        let s = train_epoch(
            model,
            data,
            opt,
            &EpochOptions {
                epoch: e as u64,
                ..opts.clone()
            },
            penalty,
        )?;
        loss = s.mean_loss;
        out.objective.push(s.objective.iter().sum::<f64>() / s.steps as f64);
    }
    out.mean_loss = loss;
    Ok(out)
}

fn phase_seed(seed: u64, iteration: usize, phase: u64) -> u64 {
    seed ^ ((iteration as u64) << 8 | phase).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Weights and running statistics frozen; γ (γ̃ for shared groups), β and
/// the head trained under the penalty with a proximal step on the γ-type
/// parameters. Shared groups start the phase with γ̃ = 1.
pub fn regularize_phase(
    model: &mut Model,
    data: &Dataset,
    cfg: &GcpConfig,
    penalty: &Penalty,
    iteration: usize,
) -> Result<PhaseStats> {
    if !model.has_global_stats() {
        return Err(Error::Usage(
            "regularization needs global BN statistics; recalibrate first".into(),
        ));
    }
    absorb_group_masks(model);
    let saved = model.trainable;
    model.trainable = Trainable::sparsify();
    let mut opt = Sgd::new(cfg.lr_reg, cfg.momentum, 0.0);
    let out = run_phase(
        model,
        data,
        &mut opt,
        cfg.epochs_reg,
        EpochOptions {
            mode: BnMode::FrozenStats,
            batch_size: cfg.batch_size,
            seed: phase_seed(cfg.seed, iteration, 1),
            epoch: 0,
            ema: None,
        },
        Some(penalty),
    );
    model.trainable = saved;
    out
}

/// Weights frozen; surviving BN parameters and the head trained in
/// BatchStats mode with the running statistics tracked by EMA.
pub fn recovery_phase(model: &mut Model, data: &Dataset, cfg: &GcpConfig, iteration: usize) -> Result<PhaseStats> {
    absorb_group_masks(model);
    let saved = model.trainable;
    model.trainable = Trainable::frozen_weights();
    let mut opt = Sgd::new(cfg.lr_rec, cfg.momentum, 0.0);
    let out = run_phase(
        model,
        data,
        &mut opt,
        cfg.epochs_rec,
        EpochOptions {
            mode: BnMode::BatchStats,
            batch_size: cfg.batch_size,
            seed: phase_seed(cfg.seed, iteration, 2),
            epoch: 0,
            ema: Some(0.9),
        },
        None,
    );
    model.trainable = saved;
    out
}

/// Everything that survived is trained, BatchStats mode.
pub fn finetune(model: &mut Model, data: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<Vec<EpochRecord>> {
    let saved = model.trainable;
    model.trainable = Trainable::full();
    let out = train(model, data, eval, cfg, |_| {});
    model.trainable = saved;
    out
}

/// Cost-weighted count of kept channels whose γ-type parameter is exactly 0.
pub fn prunable_mass(model: &Model, alpha: &[f64]) -> f64 {
    model
        .groups()
        .iter()
        .enumerate()
        .map(|(g, grp)| {
            let p = model.param(Penalty::target(model, g)).expect("target exists");
            let zeros = (0..grp.kept.len()).filter(|&c| grp.kept[c] && p[c] == 0.0).count();
            alpha[g] * zeros as f64
        })
        .sum()
}

/// A group whose kept γ-type entries are all exactly zero passes nothing on.
pub fn dead_group(model: &Model) -> Option<usize> {
    (0..model.groups().len()).find(|&g| {
        let grp = &model.groups()[g];
        let p = model.param(Penalty::target(model, g)).expect("target exists");
        (0..grp.kept.len()).all(|c| !grp.kept[c] || p[c] == 0.0)
    })
}

/// Cost of the network a masked model computes.
pub fn model_cost(model: &Model, objective: &Objective) -> Result<crate::cost::CostReport> {
    total_cost(&effective_spec(model), &model.group_infos(), objective)
}

/// The whole loop on a trained model. `history` is filled as the loop runs,
/// so it is complete up to the failing phase if one fails.
pub fn run_gcp(
    model: &mut Model,
    data: &Dataset,
    cfg: &GcpConfig,
    objective: &Objective,
    history: &mut PruneHistory,
    mut on_step: impl FnMut(&IterationRecord),
) -> Result<()> {
    let r = gcp_loop(model, data, cfg, objective, history, &mut on_step);
    if let Err(e) = &r {
        history.error = Some(e.to_string());
    }
    r
}

fn gcp_loop(
    model: &mut Model,
    data: &Dataset,
    cfg: &GcpConfig,
    objective: &Objective,
    history: &mut PruneHistory,
    on_step: &mut dyn FnMut(&IterationRecord),
) -> Result<()> {
    cfg.validate()?;
    if objective.kind() != cfg.objective {
        return Err(Error::Config(format!(
            "config names objective {} but {} was supplied",
            cfg.objective,
            objective.kind()
        )));
    }
    let original = model_cost(model, objective)?;
    *history = PruneHistory {
        objective: Some(cfg.objective),
        eta: cfg.eta,
        iterations: cfg.iterations,
        original_cost: original.total,
        max_alpha: original.max_alpha(),
        ..PruneHistory::default()
    };
    recalibrate_bn(model, data, cfg.calibration_batches, cfg.batch_size)?;
    let mut lambda = cfg.lambda;
    for t in 1..=cfg.iterations {
        let budget = step_budget(original.total, cfg.eta, cfg.iterations, t)?;
        let before = model_cost(model, objective)?;
        let widths: Vec<usize> = model.groups().iter().map(|g| g.kept_count()).collect();
        let alpha = group_alpha(&effective_spec(model), &model.group_infos(), objective)?;
        let weights = normalize_alpha(&alpha, &widths)?;

        absorb_group_masks(model);
        let fold = fold_all(model)?;
        let snapshot = model.clone();
        let mut doublings = 0;
        let mut accepted: Option<(Model, PhaseStats, f64, f64)> = None;
        let mut rejected = None;
        let (reg, mass) = loop {
            let penalty = Penalty {
                lambda,
                alpha: weights.clone(),
            };
            let reg = regularize_phase(model, data, cfg, &penalty, t)?;
            let mass = prunable_mass(model, &alpha);
            if dead_group(model).is_some() {
                // Stronger λ would disconnect the network; fall back to the
                // last attempt that kept every group alive.
                rejected = Some(lambda);
                if let Some((m, r, l, ms)) = accepted.take() {
                    *model = m;
                    lambda = l;
                    doublings -= 1;
                    break (r, ms);
                }
                break (reg, mass);
            }
            if mass >= budget || doublings == cfg.max_lambda_doublings {
                break (reg, mass);
            }
            accepted = Some((model.clone(), reg, lambda, mass));
            lambda *= 2.0;
            doublings += 1;
            *model = snapshot.clone();
        };
        drop(snapshot);

        let scores = importance_scores(model)?;
        let step = prune_step(model, &scores, StepCost::Recount(objective), budget)?;
        let recovery = (cfg.epochs_rec > 0)
            .then(|| recovery_phase(model, data, cfg, t))
            .transpose()?;
        recalibrate_bn(model, data, cfg.calibration_batches, cfg.batch_size)?;

        let mut pruned_per_group = vec![0; widths.len()];
        for &(g, _) in &step.removed {
            pruned_per_group[g] += 1;
        }
        let rec = IterationRecord {
            iteration: t,
            lambda,
            lambda_doublings: doublings,
            lambda_rejected: rejected,
            budget,
            cost_before: before.total,
            cost_after: model_cost(model, objective)?.total,
            prunable_mass: mass,
            fold,
            reg_objective: reg.objective,
            reg_loss: reg.mean_loss,
            recovery_loss: recovery.map(|r| r.mean_loss),
            pruned_per_group,
            kept_per_group: model.groups().iter().map(|g| g.kept_count()).collect(),
        };
        on_step(&rec);
        history.steps.push(rec);
    }
    history.finetune = finetune(model, data, &cfg.finetune, None)?;
    history.final_cost = Some(model_cost(model, objective)?.total);
    Ok(())
}

/// Kept fraction of the output channels of every conv, in layer order.
pub fn conv_keep_fractions(model: &Model) -> Vec<(LayerId, f64)> {
    model
        .conv_weights()
        .keys()
        .map(|&id| {
            let g = &model.groups()[model.group_of(id).expect("convs feed a BN")];
            (id, g.kept_count() as f64 / g.info.channels as f64)
        })
        .collect()
}

/// Mean kept fraction over the first and the last `⌊L/2⌋` convs; the middle
/// conv of an odd count belongs to neither half.
pub fn half_keep_fractions(model: &Model) -> (f64, f64) {
    let f: Vec<f64> = conv_keep_fractions(model).into_iter().map(|(_, f)| f).collect();
    let h = f.len() / 2;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&f[..h]), mean(&f[f.len() - h..]))
}

/// Mask keeping the same fraction of every group, the largest fraction whose
/// cost is within `(1 − η)` of the current cost. Inside a group the channels
/// with the largest mean |γ| over the member BNs survive.
pub fn uniform_mask(model: &Model, objective: &Objective, eta: f64) -> Result<PruneMask> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Input(format!("eta must lie in (0, 1), got {eta}")));
    }
    let groups = model.group_infos();
    let widths: Vec<usize> = model.groups().iter().map(|g| g.kept_count()).collect();
    let cost_at = |f: f64| -> Result<(f64, Vec<usize>)> {
        let w: Vec<usize> = widths.iter().map(|&c| ((f * c as f64).ceil() as usize).clamp(1, c)).collect();
        Ok((total_cost(&spec_with_widths(model.spec(), &groups, &w), &groups, objective)?.total, w))
    };
    let target = (1.0 - eta) * cost_at(1.0)?.0;
    let (floor, floor_widths) = cost_at(0.0)?;
    if floor > target {
        return Err(Error::Budget(format!(
            "one channel per group still costs {floor}, above the target {target}"
        )));
    }
    let (mut lo, mut hi, mut best) = (0.0, 1.0, floor_widths);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (c, w) = cost_at(mid)?;
        if c <= target {
            lo = mid;
            best = w;
        } else {
            hi = mid;
        }
    }
    let mut mask = PruneMask::current(model);
    for (g, grp) in model.groups().iter().enumerate() {
        let mut score = vec![0.0f64; grp.info.channels];
        for &bn in &grp.info.members {
            let gamma = model.effective_gamma(bn).expect("member exists");
            for (s, v) in score.iter_mut().zip(gamma) {
                *s += v.abs() as f64 / grp.info.members.len() as f64;
            }
        }
        let mut order = grp.kept_indices();
        order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
        for &c in &order[best[g]..] {
            mask.keep[g][c] = false;
        }
    }
    Ok(mask)
}

/// The uniform baseline: prune by [`uniform_mask`], recalibrate, fine-tune.
pub fn run_uniform(
    model: &mut Model,
    data: &Dataset,
    cfg: &GcpConfig,
    objective: &Objective,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mask = uniform_mask(model, objective, cfg.eta)?;
    apply_mask(model, &mask)?;
    absorb_group_masks(model);
    recalibrate_bn(model, data, cfg.calibration_batches, cfg.batch_size)?;
    finetune(model, data, &cfg.finetune, None)
}
