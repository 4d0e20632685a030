//! Mini-batch training, evaluation and BatchNorm recalibration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{backward, batch_moments, forward, predict, update_running_stats, Model, ParamKey};
use crate::tensor::{shrink, sgd_momentum_step, BnMode, OptimState, Tensor};

/// Cost-weighted L1 penalty `λ·Σ_g α_g·Σ_c |γ_{g,c}|` over the γ-type
/// parameters: γ̃ for shared groups, the member γ otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Penalty {
    pub lambda: f64,
    /// One weight per group.
    pub alpha: Vec<f64>,
}

impl Penalty {
    /// The parameter carrying the sparsity of group `g`.
    pub fn target(model: &Model, g: usize) -> ParamKey {
        let grp = &model.groups()[g];
        if grp.mask.is_some() {
            ParamKey::GroupMask(g)
        } else {
            ParamKey::Gamma(grp.info.members[0])
        }
    }

    fn weight_of(&self, model: &Model, key: ParamKey) -> Option<f64> {
        let g = match key {
            ParamKey::GroupMask(g) => g,
            ParamKey::Gamma(id) => {
                let g = model.group_of(id)?;
                if model.groups()[g].mask.is_some() {
                    return None;
                }
                g
            }
            _ => return None,
        };
        self.alpha.get(g).copied()
    }

    /// `Σ_g α_g·Σ_c |γ_{g,c}|`, without λ.
    pub fn l1(&self, model: &Model) -> f64 {
        (0..model.groups().len())
            .map(|g| {
                let p = model.param(Self::target(model, g)).expect("target exists");
                self.alpha[g] * p.data().iter().map(|v| v.abs() as f64).sum::<f64>()
            })
            .sum()
    }

    pub fn value(&self, model: &Model) -> f64 {
        self.lambda * self.l1(model)
    }
}

/// SGD with momentum over a model's trainable parameters. Pruned channel
/// entries never move; γ-type parameters under a [`Penalty`] take a plain
/// gradient step followed by soft-thresholding.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    states: BTreeMap<ParamKey, OptimState<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            states: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        model: &mut Model,
        grads: BTreeMap<ParamKey, Tensor<f32>>,
        penalty: Option<&Penalty>,
    ) -> Result<()> {
        for (key, mut g) in grads {
            let pruned = model.pruned_entries(key);
            for &i in &pruned {
                g[i] = 0.0;
            }
            let prox = penalty.and_then(|p| p.weight_of(model, key).map(|a| (p.lambda, a)));
            let param = model.param_mut(key).expect("gradient keys name parameters");
            match prox {
                Some((lambda, alpha)) => {
                    if !g.all_finite() {
                        return Err(Error::Divergence(format!("non-finite gradient for {key}")));
                    }
                    let t = self.lr * (lambda * alpha) as f32;
                    for (p, &gv) in param.data_mut().iter_mut().zip(g.data()) {
                        *p = shrink(*p - self.lr * gv, t);
                    }
                }
                None => {
                    let state = self.states.entry(key).or_insert_with(|| {
                        OptimState::new(param.shape(), self.lr, self.momentum, self.weight_decay)
                    });
                    state.lr = self.lr;
                    sgd_momentum_step(param, &g, state)
                        .map_err(|e| Error::Divergence(format!("{key}: {e}")))?;
                }
            }
            for &i in &pruned {
                param[i] = 0.0;
            }
        }
        Ok(())
    }
}

/// How one pass over the data is run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochOptions {
    pub mode: BnMode,
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    /// Momentum of the running-statistics moving average (BatchStats only).
    pub ema: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub steps: usize,
    pub mean_loss: f64,
    /// Loss plus the penalty, per step, measured before each update.
    pub objective: Vec<f64>,
}

/// One shuffled pass of SGD over `data`.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    opt: &mut Sgd,
    opts: &EpochOptions,
    penalty: Option<&Penalty>,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut stats = EpochStats::default();
    let mut loss_sum = 0.0;
    for (step, idx) in data
        .batch_indices(opts.batch_size, true, opts.seed, opts.epoch)
        .iter()
        .enumerate()
    {
        let (x, y) = data.gather(idx);
        let out = forward(model, &x, opts.mode, Some(&y))
            .map_err(|e| divergence_at(e, opts.epoch, step))?;
        let loss = out.loss.expect("labels given") as f64;
        let grads = backward(model, &out.tape, out.grad_logits.as_ref().expect("labels given"))?;
        let obj = loss + penalty.map_or(0.0, |p| p.value(model));
        if let Some(m) = opts.ema {
            update_running_stats(model, &out.tape, m)?;
        }
        drop(out);
        opt.step(model, grads, penalty).map_err(|e| divergence_at(e, opts.epoch, step))?;
        loss_sum += loss;
        stats.objective.push(obj);
        stats.steps += 1;
    }
    stats.mean_loss = loss_sum / stats.steps as f64;
    Ok(stats)
}

fn divergence_at(e: Error, epoch: u64, step: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch} step {step}: {msg}")),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    /// Present when the model has at least 5 classes.
    pub top5: Option<f64>,
    pub samples: usize,
}

/// Accuracy and mean loss in FrozenStats mode.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let classes = model.classes();
    if data.classes != classes {
        return Err(Error::Input(format!(
            "model predicts {classes} classes but the data has {}",
            data.classes
        )));
    }
    let (mut loss, mut top1, mut top5) = (0.0, 0usize, 0usize);
    for idx in data.batch_indices(batch_size, false, 0, 0) {
        let (x, y) = data.gather(&idx);
        let logits = predict(model, &x, BnMode::FrozenStats)?;
        for (row, &label) in logits.data().chunks(classes).zip(&y) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64 + row.iter().map(|&z| ((z - max) as f64).exp()).sum::<f64>().ln();
            loss += lse - row[label] as f64;
            let target = row[label];
            // Rank of the true class; ties resolve toward the lower index.
            let better = row
                .iter()
                .enumerate()
                .filter(|&(j, &z)| z > target || (z == target && j < label))
                .count();
            top1 += usize::from(better == 0);
            top5 += usize::from(better < 5);
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        top1: top1 as f64 / n,
        top5: (classes >= 5).then(|| top5 as f64 / n),
        samples: data.len(),
    })
}

/// Sets every BatchNorm's running statistics to the pooled mean and
/// population variance over the first `batches` batches (unshuffled), in
/// one BatchStats sweep.
pub fn recalibrate_bn(model: &mut Model, data: &Dataset, batches: usize, batch_size: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("no calibration data".into()));
    }
    if batches == 0 {
        return Err(Error::Input("calibration needs at least one batch".into()));
    }
    let plan = data.batch_indices(batch_size, false, 0, 0);
    // (count, mean, M2) per layer, merged with the parallel-variance rule.
    let mut acc: BTreeMap<usize, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let spatial = |id: usize| -> usize {
        let g = model.graph();
        let s = g.shapes[g.index[&id]];
        s.height * s.width
    };
    for idx in plan.iter().take(batches) {
        let (x, _) = data.gather(idx);
        for (id, (mean, var)) in batch_moments(model, &x)? {
            let nb = (idx.len() * spatial(id)) as f64;
            match acc.get_mut(&id) {
                None => {
                    let m2 = var.iter().map(|v| v * nb).collect();
                    acc.insert(id, (nb, mean, m2));
                }
                Some((na, ma, m2a)) => {
                    let n = *na + nb;
                    for c in 0..mean.len() {
                        let delta = mean[c] - ma[c];
                        ma[c] += delta * nb / n;
                        m2a[c] += var[c] * nb + delta * delta * *na * nb / n;
                    }
                    *na = n;
                }
            }
        }
    }
    model.set_global_stats(true);
    for (id, (n, mean, m2)) in acc {
        let p = model.bn_mut(id).expect("moments come from model layers");
        for c in 0..mean.len() {
            p.running_mean[c] = mean[c] as f32;
            p.running_var[c] = (m2[c] / n).max(0.0) as f32;
        }
    }
    Ok(())
}

/// Plain training schedule used for the baseline and the final fine-tune.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    /// Cosine decay of the learning rate to zero over `epochs`.
    pub cosine: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            cosine: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f32 {
        if self.cosine && self.epochs > 0 {
            let t = epoch as f64 / self.epochs as f64;
            (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: Option<f64>,
}

/// Full training in BatchStats mode with running-statistics EMA 0.9.
/// Pruned channels stay at zero.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut records = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        opt.lr = cfg.lr_at(e);
        let stats = train_epoch(
            model,
            data,
            &mut opt,
            &EpochOptions {
                mode: BnMode::BatchStats,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                epoch: e as u64,
                ema: Some(0.9),
            },
            None,
        )?;
        let eval_top1 = eval.map(|d| evaluate(model, d, 256).map(|r| r.top1)).transpose()?;
        let rec = EpochRecord {
            epoch: e + 1,
            train_loss: stats.mean_loss,
            eval_top1,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(records)
}
