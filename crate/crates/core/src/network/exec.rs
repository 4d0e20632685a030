//! Topological forward evaluation with a tape, and the matching backward pass.

use std::collections::BTreeMap;

use super::model::{Model, ParamKey};
use super::spec::LayerKind;
use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm_backward, conv2d_backward, conv2d_backward_input, conv2d_forward, global_avg_pool_backward,
    global_avg_pool_forward, batchnorm_forward_with, linear_backward, linear_forward, relu_backward, relu_forward, softmax_cross_entropy,
    BnMode, BnSaved, Scalar, Tensor,
};

pub type Gradients<T> = BTreeMap<ParamKey, Tensor<T>>;

/// Saved forward context. Valid only for the model generation it was
/// recorded against.
#[derive(Debug)]
pub struct Tape<T = f32> {
    generation: u64,
    mode: BnMode,
    acts: Vec<Option<Tensor<T>>>,
    bn: BTreeMap<usize, BnSaved<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Mini-batch mean and population variance recorded by a BatchNorm layer.
    pub fn batch_stats(&self, model: &Model<T>, bn: usize) -> Option<(&[f64], &[f64])> {
        let idx = *model.graph().index.get(&bn)?;
        let saved = self.bn.get(&idx)?;
        Some((saved.batch_mean.as_deref()?, saved.batch_var.as_deref()?))
    }
}

#[derive(Debug)]
pub struct ForwardOutput<T = f32> {
    pub logits: Tensor<T>,
    pub loss: Option<T>,
    pub grad_logits: Option<Tensor<T>>,
    pub tape: Tape<T>,
}

/// Evaluates the network; with `labels`, also the mean cross-entropy and its
/// gradient with respect to the logits.
pub fn forward<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    mode: BnMode,
    labels: Option<&[usize]>,
) -> Result<ForwardOutput<T>> {
    let (logits, acts, bn) = run(model, x, mode, true, None)?;
    let (loss, grad_logits) = match labels {
        Some(l) => {
            let (loss, g) = softmax_cross_entropy(&logits, l)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss {loss:?}")));
            }
            (Some(loss), Some(g))
        }
        None => (None, None),
    };
    Ok(ForwardOutput {
        logits,
        loss,
        grad_logits,
        tape: Tape {
            generation: model.generation(),
            mode,
            acts,
            bn,
        },
    })
}

/// Logits only; intermediate activations are released as soon as possible.
pub fn predict<T: Scalar>(model: &Model<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
    Ok(run(model, x, mode, false, None)?.0)
}

/// Per-BatchNorm `(mean, population variance)` of one batch in BatchStats
/// mode, without keeping activations.
pub type BatchMoments = BTreeMap<usize, (Vec<f64>, Vec<f64>)>;

pub fn batch_moments<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<BatchMoments> {
    let mut stats = BatchMoments::new();
    run(model, x, BnMode::BatchStats, false, Some(&mut stats))?;
    Ok(stats)
}

type RunOutput<T> = (Tensor<T>, Vec<Option<Tensor<T>>>, BTreeMap<usize, BnSaved<T>>);

fn run<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    mode: BnMode,
    keep: bool,
    mut stats: Option<&mut BatchMoments>,
) -> Result<RunOutput<T>> {
    let spec = model.spec();
    let graph = model.graph();
    let [_, c, h, w] = x.dims4("network input")?;
    let inp = graph.shapes[graph.input];
    if (c, h, w) != (inp.channels, inp.height, inp.width) {
        return Err(Error::dim("network input", x.shape(), &[0, inp.channels, inp.height, inp.width]));
    }
    let n = spec.layers.len();
    let mut acts: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
    let mut pending: Vec<usize> = graph.consumers.iter().map(|c| c.len()).collect();
    let mut saved = BTreeMap::new();
    for &i in &graph.order {
        let l = &spec.layers[i];
        let src = |k: usize| graph.index[&l.inputs[k]];
        let input = |k: usize| acts[src(k)].as_ref().expect("producer evaluated first");
        let out = match l.kind {
            LayerKind::Input { .. } => x.clone(),
            LayerKind::Conv { stride, pad, .. } => {
                conv2d_forward(input(0), model.conv_weight(l.id).expect("consistent model"), stride, pad)?
            }
            LayerKind::BatchNorm => {
                let p = model.bn(l.id).expect("consistent model");
                let gamma = model.effective_gamma(l.id).expect("consistent model");
                let (y, s) = batchnorm_forward_with(
                    input(0),
                    &gamma,
                    p.beta.data(),
                    p.running_mean.data(),
                    p.running_var.data(),
                    p.eps,
                    mode,
                )?;
                if let (Some(st), Some(m), Some(v)) = (stats.as_deref_mut(), &s.batch_mean, &s.batch_var) {
                    st.insert(l.id, (m.clone(), v.clone()));
                }
                if keep {
                    saved.insert(i, s);
                }
                y
            }
            LayerKind::Relu => relu_forward(input(0)),
            LayerKind::Add => input(0).add(input(1))?,
            LayerKind::GlobalAvgPool => global_avg_pool_forward(input(0))?,
            LayerKind::Linear { .. } => {
                let (fw, fb) = model.head();
                linear_forward(input(0), fw, fb)?
            }
        };
        acts[i] = Some(out);
        if !keep {
            for &inp_id in &l.inputs {
                let s = graph.index[&inp_id];
                pending[s] -= 1;
                if pending[s] == 0 {
                    acts[s] = None;
                }
            }
        }
    }
    let logits = if keep {
        acts[graph.output].clone()
    } else {
        acts[graph.output].take()
    }
    .expect("output evaluated");
    Ok((logits, acts, saved))
}

/// Gradients of the loss for every parameter set flagged trainable.
pub fn backward<T: Scalar>(model: &Model<T>, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
    if tape.generation != model.generation() {
        return Err(Error::Usage(format!(
            "tape recorded at model generation {} but the model is at {}",
            tape.generation,
            model.generation()
        )));
    }
    let spec = model.spec();
    let graph = model.graph();
    let flags = model.trainable;
    let mut grads = Gradients::new();
    if !flags.any() {
        return Ok(grads);
    }
    let n = spec.layers.len();

    // needs[i]: some trainable parameter lies at or upstream of layer i.
    let mut needs = vec![false; n];
    for &i in &graph.order {
        let l = &spec.layers[i];
        let own = match l.kind {
            LayerKind::Conv { .. } => flags.conv_weights,
            LayerKind::BatchNorm => {
                flags.beta
                    || if model.is_shared_bn(l.id) {
                        flags.shared_gamma || flags.group_masks
                    } else {
                        flags.gamma
                    }
            }
            LayerKind::Linear { .. } => flags.head,
            _ => false,
        };
        needs[i] = own || l.inputs.iter().any(|id| needs[graph.index[id]]);
    }

    let act = |i: usize| tape.acts[i].as_ref().expect("tape keeps activations");
    let mut upstream: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
    upstream[graph.output] = Some(grad_logits.clone());
    let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
        match slot {
            Some(t) => t.add_assign(&g),
            None => {
                *slot = Some(g);
                Ok(())
            }
        }
    };

    for &i in graph.order.iter().rev() {
        let Some(g) = upstream[i].take() else { continue };
        if !needs[i] {
            continue;
        }
        let l = &spec.layers[i];
        let src = |k: usize| graph.index[&l.inputs[k]];
        match l.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Linear { .. } => {
                let (fw, _) = model.head();
                let (gx, gw, gb) = linear_backward(act(src(0)), fw, &g)?;
                if flags.head {
                    grads.insert(ParamKey::HeadWeight, gw);
                    grads.insert(ParamKey::HeadBias, gb);
                }
                if needs[src(0)] {
                    accumulate(&mut upstream[src(0)], gx)?;
                }
            }
            LayerKind::GlobalAvgPool => {
                let gx = global_avg_pool_backward(act(src(0)).shape(), &g)?;
                accumulate(&mut upstream[src(0)], gx)?;
            }
            LayerKind::Relu => {
                let gx = relu_backward(act(i), &g)?;
                accumulate(&mut upstream[src(0)], gx)?;
            }
            LayerKind::Add => {
                for k in 0..2 {
                    if needs[src(k)] {
                        accumulate(&mut upstream[src(k)], g.clone())?;
                    }
                }
            }
            LayerKind::BatchNorm => {
                let saved = tape.bn.get(&i).expect("tape keeps batchnorm context");
                let (gx, g_gamma_eff, g_beta) = batchnorm_backward(saved, &g)?;
                if flags.beta {
                    grads.insert(ParamKey::Beta(l.id), g_beta);
                }
                let p = model.bn(l.id).expect("consistent model");
                match model.group_of(l.id).and_then(|gid| model.groups()[gid].mask.as_ref().map(|m| (gid, m))) {
                    Some((gid, mask)) => {
                        if flags.shared_gamma {
                            let mut gg = g_gamma_eff.clone();
                            for (v, &m) in gg.data_mut().iter_mut().zip(mask.data()) {
                                *v *= m;
                            }
                            grads.insert(ParamKey::Gamma(l.id), gg);
                        }
                        if flags.group_masks {
                            let mut gm = g_gamma_eff;
                            for (v, &gamma) in gm.data_mut().iter_mut().zip(p.gamma.data()) {
                                *v *= gamma;
                            }
                            accumulate_key(&mut grads, ParamKey::GroupMask(gid), gm)?;
                        }
                    }
                    None => {
                        if flags.gamma {
                            grads.insert(ParamKey::Gamma(l.id), g_gamma_eff);
                        }
                    }
                }
                if needs[src(0)] {
                    accumulate(&mut upstream[src(0)], gx)?;
                }
            }
            LayerKind::Conv { stride, pad, .. } => {
                let w = model.conv_weight(l.id).expect("consistent model");
                let x = act(src(0));
                let want_input = needs[src(0)];
                if flags.conv_weights {
                    let (gx, gw) = conv2d_backward(x, w, &g, stride, pad)?;
                    grads.insert(ParamKey::ConvWeight(l.id), gw);
                    if want_input {
                        accumulate(&mut upstream[src(0)], gx)?;
                    }
                } else if want_input {
                    let gx = conv2d_backward_input(x, w, &g, stride, pad)?;
                    accumulate(&mut upstream[src(0)], gx)?;
                }
            }
        }
    }
    Ok(grads)
}

fn accumulate_key<T: Scalar>(grads: &mut Gradients<T>, key: ParamKey, g: Tensor<T>) -> Result<()> {
    match grads.get_mut(&key) {
        Some(t) => t.add_assign(&g),
        None => {
            grads.insert(key, g);
            Ok(())
        }
    }
}

/// Exponential moving average of the running statistics from a BatchStats
/// tape: `running ← momentum·running + (1 − momentum)·batch`.
pub fn update_running_stats<T: Scalar>(model: &mut Model<T>, tape: &Tape<T>, momentum: f64) -> Result<()> {
    if tape.mode != BnMode::BatchStats {
        return Err(Error::Usage("running statistics need a BatchStats tape".into()));
    }
    if tape.generation != model.generation() {
        return Err(Error::Usage("stale tape".into()));
    }
    let updates: Vec<(usize, Vec<f64>, Vec<f64>)> = tape
        .bn
        .iter()
        .map(|(&i, s)| {
            (
                model.spec().layers[i].id,
                s.batch_mean.clone().unwrap_or_default(),
                s.batch_var.clone().unwrap_or_default(),
            )
        })
        .collect();
    model.set_global_stats(true);
    for (id, mean, var) in updates {
        let p = model.bn_mut(id).expect("consistent model");
        for (r, &m) in p.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = T::of(momentum * r.as_f64() + (1.0 - momentum) * m);
        }
        for (r, &v) in p.running_var.data_mut().iter_mut().zip(&var) {
            *r = T::of(momentum * r.as_f64() + (1.0 - momentum) * v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::super::model::Trainable;
    use super::super::spec::{resnet8, SpecBuilder};
    use super::*;

    fn small_block() -> Model<f64> {
        let mut b = SpecBuilder::new("tiny", 2, 4, 4);
        let x = b.conv_bn_relu(b.input(), 3, 3, 1);
        let y = b.basic_block(x, 3, 1);
        let z = b.basic_block(y, 4, 2);
        b.head(z, 3);
        Model::init(b.finish(), 5).unwrap()
    }

    fn randomize(model: &mut Model<f64>, rng: &mut ChaCha8Rng) {
        for key in model.param_keys() {
            for v in model.param_mut(key).unwrap().data_mut() {
                *v = match key {
                    ParamKey::Gamma(_) | ParamKey::GroupMask(_) => rng.random_range(0.5..1.5),
                    _ => *v + rng.random_range(-0.2..0.2),
                };
            }
        }
        let ids: Vec<usize> = model.bn_params().keys().copied().collect();
        for id in ids {
            let p = model.bn_mut(id).unwrap();
            for v in p.running_mean.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            for v in p.running_var.data_mut() {
                *v = rng.random_range(0.5..2.0);
            }
        }
    }

    fn check_fd(model: &mut Model<f64>, mode: BnMode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize(model, &mut rng);
        let x = Tensor::from_fn(&[3, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let labels = [0usize, 2, 1];
        let out = forward(model, &x, mode, Some(&labels)).unwrap();
        let grads = backward(model, &out.tape, out.grad_logits.as_ref().unwrap()).unwrap();
        let h = 1e-5;
        for (&key, g) in &grads {
            for i in 0..g.len() {
                let orig = model.param(key).unwrap()[i];
                model.param_mut(key).unwrap()[i] = orig + h;
                let lp = forward(model, &x, mode, Some(&labels)).unwrap().loss.unwrap();
                model.param_mut(key).unwrap()[i] = orig - h;
                let lm = forward(model, &x, mode, Some(&labels)).unwrap().loss.unwrap();
                model.param_mut(key).unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7);
                assert!(err < 1e-4 || (fd - g[i]).abs() < 1e-9, "{key}[{i}]: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn nothing_trainable_gives_no_gradients() {
        let mut m = small_block();
        m.trainable = Trainable::none();
        let x = Tensor::full(&[2, 2, 4, 4], 0.5);
        let out = forward(&m, &x, BnMode::BatchStats, Some(&[0, 1])).unwrap();
        assert!(backward(&m, &out.tape, out.grad_logits.as_ref().unwrap()).unwrap().is_empty());
    }

    #[test]
    fn frozen_weight_gradients_match_finite_differences() {
        let mut m = small_block();
        m.trainable = Trainable::sparsify();
        check_fd(&mut m, BnMode::FrozenStats, 1);
        let x = Tensor::full(&[1, 2, 4, 4], 0.1);
        let out = forward(&m, &x, BnMode::FrozenStats, Some(&[0])).unwrap();
        let grads = backward(&m, &out.tape, out.grad_logits.as_ref().unwrap()).unwrap();
        assert!(grads.keys().all(|k| !matches!(k, ParamKey::ConvWeight(_))));
        assert!(grads.keys().any(|k| matches!(k, ParamKey::GroupMask(_))));
        assert!(grads.contains_key(&ParamKey::HeadWeight));
    }

    #[test]
    fn full_gradients_match_finite_differences() {
        let mut m = small_block();
        m.trainable = Trainable {
            group_masks: true,
            ..Trainable::full()
        };
        check_fd(&mut m, BnMode::BatchStats, 2);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut m = small_block();
        let x = Tensor::full(&[2, 2, 4, 4], 0.5);
        let out = forward(&m, &x, BnMode::BatchStats, Some(&[0, 1])).unwrap();
        m.param_mut(ParamKey::HeadBias).unwrap()[0] += 1.0;
        let r = backward(&m, &out.tape, out.grad_logits.as_ref().unwrap());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn predict_matches_forward_and_is_deterministic() {
        let m = Model::<f32>::init(resnet8(3, 8, 8, 10), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.random_range(-1.0f32..1.0));
        let a = predict(&m, &x, BnMode::BatchStats).unwrap();
        let b = forward(&m, &x, BnMode::BatchStats, None).unwrap().logits;
        assert_eq!(a, b);
        assert_eq!(a, predict(&m, &x, BnMode::BatchStats).unwrap());
    }

    #[test]
    fn unit_masks_are_transparent() {
        let m = Model::<f64>::init(resnet8(3, 8, 8, 10), 1).unwrap();
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 7919) % 13) as f64 / 13.0);
        let with = predict(&m, &x, BnMode::FrozenStats).unwrap();
        // Fold the (unit) masks away by hand and compare.
        let mut parts = m.parts();
        for mask in parts.masks.iter_mut().flatten() {
            assert!(mask.data().iter().all(|&v| v == 1.0));
        }
        let without = Model::from_parts(m.spec().clone(), parts).unwrap();
        assert_eq!(with, predict(&without, &x, BnMode::FrozenStats).unwrap());
    }
}
