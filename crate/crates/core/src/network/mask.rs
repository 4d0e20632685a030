//! Keep-masks over channel groups, and physically removing pruned channels.

use super::groups::ChannelGroups;
use super::model::{Model, ModelParts};
use super::spec::{LayerId, LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Per-group keep flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    pub keep: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn all_keep<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            keep: model.groups().iter().map(|g| vec![true; g.info.channels]).collect(),
        }
    }

    /// The model's current kept flags.
    pub fn current<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            keep: model.groups().iter().map(|g| g.kept.clone()).collect(),
        }
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| !k).count()
    }

    pub fn check<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.keep.len() != model.groups().len() {
            return Err(Error::dim("prune mask groups", &[self.keep.len()], &[model.groups().len()]));
        }
        for (k, g) in self.keep.iter().zip(model.groups()) {
            if k.len() != g.info.channels {
                return Err(Error::dim("prune mask", &[k.len()], &[g.info.channels]));
            }
            let survivors = k.iter().zip(&g.kept).filter(|(&a, &b)| a && b).count();
            if survivors == 0 {
                return Err(Error::Budget(format!("mask would remove every channel of group {}", g.info.id)));
            }
        }
        Ok(())
    }
}

/// Zeroes γ, β (and γ̃) of every pruned channel at all member sites. A channel
/// that is already pruned stays pruned.
pub fn apply_mask<T: Scalar>(model: &mut Model<T>, mask: &PruneMask) -> Result<()> {
    mask.check(model)?;
    for (gid, keep) in mask.keep.iter().enumerate() {
        let pruned: Vec<usize> = (0..keep.len()).filter(|&i| !keep[i]).collect();
        if pruned.is_empty() {
            continue;
        }
        let members = model.groups()[gid].info.members.clone();
        for bn in members {
            let p = model.bn_mut(bn).expect("group member exists");
            for &i in &pruned {
                p.gamma[i] = T::ZERO;
                p.beta[i] = T::ZERO;
            }
        }
        let g = model.group_mut(gid);
        for &i in &pruned {
            g.kept[i] = false;
            if let Some(m) = g.mask.as_mut() {
                m[i] = T::ZERO;
            }
        }
    }
    Ok(())
}

/// Moves γ̃ into the member γ of every shared group and resets γ̃ to 1 on kept
/// channels (0 on pruned ones). The network function is unchanged.
pub fn absorb_group_masks<T: Scalar>(model: &mut Model<T>) {
    for gid in 0..model.groups().len() {
        let Some(mask) = model.groups()[gid].mask.clone() else {
            continue;
        };
        for bn in model.groups()[gid].info.members.clone() {
            let p = model.bn_mut(bn).expect("group member exists");
            for (v, &m) in p.gamma.data_mut().iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
        let g = model.group_mut(gid);
        let kept = g.kept.clone();
        if let Some(m) = g.mask.as_mut() {
            for (v, k) in m.data_mut().iter_mut().zip(kept) {
                *v = if k { T::ONE } else { T::ZERO };
            }
        }
    }
}

fn kept_of<T: Scalar>(model: &Model<T>, layer: LayerId) -> Option<Vec<usize>> {
    model.group_of(layer).map(|g| model.groups()[g].kept_indices())
}

/// The spec with every width reduced to its kept channel count.
pub fn effective_spec<T: Scalar>(model: &Model<T>) -> NetworkSpec {
    let widths: Vec<usize> = model.groups().iter().map(|g| g.kept_count()).collect();
    spec_with_widths(model.spec(), &model.group_infos(), &widths)
}

/// `spec` with the channel count of group `g` set to `widths[g]`.
pub fn spec_with_widths(spec: &NetworkSpec, groups: &ChannelGroups, widths: &[usize]) -> NetworkSpec {
    let mut spec = spec.clone();
    for l in &mut spec.layers {
        if let LayerKind::Conv {
            out_channels,
            in_channels,
            ..
        } = &mut l.kind
        {
            if let Some(g) = groups.group_of(l.id) {
                *out_channels = widths[g];
            }
            if let Some(g) = groups.group_of(l.inputs[0]) {
                *in_channels = widths[g];
            }
        }
    }
    spec
}

/// Builds the smaller dense model that computes the same function as the
/// masked one.
pub fn materialize<T: Scalar>(model: &Model<T>, mask: &PruneMask) -> Result<Model<T>> {
    let mut masked = model.clone();
    apply_mask(&mut masked, mask)?;
    let spec = effective_spec(&masked);
    let old = masked.parts();
    let mut conv = old.conv.clone();
    for l in &masked.spec().layers {
        if let LayerKind::Conv { .. } = l.kind {
            let mut w = old.conv[&l.id].clone();
            if let Some(k) = kept_of(&masked, l.id) {
                w = w.select(0, &k)?;
            }
            if let Some(k) = kept_of(&masked, l.inputs[0]) {
                w = w.select(1, &k)?;
            }
            conv.insert(l.id, w);
        }
    }
    let mut bn = old.bn.clone();
    for (id, p) in bn.iter_mut() {
        let k = kept_of(&masked, *id).expect("batchnorm belongs to a group");
        p.gamma = p.gamma.select(0, &k)?;
        p.beta = p.beta.select(0, &k)?;
        p.running_mean = p.running_mean.select(0, &k)?;
        p.running_var = p.running_var.select(0, &k)?;
    }
    let linear = masked
        .spec()
        .layers
        .iter()
        .find(|l| matches!(l.kind, LayerKind::Linear { .. }))
        .expect("validated spec has a head");
    let head_weight = match kept_of(&masked, linear.inputs[0]) {
        Some(k) => old.head_weight.select(1, &k)?,
        None => old.head_weight.clone(),
    };
    let groups = masked.groups();
    let masks = groups
        .iter()
        .zip(&old.masks)
        .map(|(g, m)| m.as_ref().map(|m| m.select(0, &g.kept_indices())).transpose())
        .collect::<Result<Vec<_>>>()?;
    let kept = groups.iter().map(|g| vec![true; g.kept_count()]).collect();
    let mut out = Model::from_parts(
        spec,
        ModelParts {
            conv,
            bn,
            head_weight,
            head_bias: old.head_bias,
            masks,
            kept,
        },
    )?;
    out.trainable = model.trainable;
    out.set_global_stats(model.has_global_stats());
    Ok(out)
}

/// Rescales every BatchNorm so its output is multiplied by `tau`, and divides
/// the head weights by `tau`. Running statistics of BatchNorms that see an
/// already rescaled activation are scaled by `tau` (mean) and `tau²`
/// (variance). With ε = 0 the logits are unchanged.
pub fn rescale_tau<T: Scalar>(model: &mut Model<T>, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Input(format!("tau must be positive, got {tau}")));
    }
    let t = T::of(tau);
    let input_id = model.spec().layers[model.graph().input].id;
    let bn_ids: Vec<(LayerId, bool)> = model
        .spec()
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::BatchNorm)
        .map(|l| {
            let conv = model.spec().layer(l.inputs[0]).expect("validated");
            (l.id, conv.inputs[0] != input_id)
        })
        .collect();
    for (id, scaled_input) in bn_ids {
        let p = model.bn_mut(id).expect("consistent model");
        p.gamma.scale(t);
        p.beta.scale(t);
        if scaled_input {
            p.running_mean.scale(t);
            p.running_var.scale(t * t);
        }
    }
    let (w, _) = model.head_mut();
    w.scale(T::ONE / t);
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::super::exec::predict;
    use super::super::spec::{resnet8, SpecBuilder};
    use super::*;
    use crate::tensor::{BnMode, Tensor};

    fn perturbed(seed: u64) -> Model<f32> {
        let mut m = Model::<f32>::init(resnet8(3, 8, 8, 10), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for key in m.param_keys() {
            for v in m.param_mut(key).unwrap().data_mut() {
                *v += rng.random_range(-0.3f32..0.3);
            }
        }
        m
    }

    #[test]
    fn all_keep_is_identity() {
        let mut m = perturbed(1);
        let before = m.parts();
        let keep = PruneMask::all_keep(&m);
        apply_mask(&mut m, &keep).unwrap();
        let after = m.parts();
        assert_eq!(before.bn, after.bn);
        assert_eq!(before.masks, after.masks);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f32 / 7.0);
        let mat = materialize(&m, &PruneMask::all_keep(&m)).unwrap();
        assert_eq!(mat.spec(), m.spec());
        assert_eq!(
            predict(&m, &x, BnMode::BatchStats).unwrap(),
            predict(&mat, &x, BnMode::BatchStats).unwrap()
        );
    }

    #[test]
    fn singleton_prune_touches_one_bn() {
        let mut m = perturbed(2);
        let g = m.group_of(5).unwrap();
        assert!(!m.groups()[g].info.is_shared());
        let mut mask = PruneMask::all_keep(&m);
        mask.keep[g][3] = false;
        let before = m.parts();
        apply_mask(&mut m, &mask).unwrap();
        let p = m.bn(5).unwrap();
        assert_eq!((p.gamma[3], p.beta[3]), (0.0, 0.0));
        for (id, q) in m.bn_params() {
            if *id != 5 {
                assert_eq!(q, &before.bn[id]);
            }
        }
    }

    #[test]
    fn shared_prune_touches_all_members() {
        let mut m = perturbed(3);
        let g = m.group_of(2).unwrap();
        let members = m.groups()[g].info.members.clone();
        assert_eq!(members, vec![2, 8]);
        let mut mask = PruneMask::all_keep(&m);
        mask.keep[g][0] = false;
        apply_mask(&mut m, &mask).unwrap();
        for id in members {
            let p = m.bn(id).unwrap();
            assert_eq!((p.gamma[0], p.beta[0]), (0.0, 0.0));
        }
        assert_eq!(m.groups()[g].mask.as_ref().unwrap()[0], 0.0);
    }

    #[test]
    fn emptying_a_group_is_a_budget_error() {
        let mut m = perturbed(4);
        let mut mask = PruneMask::all_keep(&m);
        mask.keep[1].iter_mut().for_each(|k| *k = false);
        assert!(matches!(apply_mask(&mut m, &mask), Err(Error::Budget(_))));
        assert!(matches!(materialize(&m, &mask), Err(Error::Budget(_))));
    }

    #[test]
    fn mid_chain_prune_shrinks_consumer() {
        let mut b = SpecBuilder::new("chain", 3, 6, 6);
        let x = b.conv_bn_relu(b.input(), 8, 3, 1);
        let x = b.conv_bn_relu(x, 4, 3, 1);
        b.head(x, 5);
        let mut m = Model::<f32>::init(b.finish(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in m.param_mut(crate::network::ParamKey::Beta(2)).unwrap().data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let mut mask = PruneMask::all_keep(&m);
        mask.keep[0][5] = false;
        let small = materialize(&m, &mask).unwrap();
        assert_eq!(small.conv_weight(4).unwrap().shape(), &[4, 7, 3, 3]);
        apply_mask(&mut m, &mask).unwrap();
        let x = Tensor::from_fn(&[3, 3, 6, 6], |_| rng.random_range(-1.0f32..1.0));
        for mode in [BnMode::BatchStats, BnMode::FrozenStats] {
            let d = predict(&m, &x, mode)
                .unwrap()
                .max_abs_diff(&predict(&small, &x, mode).unwrap())
                .unwrap();
            assert!(d < 1e-5, "{d}");
        }
    }

    #[test]
    fn residual_prune_shrinks_every_member() {
        let m = perturbed(5);
        let g = m.group_of(15).unwrap();
        let mut mask = PruneMask::all_keep(&m);
        mask.keep[g][0] = false;
        mask.keep[g][9] = false;
        let small = materialize(&m, &mask).unwrap();
        for id in [15, 17] {
            assert_eq!(small.bn(id).unwrap().channels(), 30);
        }
        for conv in [14, 16] {
            assert_eq!(small.conv_weight(conv).unwrap().shape()[0], 30);
        }
        for conv in [20, 25] {
            assert_eq!(small.conv_weight(conv).unwrap().shape()[1], 30);
        }
        small.spec().validate().unwrap();
    }

    #[test]
    fn tau_one_is_identity_and_bad_tau_rejected() {
        let mut m = perturbed(6);
        let before = m.parts();
        rescale_tau(&mut m, 1.0).unwrap();
        assert_eq!(before.bn, m.parts().bn);
        assert!(matches!(rescale_tau(&mut m, 0.0), Err(Error::Input(_))));
        assert!(matches!(rescale_tau(&mut m, -2.0), Err(Error::Input(_))));
    }

    #[test]
    fn tau_invariance_without_eps() {
        let mut m = perturbed(7);
        let ids: Vec<_> = m.bn_params().keys().copied().collect();
        for id in ids {
            let p = m.bn_mut(id).unwrap();
            p.eps = 0.0;
            for v in p.running_var.data_mut() {
                *v = 0.5 + v.abs();
            }
        }
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5);
        let base = predict(&m, &x, BnMode::FrozenStats).unwrap();
        for tau in [0.5, 2.0, 10.0] {
            let mut s = m.clone();
            rescale_tau(&mut s, tau).unwrap();
            let d = base.max_abs_diff(&predict(&s, &x, BnMode::FrozenStats).unwrap()).unwrap();
            assert!(d < 1e-5, "tau {tau}: {d}");
        }
    }

    #[test]
    fn absorbing_masks_preserves_function() {
        let mut m = perturbed(8);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 5) as f32 / 5.0);
        let before = predict(&m, &x, BnMode::FrozenStats).unwrap();
        absorb_group_masks(&mut m);
        assert!(m
            .groups()
            .iter()
            .filter_map(|g| g.mask.as_ref())
            .all(|mk| mk.data().iter().all(|&v| v == 1.0)));
        let d = before.max_abs_diff(&predict(&m, &x, BnMode::FrozenStats).unwrap()).unwrap();
        assert!(d < 1e-5);
    }
}
