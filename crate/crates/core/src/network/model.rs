use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::groups::{build_groups_with, ChannelGroups, GroupInfo};
use super::spec::{Graph, LayerId, LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{BnParams, Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Names one trainable parameter tensor of a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    ConvWeight(LayerId),
    Gamma(LayerId),
    Beta(LayerId),
    /// Shared mask γ̃ of a multi-member channel group.
    GroupMask(usize),
    HeadWeight,
    HeadBias,
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamKey::ConvWeight(id) => write!(f, "conv{id}.weight"),
            ParamKey::Gamma(id) => write!(f, "bn{id}.gamma"),
            ParamKey::Beta(id) => write!(f, "bn{id}.beta"),
            ParamKey::GroupMask(g) => write!(f, "group{g}.mask"),
            ParamKey::HeadWeight => f.write_str("head.weight"),
            ParamKey::HeadBias => f.write_str("head.bias"),
        }
    }
}

/// Which parameter sets receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub conv_weights: bool,
    /// γ of BN layers that form a group on their own.
    pub gamma: bool,
    /// γ of BN layers inside a shared (residual) group.
    pub shared_gamma: bool,
    pub beta: bool,
    pub group_masks: bool,
    pub head: bool,
}

impl Trainable {
    pub fn none() -> Self {
        Self {
            conv_weights: false,
            gamma: false,
            shared_gamma: false,
            beta: false,
            group_masks: false,
            head: false,
        }
    }

    /// Ordinary training: everything except the group masks.
    pub fn full() -> Self {
        Self {
            conv_weights: true,
            gamma: true,
            shared_gamma: true,
            beta: true,
            group_masks: false,
            head: true,
        }
    }

    /// Convolution weights fixed; BN affine parameters and head free.
    pub fn frozen_weights() -> Self {
        Self {
            conv_weights: false,
            ..Self::full()
        }
    }

    /// Sparsification setup: shared groups are driven through γ̃ instead of
    /// their members' γ.
    pub fn sparsify() -> Self {
        Self {
            conv_weights: false,
            gamma: true,
            shared_gamma: false,
            beta: true,
            group_masks: true,
            head: true,
        }
    }

    pub fn any(&self) -> bool {
        self.conv_weights || self.gamma || self.shared_gamma || self.beta || self.group_masks || self.head
    }
}

/// Run-time state of a channel group.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGroup<T = f32> {
    pub info: GroupInfo,
    /// γ̃, present only for shared groups.
    pub mask: Option<Tensor<T>>,
    pub kept: Vec<bool>,
}

impl<T: Scalar> ChannelGroup<T> {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&i| self.kept[i]).collect()
    }
}

/// Network parameters plus the graph they belong to.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    spec: NetworkSpec,
    graph: Graph,
    conv: BTreeMap<LayerId, Tensor<T>>,
    bn: BTreeMap<LayerId, BnParams<T>>,
    head_weight: Tensor<T>,
    head_bias: Tensor<T>,
    groups: Vec<ChannelGroup<T>>,
    of_layer: BTreeMap<LayerId, usize>,
    pub trainable: Trainable,
    generation: u64,
    global_stats: bool,
}

/// Raw parameter sets used to assemble a model, e.g. when loading.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParts<T = f32> {
    pub conv: BTreeMap<LayerId, Tensor<T>>,
    pub bn: BTreeMap<LayerId, BnParams<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
    /// Per group: γ̃ (shared groups only) and keep flags.
    pub masks: Vec<Option<Tensor<T>>>,
    pub kept: Vec<Vec<bool>>,
}

impl<T: Scalar> Model<T> {
    /// He-uniform conv weights, γ = 1, β = 0, μ = 0, σ² = 1, and a
    /// PyTorch-style uniform head.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let graph = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = BTreeMap::new();
        let mut bn = BTreeMap::new();
        let mut head = None;
        for &i in &graph.order {
            let l = &spec.layers[i];
            match l.kind {
                LayerKind::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = (in_channels * kernel * kernel) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let w = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
                        T::of(rng.random_range(-bound..bound))
                    });
                    conv.insert(l.id, w);
                }
                LayerKind::BatchNorm => {
                    bn.insert(l.id, BnParams::new(graph.shapes[i].channels, T::of(DEFAULT_EPS)));
                }
                LayerKind::Linear { classes } => {
                    let features = graph.shapes[graph.index[&l.inputs[0]]].channels;
                    let bound = 1.0 / (features as f64).sqrt();
                    let w = Tensor::from_fn(&[classes, features], |_| T::of(rng.random_range(-bound..bound)));
                    let b = Tensor::from_fn(&[classes], |_| T::of(rng.random_range(-bound..bound)));
                    head = Some((w, b));
                }
                _ => {}
            }
        }
        let (head_weight, head_bias) = head.expect("validated spec has a linear layer");
        let grouping = build_groups_with(&spec, &graph)?;
        let groups = default_group_state(&grouping);
        Ok(Self {
            spec,
            graph,
            conv,
            bn,
            head_weight,
            head_bias,
            groups,
            of_layer: grouping.of_layer,
            trainable: Trainable::full(),
            generation: 0,
            global_stats: false,
        })
    }

    pub fn from_parts(spec: NetworkSpec, parts: ModelParts<T>) -> Result<Self> {
        let graph = spec.validate()?;
        let grouping = build_groups_with(&spec, &graph)?;
        let mut model = Self {
            spec,
            graph,
            conv: parts.conv,
            bn: parts.bn,
            head_weight: parts.head_weight,
            head_bias: parts.head_bias,
            groups: default_group_state(&grouping),
            of_layer: grouping.of_layer,
            trainable: Trainable::full(),
            generation: 0,
            global_stats: false,
        };
        if parts.masks.len() != model.groups.len() || parts.kept.len() != model.groups.len() {
            return Err(Error::Input(format!(
                "expected state for {} groups, got {} masks / {} keep vectors",
                model.groups.len(),
                parts.masks.len(),
                parts.kept.len()
            )));
        }
        for ((g, mask), kept) in model.groups.iter_mut().zip(parts.masks).zip(parts.kept) {
            if g.mask.is_some() != mask.is_some() {
                return Err(Error::Input(format!("group {} mask presence mismatch", g.info.id)));
            }
            g.mask = mask;
            g.kept = kept;
        }
        model.check_consistency()?;
        Ok(model)
    }

    /// Every tensor shape agrees with the spec.
    pub fn check_consistency(&self) -> Result<()> {
        for (i, l) in self.spec.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    ..
                } => {
                    let w = self
                        .conv
                        .get(&l.id)
                        .ok_or_else(|| Error::Input(format!("missing weights for conv {}", l.id)))?;
                    let want = [out_channels, in_channels, kernel, kernel];
                    if w.shape() != want {
                        return Err(Error::dim("conv weights", w.shape(), &want));
                    }
                }
                LayerKind::BatchNorm => {
                    let p = self
                        .bn
                        .get(&l.id)
                        .ok_or_else(|| Error::Input(format!("missing parameters for batchnorm {}", l.id)))?;
                    p.validate()?;
                    let c = self.graph.shapes[i].channels;
                    if p.channels() != c {
                        return Err(Error::dim("batchnorm parameters", &[p.channels()], &[c]));
                    }
                }
                LayerKind::Linear { classes } => {
                    let features = self.graph.shapes[self.graph.index[&l.inputs[0]]].channels;
                    if self.head_weight.shape() != [classes, features] {
                        return Err(Error::dim("head weight", self.head_weight.shape(), &[classes, features]));
                    }
                    if self.head_bias.shape() != [classes] {
                        return Err(Error::dim("head bias", self.head_bias.shape(), &[classes]));
                    }
                }
                _ => {}
            }
        }
        if self.conv.len() != self.spec.conv_ids().len() {
            return Err(Error::Input("conv weights for unknown layers".into()));
        }
        for g in &self.groups {
            if g.kept.len() != g.info.channels {
                return Err(Error::dim("group keep flags", &[g.kept.len()], &[g.info.channels]));
            }
            if let Some(m) = &g.mask {
                if m.shape() != [g.info.channels] {
                    return Err(Error::dim("group mask", m.shape(), &[g.info.channels]));
                }
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub(crate) fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Whether the running statistics were estimated from data rather than
    /// left at their initial values.
    pub fn has_global_stats(&self) -> bool {
        self.global_stats
    }

    pub fn set_global_stats(&mut self, valid: bool) {
        self.global_stats = valid;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn groups(&self) -> &[ChannelGroup<T>] {
        &self.groups
    }

    pub fn group_mut(&mut self, g: usize) -> &mut ChannelGroup<T> {
        self.touch();
        &mut self.groups[g]
    }

    pub fn group_infos(&self) -> ChannelGroups {
        ChannelGroups {
            groups: self.groups.iter().map(|g| g.info.clone()).collect(),
            of_layer: self.of_layer.clone(),
        }
    }

    /// Group owning the output channels of `layer`.
    pub fn group_of(&self, layer: LayerId) -> Option<usize> {
        self.of_layer.get(&layer).copied()
    }

    pub fn conv_weight(&self, id: LayerId) -> Option<&Tensor<T>> {
        self.conv.get(&id)
    }

    pub fn conv_weights(&self) -> &BTreeMap<LayerId, Tensor<T>> {
        &self.conv
    }

    pub fn conv_weight_mut(&mut self, id: LayerId) -> Option<&mut Tensor<T>> {
        self.touch();
        self.conv.get_mut(&id)
    }

    pub fn bn(&self, id: LayerId) -> Option<&BnParams<T>> {
        self.bn.get(&id)
    }

    pub fn bn_params(&self) -> &BTreeMap<LayerId, BnParams<T>> {
        &self.bn
    }

    pub fn bn_mut(&mut self, id: LayerId) -> Option<&mut BnParams<T>> {
        self.touch();
        self.bn.get_mut(&id)
    }

    pub fn head(&self) -> (&Tensor<T>, &Tensor<T>) {
        (&self.head_weight, &self.head_bias)
    }

    pub fn head_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        self.touch();
        (&mut self.head_weight, &mut self.head_bias)
    }

    /// True when the BN layer belongs to a multi-member group.
    pub fn is_shared_bn(&self, bn: LayerId) -> bool {
        self.group_of(bn).is_some_and(|g| self.groups[g].info.is_shared())
    }

    /// γ ⊙ γ̃ for shared groups, γ otherwise.
    pub fn effective_gamma(&self, bn: LayerId) -> Option<Vec<T>> {
        let p = self.bn.get(&bn)?;
        let mut gamma = p.gamma.data().to_vec();
        if let Some(mask) = self.group_of(bn).and_then(|g| self.groups[g].mask.as_ref()) {
            for (v, &m) in gamma.iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
        Some(gamma)
    }

    /// All parameter keys in a fixed order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys: Vec<ParamKey> = self.conv.keys().map(|&id| ParamKey::ConvWeight(id)).collect();
        for &id in self.bn.keys() {
            keys.push(ParamKey::Gamma(id));
            keys.push(ParamKey::Beta(id));
        }
        for g in &self.groups {
            if g.mask.is_some() {
                keys.push(ParamKey::GroupMask(g.info.id));
            }
        }
        keys.push(ParamKey::HeadWeight);
        keys.push(ParamKey::HeadBias);
        keys
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        match key {
            ParamKey::ConvWeight(id) => self.conv.get(&id),
            ParamKey::Gamma(id) => self.bn.get(&id).map(|p| &p.gamma),
            ParamKey::Beta(id) => self.bn.get(&id).map(|p| &p.beta),
            ParamKey::GroupMask(g) => self.groups.get(g).and_then(|g| g.mask.as_ref()),
            ParamKey::HeadWeight => Some(&self.head_weight),
            ParamKey::HeadBias => Some(&self.head_bias),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        self.touch();
        match key {
            ParamKey::ConvWeight(id) => self.conv.get_mut(&id),
            ParamKey::Gamma(id) => self.bn.get_mut(&id).map(|p| &mut p.gamma),
            ParamKey::Beta(id) => self.bn.get_mut(&id).map(|p| &mut p.beta),
            ParamKey::GroupMask(g) => self.groups.get_mut(g).and_then(|g| g.mask.as_mut()),
            ParamKey::HeadWeight => Some(&mut self.head_weight),
            ParamKey::HeadBias => Some(&mut self.head_bias),
        }
    }

    /// Channel indices of `key` that belong to pruned channels, if any.
    pub fn pruned_entries(&self, key: ParamKey) -> Vec<usize> {
        let group = match key {
            ParamKey::Gamma(id) | ParamKey::Beta(id) => self.group_of(id),
            ParamKey::GroupMask(g) => Some(g),
            _ => None,
        };
        match group {
            Some(g) => (0..self.groups[g].kept.len()).filter(|&i| !self.groups[g].kept[i]).collect(),
            None => Vec::new(),
        }
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            graph: self.graph.clone(),
            conv: self.conv.iter().map(|(&k, v)| (k, v.cast())).collect(),
            bn: self.bn.iter().map(|(&k, v)| (k, v.cast())).collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
            groups: self
                .groups
                .iter()
                .map(|g| ChannelGroup {
                    info: g.info.clone(),
                    mask: g.mask.as_ref().map(|m| m.cast()),
                    kept: g.kept.clone(),
                })
                .collect(),
            of_layer: self.of_layer.clone(),
            trainable: self.trainable,
            generation: 0,
            global_stats: self.global_stats,
        }
    }

    pub fn parts(&self) -> ModelParts<T> {
        ModelParts {
            conv: self.conv.clone(),
            bn: self.bn.clone(),
            head_weight: self.head_weight.clone(),
            head_bias: self.head_bias.clone(),
            masks: self.groups.iter().map(|g| g.mask.clone()).collect(),
            kept: self.groups.iter().map(|g| g.kept.clone()).collect(),
        }
    }

    /// Number of classes of the classifier head.
    pub fn classes(&self) -> usize {
        self.head_bias.len()
    }
}

fn default_group_state<T: Scalar>(grouping: &ChannelGroups) -> Vec<ChannelGroup<T>> {
    grouping
        .groups
        .iter()
        .map(|info| ChannelGroup {
            mask: info.is_shared().then(|| Tensor::full(&[info.channels], T::ONE)),
            kept: vec![true; info.channels],
            info: info.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::spec::resnet8;
    use super::*;

    #[test]
    fn init_is_deterministic_and_consistent() {
        let a = Model::<f32>::init(resnet8(3, 8, 8, 10), 3).unwrap();
        let b = Model::<f32>::init(resnet8(3, 8, 8, 10), 3).unwrap();
        a.check_consistency().unwrap();
        for k in a.param_keys() {
            assert_eq!(a.param(k), b.param(k), "{k}");
        }
        assert_eq!(a.groups().iter().filter(|g| g.mask.is_some()).count(), 3);
    }

    #[test]
    fn mutation_bumps_generation() {
        let mut m = Model::<f32>::init(resnet8(3, 8, 8, 10), 0).unwrap();
        let g0 = m.generation();
        m.param_mut(ParamKey::HeadBias).unwrap()[0] = 1.0;
        assert!(m.generation() > g0);
    }

    #[test]
    fn from_parts_rejects_bad_shapes() {
        let m = Model::<f32>::init(resnet8(3, 8, 8, 10), 0).unwrap();
        let mut parts = m.parts();
        let first = *parts.conv.keys().next().unwrap();
        parts.conv.insert(first, Tensor::zeros(&[1, 1, 1, 1]));
        assert!(Model::from_parts(m.spec().clone(), parts).is_err());
        Model::from_parts(m.spec().clone(), m.parts()).unwrap();
    }
}
