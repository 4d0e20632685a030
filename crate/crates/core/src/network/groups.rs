//! Channel groups: BN layers whose outputs meet at residual additions must
//! be pruned identically, so they share one channel dimension.

use std::collections::BTreeMap;

use super::spec::{Graph, LayerId, LayerKind, NetworkSpec};
use crate::error::{Error, Result};

/// Structural description of one group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupInfo {
    pub id: usize,
    /// Member BatchNorm layer ids, ascending.
    pub members: Vec<LayerId>,
    pub channels: usize,
    /// Convs whose output filters are the group channels.
    pub producers: Vec<LayerId>,
    /// Convs that read the group channels as input channels.
    pub consumers: Vec<LayerId>,
    /// The classifier head reads these channels as features.
    pub feeds_head: bool,
}

impl GroupInfo {
    pub fn is_shared(&self) -> bool {
        self.members.len() > 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelGroups {
    pub groups: Vec<GroupInfo>,
    /// Group owning the output channels of each layer (absent for the input
    /// image and the logits).
    pub of_layer: BTreeMap<LayerId, usize>,
}

impl ChannelGroups {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_of(&self, layer: LayerId) -> Option<usize> {
        self.of_layer.get(&layer).copied()
    }

    /// Group of the channels a layer reads (first input).
    pub fn input_group(&self, spec: &NetworkSpec, layer: LayerId) -> Option<usize> {
        let l = spec.layer(layer)?;
        self.group_of(*l.inputs.first()?)
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller index becomes the root so roots are deterministic.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

pub fn build_groups(spec: &NetworkSpec) -> Result<ChannelGroups> {
    let graph = spec.validate()?;
    build_groups_with(spec, &graph)
}

pub(crate) fn build_groups_with(spec: &NetworkSpec, graph: &Graph) -> Result<ChannelGroups> {
    let n = spec.layers.len();
    let mut uf = UnionFind((0..n).collect());
    // source[i]: layer index of a BN whose channel dimension flows out of i.
    let mut source: Vec<Option<usize>> = vec![None; n];
    for &i in &graph.order {
        let l = &spec.layers[i];
        let src = |k: usize| graph.index[&l.inputs[k]];
        source[i] = match l.kind {
            LayerKind::Input { .. } | LayerKind::Linear { .. } => None,
            // A conv's output channels belong to its BN; resolved below.
            LayerKind::Conv { .. } => None,
            LayerKind::BatchNorm => Some(i),
            LayerKind::Relu | LayerKind::GlobalAvgPool => source[src(0)],
            LayerKind::Add => match (source[src(0)], source[src(1)]) {
                (Some(a), Some(b)) => {
                    uf.union(a, b);
                    Some(a)
                }
                _ => {
                    return Err(Error::Graph(format!(
                        "add {} reads the raw network input, which is not prunable",
                        l.id
                    )))
                }
            },
        };
    }

    let mut root_to_group: BTreeMap<usize, usize> = BTreeMap::new();
    let mut groups: Vec<GroupInfo> = Vec::new();
    // Layers are visited in id order so groups are ordered by smallest member id.
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by_key(|&i| spec.layers[i].id);
    for &i in &by_id {
        if !matches!(spec.layers[i].kind, LayerKind::BatchNorm) {
            continue;
        }
        let root = uf.find(i);
        let gid = *root_to_group.entry(root).or_insert_with(|| {
            groups.push(GroupInfo {
                id: groups.len(),
                members: Vec::new(),
                channels: graph.shapes[i].channels,
                producers: Vec::new(),
                consumers: Vec::new(),
                feeds_head: false,
            });
            groups.len() - 1
        });
        groups[gid].members.push(spec.layers[i].id);
    }

    let mut of_layer = BTreeMap::new();
    for i in 0..n {
        let l = &spec.layers[i];
        let owner = match l.kind {
            LayerKind::Conv { .. } => Some(graph.consumers[i][0]),
            _ => source[i],
        };
        if let Some(bn) = owner {
            let root = uf.find(bn);
            of_layer.insert(l.id, root_to_group[&root]);
        }
    }

    for &i in &by_id {
        let l = &spec.layers[i];
        match l.kind {
            LayerKind::Conv { .. } => {
                let out_g = of_layer[&l.id];
                groups[out_g].producers.push(l.id);
                if let Some(&in_g) = of_layer.get(&l.inputs[0]) {
                    groups[in_g].consumers.push(l.id);
                }
            }
            LayerKind::Linear { .. } => {
                if let Some(&g) = of_layer.get(&l.inputs[0]) {
                    groups[g].feeds_head = true;
                }
            }
            _ => {}
        }
    }
    for g in &groups {
        for &m in &g.members {
            let c = graph.shapes[graph.index[&m]].channels;
            if c != g.channels {
                return Err(Error::Graph(format!("group {} mixes widths {} and {c}", g.id, g.channels)));
            }
        }
    }
    Ok(ChannelGroups { groups, of_layer })
}

#[cfg(test)]
mod tests {
    use super::super::spec::{resnet8, SpecBuilder};
    use super::*;

    fn bn_ids(spec: &NetworkSpec) -> Vec<LayerId> {
        spec.layers
            .iter()
            .filter(|l| l.kind == LayerKind::BatchNorm)
            .map(|l| l.id)
            .collect()
    }

    #[test]
    fn chain_has_singletons() {
        let mut b = SpecBuilder::new("chain", 3, 8, 8);
        let x = b.conv_bn_relu(b.input(), 8, 3, 1);
        let x = b.conv_bn_relu(x, 4, 3, 1);
        b.head(x, 10);
        let spec = b.finish();
        let g = build_groups(&spec).unwrap();
        let bns = bn_ids(&spec);
        assert_eq!(g.len(), 2);
        assert_eq!(g.groups[0].members, vec![bns[0]]);
        assert_eq!(g.groups[1].members, vec![bns[1]]);
        assert!(!g.groups[0].feeds_head && g.groups[1].feeds_head);
        assert_eq!(g.groups[0].consumers, vec![spec.conv_ids()[1]]);
    }

    #[test]
    fn single_residual_block() {
        // stem bn0 → block(bn1 interior, bn2 output) with identity shortcut
        let mut b = SpecBuilder::new("block", 3, 8, 8);
        let x = b.conv_bn_relu(b.input(), 8, 3, 1);
        let y = b.basic_block(x, 8, 1);
        b.head(y, 10);
        let spec = b.finish();
        let bns = bn_ids(&spec);
        let g = build_groups(&spec).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.groups[0].members, vec![bns[0], bns[2]]);
        assert_eq!(g.groups[1].members, vec![bns[1]]);
    }

    #[test]
    fn stacked_blocks_share_one_group() {
        let mut b = SpecBuilder::new("blocks", 3, 8, 8);
        let x = b.conv_bn_relu(b.input(), 8, 3, 1);
        let y = b.basic_block(x, 8, 1);
        let z = b.basic_block(y, 8, 1);
        b.head(z, 10);
        let spec = b.finish();
        let bns = bn_ids(&spec);
        let g = build_groups(&spec).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.groups[0].members, vec![bns[0], bns[2], bns[4]]);
        assert_eq!(g.groups[1].members, vec![bns[1]]);
        assert_eq!(g.groups[2].members, vec![bns[3]]);
    }

    #[test]
    fn resnet8_groups() {
        let spec = resnet8(3, 32, 32, 10);
        let g = build_groups(&spec).unwrap();
        let sizes: Vec<(usize, usize)> = g.groups.iter().map(|g| (g.members.len(), g.channels)).collect();
        assert_eq!(sizes, vec![(2, 16), (1, 16), (1, 32), (2, 32), (1, 64), (2, 64)]);
        // Stage-2 output group: produced by conv2 and the projection, consumed by
        // the next block's conv1 and projection.
        let g3 = &g.groups[3];
        assert_eq!(g3.producers.len(), 2);
        assert_eq!(g3.consumers.len(), 2);
        assert!(g.groups[5].feeds_head);
    }
}
