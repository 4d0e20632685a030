//! Layer graph description and structural validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_size;

pub type LayerId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm,
    Relu,
    Add,
    GlobalAvgPool,
    Linear {
        classes: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear { .. } => "linear",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: LayerId,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<LayerId>,
}

/// Channels and spatial extent of a layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// A validated graph: topological order, output shapes and consumer lists.
#[derive(Clone, Debug)]
pub struct Graph {
    pub order: Vec<usize>,
    pub index: BTreeMap<LayerId, usize>,
    pub shapes: Vec<OutShape>,
    pub consumers: Vec<Vec<usize>>,
    pub input: usize,
    pub output: usize,
}

impl NetworkSpec {
    pub fn layer(&self, id: LayerId) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Checks acyclicity, shapes, Conv→BN pairing and Add widths.
    pub fn validate(&self) -> Result<Graph> {
        let mut index = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if index.insert(l.id, i).is_some() {
                return Err(Error::Graph(format!("duplicate layer id {}", l.id)));
            }
        }
        let n = self.layers.len();
        let mut consumers = vec![Vec::new(); n];
        let mut indegree = vec![0usize; n];
        for (i, l) in self.layers.iter().enumerate() {
            let arity = match l.kind {
                LayerKind::Input { .. } => 0,
                LayerKind::Add => 2,
                _ => 1,
            };
            if l.inputs.len() != arity {
                return Err(Error::Graph(format!(
                    "layer {} ({}) needs {arity} input(s), has {}",
                    l.id,
                    l.kind.name(),
                    l.inputs.len()
                )));
            }
            for src in &l.inputs {
                let &j = index
                    .get(src)
                    .ok_or_else(|| Error::Graph(format!("layer {} reads unknown layer {src}", l.id)))?;
                consumers[j].push(i);
                indegree[i] += 1;
            }
        }

        // Kahn's algorithm; ties resolved by declaration order.
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("graph contains a cycle".into()));
        }

        let inputs: Vec<usize> = (0..n)
            .filter(|&i| matches!(self.layers[i].kind, LayerKind::Input { .. }))
            .collect();
        let [input] = inputs[..] else {
            return Err(Error::Graph(format!("expected exactly one input node, found {}", inputs.len())));
        };
        let linears: Vec<usize> = (0..n)
            .filter(|&i| matches!(self.layers[i].kind, LayerKind::Linear { .. }))
            .collect();
        let [output] = linears[..] else {
            return Err(Error::Graph(format!("expected exactly one linear output, found {}", linears.len())));
        };
        if !consumers[output].is_empty() {
            return Err(Error::Graph("the linear layer must be the network output".into()));
        }
        for i in 0..n {
            if i != output && consumers[i].is_empty() {
                return Err(Error::Graph(format!("layer {} has no consumer", self.layers[i].id)));
            }
        }

        let mut shapes = vec![
            OutShape {
                channels: 0,
                height: 0,
                width: 0
            };
            n
        ];
        for &i in &order {
            let l = &self.layers[i];
            let src = |k: usize| index[&l.inputs[k]];
            let kind_of = |j: usize| &self.layers[j].kind;
            shapes[i] = match l.kind {
                LayerKind::Input { channels, height, width } => {
                    if channels == 0 || height == 0 || width == 0 {
                        return Err(Error::Graph("input extents must be positive".into()));
                    }
                    OutShape { channels, height, width }
                }
                LayerKind::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let s = shapes[src(0)];
                    if in_channels != s.channels {
                        return Err(Error::Graph(format!(
                            "conv {} expects {in_channels} input channels, producer gives {}",
                            l.id, s.channels
                        )));
                    }
                    if out_channels == 0 || kernel == 0 {
                        return Err(Error::Graph(format!("conv {} has a zero extent", l.id)));
                    }
                    let wrap = |e: Error| Error::Graph(format!("conv {}: {e}", l.id));
                    let height = conv_output_size(s.height, kernel, stride, pad).map_err(wrap)?;
                    let width = conv_output_size(s.width, kernel, stride, pad).map_err(wrap)?;
                    // Conv-BN pairing: the sole consumer is a BatchNorm.
                    let cons = &consumers[i];
                    if cons.len() != 1 || !matches!(self.layers[cons[0]].kind, LayerKind::BatchNorm) {
                        return Err(Error::Graph(format!(
                            "conv {} must feed exactly one BatchNorm",
                            l.id
                        )));
                    }
                    OutShape {
                        channels: out_channels,
                        height,
                        width,
                    }
                }
                LayerKind::BatchNorm => {
                    if !matches!(kind_of(src(0)), LayerKind::Conv { .. }) {
                        return Err(Error::Graph(format!("batchnorm {} must follow a conv", l.id)));
                    }
                    let cons = &consumers[i];
                    if cons.len() != 1
                        || !matches!(self.layers[cons[0]].kind, LayerKind::Relu | LayerKind::Add)
                    {
                        return Err(Error::Graph(format!(
                            "batchnorm {} must feed exactly one ReLU or Add",
                            l.id
                        )));
                    }
                    shapes[src(0)]
                }
                LayerKind::Relu => {
                    if !matches!(kind_of(src(0)), LayerKind::BatchNorm | LayerKind::Add) {
                        return Err(Error::Graph(format!("relu {} must follow a batchnorm or add", l.id)));
                    }
                    shapes[src(0)]
                }
                LayerKind::Add => {
                    let (a, b) = (shapes[src(0)], shapes[src(1)]);
                    if a.channels != b.channels {
                        return Err(Error::Graph(format!(
                            "add {} joins {} and {} channels",
                            l.id, a.channels, b.channels
                        )));
                    }
                    if (a.height, a.width) != (b.height, b.width) {
                        return Err(Error::Graph(format!("add {} joins different spatial sizes", l.id)));
                    }
                    if consumers[i].len() != 1 || !matches!(self.layers[consumers[i][0]].kind, LayerKind::Relu) {
                        return Err(Error::Graph(format!("add {} must feed exactly one ReLU", l.id)));
                    }
                    a
                }
                LayerKind::GlobalAvgPool => {
                    let s = shapes[src(0)];
                    OutShape {
                        channels: s.channels,
                        height: 1,
                        width: 1,
                    }
                }
                LayerKind::Linear { classes } => {
                    if !matches!(kind_of(src(0)), LayerKind::GlobalAvgPool) {
                        return Err(Error::Graph("linear layer must follow global average pooling".into()));
                    }
                    if classes == 0 {
                        return Err(Error::Graph("linear layer needs at least one class".into()));
                    }
                    OutShape {
                        channels: classes,
                        height: 1,
                        width: 1,
                    }
                }
            };
        }
        Ok(Graph {
            order,
            index,
            shapes,
            consumers,
            input,
            output,
        })
    }

    pub fn input_shape(&self) -> Option<(usize, usize, usize)> {
        self.layers.iter().find_map(|l| match l.kind {
            LayerKind::Input { channels, height, width } => Some((channels, height, width)),
            _ => None,
        })
    }

    pub fn classes(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l.kind {
            LayerKind::Linear { classes } => Some(classes),
            _ => None,
        })
    }

    /// Ids of all conv layers in declaration order.
    pub fn conv_ids(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.id)
            .collect()
    }
}

/// Incremental builder that hands out sequential ids.
#[derive(Debug)]
pub struct SpecBuilder {
    name: String,
    layers: Vec<LayerSpec>,
    channels: BTreeMap<LayerId, usize>,
}

impl SpecBuilder {
    pub fn new(name: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        let mut b = Self {
            name: name.into(),
            layers: Vec::new(),
            channels: BTreeMap::new(),
        };
        b.push(LayerKind::Input { channels, height, width }, vec![], channels);
        b
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<LayerId>, channels: usize) -> LayerId {
        let id = self.layers.len();
        self.layers.push(LayerSpec { id, kind, inputs });
        self.channels.insert(id, channels);
        id
    }

    pub fn input(&self) -> LayerId {
        0
    }

    pub fn conv(&mut self, from: LayerId, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> LayerId {
        let in_channels = self.channels[&from];
        self.push(
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
                stride,
                pad,
            },
            vec![from],
            out_channels,
        )
    }

    pub fn bn(&mut self, from: LayerId) -> LayerId {
        let c = self.channels[&from];
        self.push(LayerKind::BatchNorm, vec![from], c)
    }

    pub fn relu(&mut self, from: LayerId) -> LayerId {
        let c = self.channels[&from];
        self.push(LayerKind::Relu, vec![from], c)
    }

    pub fn add(&mut self, left: LayerId, right: LayerId) -> LayerId {
        let c = self.channels[&left];
        self.push(LayerKind::Add, vec![left, right], c)
    }

    /// Conv → BN, returning the BN id.
    pub fn conv_bn(&mut self, from: LayerId, out_channels: usize, kernel: usize, stride: usize) -> LayerId {
        let c = self.conv(from, out_channels, kernel, stride, kernel / 2);
        self.bn(c)
    }

    /// Conv → BN → ReLU, returning the ReLU id.
    pub fn conv_bn_relu(&mut self, from: LayerId, out_channels: usize, kernel: usize, stride: usize) -> LayerId {
        let b = self.conv_bn(from, out_channels, kernel, stride);
        self.relu(b)
    }

    /// Post-activation basic residual block; projection shortcut when the
    /// width or stride changes.
    pub fn basic_block(&mut self, from: LayerId, out_channels: usize, stride: usize) -> LayerId {
        let in_channels = self.channels[&from];
        let a = self.conv_bn_relu(from, out_channels, 3, stride);
        let b = self.conv_bn(a, out_channels, 3, 1);
        let shortcut = if stride != 1 || in_channels != out_channels {
            self.conv_bn(from, out_channels, 1, stride)
        } else {
            from
        };
        let s = self.add(b, shortcut);
        self.relu(s)
    }

    pub fn head(&mut self, from: LayerId, classes: usize) -> LayerId {
        let p = self.push(LayerKind::GlobalAvgPool, vec![from], self.channels[&from]);
        self.push(LayerKind::Linear { classes }, vec![p], classes)
    }

    pub fn finish(self) -> NetworkSpec {
        NetworkSpec {
            name: self.name,
            layers: self.layers,
        }
    }
}

/// Three stages of one basic block each, widths 16/32/64.
pub fn resnet8(channels: usize, height: usize, width: usize, classes: usize) -> NetworkSpec {
    let mut b = SpecBuilder::new("resnet8", channels, height, width);
    let mut x = b.conv_bn_relu(b.input(), 16, 3, 1);
    x = b.basic_block(x, 16, 1);
    x = b.basic_block(x, 32, 2);
    x = b.basic_block(x, 64, 2);
    b.head(x, classes);
    b.finish()
}

/// Plain six-conv chain, widths 16-16-32-32-64-64 with two stride-2 stages.
pub fn convnet6(channels: usize, height: usize, width: usize, classes: usize) -> NetworkSpec {
    let mut b = SpecBuilder::new("convnet6", channels, height, width);
    let mut x = b.input();
    for (w, s) in [(16, 1), (16, 1), (32, 2), (32, 1), (64, 2), (64, 1)] {
        x = b.conv_bn_relu(x, w, 3, s);
    }
    b.head(x, classes);
    b.finish()
}

/// Built-in architecture by name.
pub fn builtin(name: &str, channels: usize, height: usize, width: usize, classes: usize) -> Result<NetworkSpec> {
    match name {
        "resnet8" => Ok(resnet8(channels, height, width, classes)),
        "convnet6" => Ok(convnet6(channels, height, width, classes)),
        other => Err(Error::Config(format!("unknown architecture `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_conv_chain() -> NetworkSpec {
        let mut b = SpecBuilder::new("chain", 3, 8, 8);
        let x = b.conv_bn_relu(b.input(), 8, 3, 1);
        let x = b.conv_bn_relu(x, 4, 3, 1);
        b.head(x, 10);
        b.finish()
    }

    #[test]
    fn plain_chain_is_valid() {
        let g = two_conv_chain().validate().unwrap();
        assert_eq!(g.order.len(), 9);
        assert_eq!(g.shapes[g.output].channels, 10);
    }

    #[test]
    fn builtins_validate() {
        resnet8(3, 32, 32, 10).validate().unwrap();
        convnet6(3, 32, 32, 10).validate().unwrap();
        assert_eq!(resnet8(3, 32, 32, 10).conv_ids().len(), 9);
        assert!(builtin("vgg", 3, 32, 32, 10).is_err());
    }

    #[test]
    fn add_channel_mismatch() {
        let mut b = SpecBuilder::new("bad", 3, 8, 8);
        let x = b.conv_bn(b.input(), 8, 3, 1);
        let y = b.conv_bn(b.input(), 4, 3, 1);
        let s = b.add(x, y);
        let r = b.relu(s);
        b.head(r, 10);
        let err = b.finish().validate().unwrap_err();
        assert!(matches!(err, Error::Graph(ref m) if m.contains("joins 8 and 4")), "{err}");
    }

    #[test]
    fn cycle_is_rejected() {
        let mut spec = two_conv_chain();
        // Feed the second conv from the last ReLU instead of the first one.
        let last_relu = spec.layers.iter().rev().find(|l| l.kind == LayerKind::Relu).unwrap().id;
        let second_conv = spec.conv_ids()[1];
        spec.layers.iter_mut().find(|l| l.id == second_conv).unwrap().inputs = vec![last_relu];
        let err = spec.validate().unwrap_err();
        assert!(matches!(err, Error::Graph(ref m) if m.contains("cycle")), "{err}");
    }

    #[test]
    fn conv_without_bn_is_rejected() {
        let mut b = SpecBuilder::new("bad", 3, 8, 8);
        let c = b.conv(b.input(), 4, 3, 1, 1);
        let r = b.relu(c);
        b.head(r, 2);
        assert!(b.finish().validate().is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let spec = resnet8(3, 32, 32, 10);
        let text = serde_json::to_string(&spec).unwrap();
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
