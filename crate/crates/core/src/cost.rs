//! Network cost under FLOPs, parameter count, or a measured latency table,
//! and the per-channel marginal cost α of every channel group.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ChannelGroups, Graph, LayerId, LayerKind, NetworkSpec};

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Flops,
    Params,
    Latency(LatencyTable),
}

/// Objective name without its data, as used in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Flops,
    Params,
    Latency,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flops" => Ok(Self::Flops),
            "params" => Ok(Self::Params),
            "latency" => Ok(Self::Latency),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Flops => "flops",
            Self::Params => "params",
            Self::Latency => "latency",
        })
    }
}

impl Objective {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Objective::Flops => ObjectiveKind::Flops,
            Objective::Params => ObjectiveKind::Params,
            Objective::Latency(_) => ObjectiveKind::Latency,
        }
    }
}

/// `2·n·m·k²·out_h·out_w`: one multiply and one add per accumulation.
pub fn layer_flops(n: usize, m: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    2 * (n * m * k * k * out_h * out_w) as u64
}

/// Learnable parameter count. `in_channels` is the width of the layer's
/// input (BN channels, Linear features).
pub fn layer_params(kind: &LayerKind, in_channels: usize) -> u64 {
    match *kind {
        LayerKind::Conv {
            out_channels,
            in_channels: m,
            kernel,
            ..
        } => (out_channels * m * kernel * kernel) as u64,
        LayerKind::BatchNorm => 2 * in_channels as u64,
        LayerKind::Linear { classes } => (classes * in_channels + classes) as u64,
        _ => 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: LayerId,
    pub kind: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub objective: ObjectiveKind,
    pub total: f64,
    pub layers: Vec<LayerCost>,
    /// Marginal cost of one channel of each group.
    pub alpha: Vec<f64>,
}

impl CostReport {
    pub fn layer(&self, id: LayerId) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn max_alpha(&self) -> f64 {
        self.alpha.iter().copied().fold(0.0, f64::max)
    }

    /// Plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "objective: {}", self.objective);
        let _ = writeln!(s, "total: {}", fmt_cost(self.total));
        let _ = writeln!(
            s,
            "{:>5} {:<10} {:>6} {:>6} {:>3} {:>9} {:>14}",
            "layer", "kind", "m", "n", "k", "out", "cost"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5} {:<10} {:>6} {:>6} {:>3} {:>9} {:>14}",
                l.id,
                l.kind,
                l.in_channels,
                l.out_channels,
                l.kernel,
                format!("{}x{}", l.out_h, l.out_w),
                fmt_cost(l.cost)
            );
        }
        s
    }

    /// CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,in_channels,out_channels,kernel,out_h,out_w,cost\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                l.id, l.kind, l.in_channels, l.out_channels, l.kernel, l.out_h, l.out_w, l.cost
            );
        }
        s
    }
}

fn fmt_cost(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

fn conv_cost(objective: &Objective, id: LayerId, kind: &LayerKind, oh: usize, ow: usize) -> Result<f64> {
    let &LayerKind::Conv {
        out_channels,
        in_channels,
        kernel,
        ..
    } = kind
    else {
        return Ok(0.0);
    };
    Ok(match objective {
        Objective::Flops => layer_flops(out_channels, in_channels, kernel, oh, ow) as f64,
        Objective::Params => layer_params(kind, in_channels) as f64,
        Objective::Latency(t) => t.lookup(id, in_channels, out_channels)?,
    })
}

/// Total cost with a per-layer breakdown over Conv, BatchNorm and Linear
/// layers, plus α for the groups of `spec`.
pub fn total_cost(spec: &NetworkSpec, groups: &ChannelGroups, objective: &Objective) -> Result<CostReport> {
    let graph = spec.validate()?;
    let mut layers = Vec::new();
    let mut total = 0.0;
    for l in &spec.layers {
        let i = graph.index[&l.id];
        let shape = graph.shapes[i];
        let in_c = l.inputs.first().map(|s| graph.shapes[graph.index[s]].channels).unwrap_or(0);
        let (m, n, k) = match l.kind {
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel,
                ..
            } => (in_channels, out_channels, kernel),
            LayerKind::BatchNorm => (in_c, in_c, 0),
            LayerKind::Linear { classes } => (in_c, classes, 0),
            _ => continue,
        };
        let cost = match (&l.kind, objective) {
            (LayerKind::Conv { .. }, _) => conv_cost(objective, l.id, &l.kind, shape.height, shape.width)?,
            (_, Objective::Params) => layer_params(&l.kind, in_c) as f64,
            _ => 0.0,
        };
        total += cost;
        layers.push(LayerCost {
            id: l.id,
            kind: l.kind.name().to_string(),
            in_channels: m,
            out_channels: n,
            kernel: k,
            out_h: shape.height,
            out_w: shape.width,
            cost,
        });
    }
    let alpha = alpha_with(spec, &graph, groups, objective)?;
    Ok(CostReport {
        objective: objective.kind(),
        total,
        layers,
        alpha,
    })
}

/// Marginal cost of removing one channel of each group at the widths in
/// `spec`: every producing conv loses a filter, every consuming conv an
/// input slice; under Params also each member BN's γ, β and a head column.
pub fn group_alpha(spec: &NetworkSpec, groups: &ChannelGroups, objective: &Objective) -> Result<Vec<f64>> {
    let graph = spec.validate()?;
    alpha_with(spec, &graph, groups, objective)
}

fn alpha_with(spec: &NetworkSpec, graph: &Graph, groups: &ChannelGroups, objective: &Objective) -> Result<Vec<f64>> {
    let conv_of = |id: LayerId| -> Result<(f64, usize, usize)> {
        let l = spec
            .layer(id)
            .ok_or_else(|| Error::Graph(format!("group references unknown layer {id}")))?;
        let s = graph.shapes[graph.index[&id]];
        let cost = conv_cost(objective, id, &l.kind, s.height, s.width)?;
        match l.kind {
            LayerKind::Conv {
                out_channels,
                in_channels,
                ..
            } => Ok((cost, in_channels, out_channels)),
            _ => Err(Error::Graph(format!("layer {id} is not a convolution"))),
        }
    };
    let classes = spec.classes().unwrap_or(0);
    groups
        .groups
        .iter()
        .map(|g| {
            let mut a = 0.0;
            for &p in &g.producers {
                let (cost, _, n) = conv_of(p)?;
                a += cost / n as f64;
            }
            for &c in &g.consumers {
                let (cost, m, _) = conv_of(c)?;
                a += cost / m as f64;
            }
            if let Objective::Params = objective {
                a += 2.0 * g.members.len() as f64;
                if g.feeds_head {
                    a += classes as f64;
                }
            }
            Ok(a)
        })
        .collect()
}

/// Per-iteration reduction target `(η/T)·C_original`.
pub fn step_budget(c_original: f64, eta: f64, iterations: usize, t: usize) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Input(format!("eta must lie in (0, 1), got {eta}")));
    }
    if iterations == 0 || t == 0 || t > iterations {
        return Err(Error::Input(format!("iteration {t} outside 1..={iterations}")));
    }
    if !(c_original >= 0.0 && c_original.is_finite()) {
        return Err(Error::Input(format!("invalid original cost {c_original}")));
    }
    Ok(eta / iterations as f64 * c_original)
}

/// Measured per-conv cost on a rectangular grid of (m, n) widths.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LatencyTable {
    layers: BTreeMap<LayerId, LatencyGrid>,
}

#[derive(Clone, Debug, PartialEq)]
struct LatencyGrid {
    ms: Vec<usize>,
    ns: Vec<usize>,
    /// Row-major over (m, n).
    values: Vec<f64>,
}

impl LatencyGrid {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ns.len() + j]
    }
}

/// Index pair bracketing `x` and the interpolation weight of the upper one.
fn bracket(nodes: &[usize], x: usize) -> Option<(usize, usize, f64)> {
    match nodes.binary_search(&x) {
        Ok(i) => Some((i, i, 0.0)),
        Err(0) => None,
        Err(i) if i == nodes.len() => None,
        Err(i) => {
            let (lo, hi) = (nodes[i - 1], nodes[i]);
            Some((i - 1, i, (x - lo) as f64 / (hi - lo) as f64))
        }
    }
}

impl LatencyTable {
    /// Parses lines of `layer_id m n cost_us`; blank lines and `#` comments
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw: BTreeMap<LayerId, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Config(format!("latency table line {}: expected `layer m n cost`", lineno + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let id: LayerId = f[0].parse().map_err(|_| bad())?;
            let m: usize = f[1].parse().map_err(|_| bad())?;
            let n: usize = f[2].parse().map_err(|_| bad())?;
            let cost: f64 = f[3].parse().map_err(|_| bad())?;
            if !(cost > 0.0 && cost.is_finite()) || m == 0 || n == 0 {
                return Err(Error::Config(format!(
                    "latency table line {}: widths and cost must be positive",
                    lineno + 1
                )));
            }
            if raw.entry(id).or_default().insert((m, n), cost).is_some() {
                return Err(Error::Config(format!("latency table line {}: duplicate entry", lineno + 1)));
            }
        }
        let mut layers = BTreeMap::new();
        for (id, entries) in raw {
            let mut ms: Vec<usize> = entries.keys().map(|k| k.0).collect();
            let mut ns: Vec<usize> = entries.keys().map(|k| k.1).collect();
            ms.sort_unstable();
            ms.dedup();
            ns.sort_unstable();
            ns.dedup();
            let mut values = Vec::with_capacity(ms.len() * ns.len());
            for &m in &ms {
                for &n in &ns {
                    values.push(*entries.get(&(m, n)).ok_or_else(|| {
                        Error::Config(format!("latency table for layer {id} lacks grid point ({m}, {n})"))
                    })?);
                }
            }
            layers.insert(id, LatencyGrid { ms, ns, values });
        }
        Ok(Self { layers })
    }

    pub fn from_entries(entries: &[(LayerId, usize, usize, f64)]) -> Result<Self> {
        let text: String = entries
            .iter()
            .map(|(id, m, n, c)| format!("{id} {m} {n} {c}\n"))
            .collect();
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# layer_id m n cost_us\n");
        for (id, g) in &self.layers {
            for (i, m) in g.ms.iter().enumerate() {
                for (j, n) in g.ns.iter().enumerate() {
                    let _ = writeln!(s, "{id} {m} {n} {}", g.at(i, j));
                }
            }
        }
        s
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.layers.keys().copied().collect()
    }

    /// Bilinear interpolation of the cost of `layer` at `m` inputs and `n`
    /// outputs.
    pub fn lookup(&self, layer: LayerId, m: usize, n: usize) -> Result<f64> {
        let g = self
            .layers
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("latency table has no entries for layer {layer}")))?;
        let out_of_range = || {
            Error::Config(format!(
                "latency table for layer {layer} covers m {}..={} and n {}..={}, not ({m}, {n})",
                g.ms[0],
                g.ms[g.ms.len() - 1],
                g.ns[0],
                g.ns[g.ns.len() - 1]
            ))
        };
        let (i0, i1, u) = bracket(&g.ms, m).ok_or_else(out_of_range)?;
        let (j0, j1, v) = bracket(&g.ns, n).ok_or_else(out_of_range)?;
        let top = g.at(i0, j0) * (1.0 - v) + g.at(i0, j1) * v;
        let bottom = g.at(i1, j0) * (1.0 - v) + g.at(i1, j1) * v;
        Ok(top * (1.0 - u) + bottom * u)
    }

    /// Checks that every conv of `spec` is covered at its current widths.
    pub fn check_covers(&self, spec: &NetworkSpec) -> Result<()> {
        for l in &spec.layers {
            if let LayerKind::Conv {
                out_channels,
                in_channels,
                ..
            } = l.kind
            {
                self.lookup(l.id, in_channels, out_channels)?;
            }
        }
        Ok(())
    }

    /// Grid points where the cost grows as a width shrinks.
    pub fn monotonicity_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (id, g) in &self.layers {
            for i in 0..g.ms.len() {
                for j in 0..g.ns.len() {
                    if i > 0 && g.at(i - 1, j) > g.at(i, j) {
                        out.push(format!(
                            "layer {id}: cost at m={} exceeds cost at m={} (n={})",
                            g.ms[i - 1],
                            g.ms[i],
                            g.ns[j]
                        ));
                    }
                    if j > 0 && g.at(i, j - 1) > g.at(i, j) {
                        out.push(format!(
                            "layer {id}: cost at n={} exceeds cost at n={} (m={})",
                            g.ns[j - 1],
                            g.ns[j],
                            g.ms[i]
                        ));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_groups, resnet8, SpecBuilder};

    fn two_layer() -> NetworkSpec {
        let mut b = SpecBuilder::new("two", 3, 16, 16);
        let x = b.conv_bn_relu(b.input(), 8, 3, 1);
        let x = b.conv_bn_relu(x, 4, 3, 1);
        b.head(x, 10);
        b.finish()
    }

    /// Counts one multiply and one add per accumulation by walking every
    /// output element.
    fn brute_flops(n: usize, m: usize, k: usize, oh: usize, ow: usize) -> u64 {
        let mut count = 0;
        for _ in 0..n {
            for _ in 0..oh * ow {
                for _ in 0..m * k * k {
                    count += 2;
                }
            }
        }
        count
    }

    #[test]
    fn flop_examples() {
        assert_eq!(layer_flops(8, 3, 3, 16, 16), 110_592);
        assert_eq!(brute_flops(8, 3, 3, 16, 16), 110_592);
        assert_eq!(layer_flops(1, 1, 1, 1, 1), 2);
        assert_eq!(layer_flops(16, 3, 3, 16, 16), 2 * layer_flops(8, 3, 3, 16, 16));
    }

    #[test]
    fn param_examples() {
        let conv = LayerKind::Conv {
            out_channels: 8,
            in_channels: 3,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        assert_eq!(layer_params(&conv, 3), 216);
        assert_eq!(layer_params(&LayerKind::BatchNorm, 8), 16);
        assert_eq!(layer_params(&LayerKind::Linear { classes: 10 }, 64), 650);
    }

    #[test]
    fn two_layer_totals() {
        let spec = two_layer();
        let groups = build_groups(&spec).unwrap();
        let f = total_cost(&spec, &groups, &Objective::Flops).unwrap();
        assert_eq!(f.total, 258_048.0);
        assert_eq!(f.layers.iter().map(|l| l.cost).sum::<f64>(), f.total);
        let p = total_cost(&spec, &groups, &Objective::Params).unwrap();
        assert_eq!(p.total, (216 + 16 + 288 + 8 + 40 + 10) as f64);
    }

    #[test]
    fn two_layer_alpha() {
        let spec = two_layer();
        let groups = build_groups(&spec).unwrap();
        let f = group_alpha(&spec, &groups, &Objective::Flops).unwrap();
        assert_eq!(f[0], 32_256.0);
        let p = group_alpha(&spec, &groups, &Objective::Params).unwrap();
        assert_eq!(p[0], 65.0);
        // Last group: conv2 filter (72) + BN (2) + head column (10).
        assert_eq!(p[1], 84.0);
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(step_budget(1000.0, 0.4, 4, 1).unwrap(), 100.0);
        assert!((step_budget(1000.0, 0.4, 1, 1).unwrap() - 400.0).abs() < 1e-12);
        let total: f64 = (1..=4).map(|t| step_budget(1000.0, 0.4, 4, t).unwrap()).sum();
        assert!((total - 400.0).abs() < 1e-9);
        assert!(step_budget(1000.0, 1.0, 4, 1).is_err());
        assert!(step_budget(1000.0, 0.5, 4, 5).is_err());
        assert!(step_budget(1000.0, 0.5, 0, 1).is_err());
    }

    #[test]
    fn resnet8_alpha_profiles() {
        let spec = resnet8(3, 32, 32, 10);
        let groups = build_groups(&spec).unwrap();
        let f = group_alpha(&spec, &groups, &Objective::Flops).unwrap();
        let p = group_alpha(&spec, &groups, &Objective::Params).unwrap();
        assert!(f.iter().chain(&p).all(|&a| a > 0.0));
        // Under FLOPs early groups cost more per channel; under params late ones.
        let halves = |a: &[f64]| (a[..3].iter().sum::<f64>(), a[3..].iter().sum::<f64>());
        let (fe, fl) = halves(&f);
        let (pe, pl) = halves(&p);
        assert!(fe > fl && pe < pl);
        assert_eq!(p[1], 144.0 + 144.0 + 2.0);
    }

    #[test]
    fn latency_interpolation() {
        let t = LatencyTable::parse("# c\n1 2 2 10\n1 2 4 20\n1 4 2 30\n1 4 4 60\n").unwrap();
        assert_eq!(t.lookup(1, 2, 2).unwrap(), 10.0);
        assert_eq!(t.lookup(1, 4, 4).unwrap(), 60.0);
        assert_eq!(t.lookup(1, 3, 2).unwrap(), 20.0);
        assert_eq!(t.lookup(1, 3, 3).unwrap(), 30.0);
        assert!(matches!(t.lookup(1, 5, 2), Err(Error::Config(_))));
        assert!(matches!(t.lookup(2, 2, 2), Err(Error::Config(_))));
        assert_eq!(LatencyTable::parse(&t.to_text()).unwrap(), t);
        assert!(t.monotonicity_violations().is_empty());
    }

    #[test]
    fn latency_table_rejects_holes_and_bad_values() {
        assert!(LatencyTable::parse("1 2 2 10\n1 4 4 60\n").is_err());
        assert!(LatencyTable::parse("1 2 2 -1\n").is_err());
        assert!(LatencyTable::parse("1 2 2\n").is_err());
        assert!(LatencyTable::parse("1 2 2 1\n1 2 2 3\n").is_err());
    }

    #[test]
    fn missing_latency_coverage_is_config_error() {
        let spec = two_layer();
        let groups = build_groups(&spec).unwrap();
        let t = LatencyTable::parse("1 1 1 1\n1 3 1 2\n1 1 8 3\n1 3 8 4\n").unwrap();
        let r = total_cost(&spec, &groups, &Objective::Latency(t));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
