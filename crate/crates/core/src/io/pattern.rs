//! Per-layer keep patterns as CSV and as a horizontal bar chart.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::network::{effective_spec, LayerKind, Model, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternRow {
    /// 1-based position among the convolutions.
    pub index: usize,
    pub kernel: usize,
    pub original: usize,
    pub kept: usize,
}

fn convs(spec: &NetworkSpec) -> Vec<(usize, usize)> {
    spec.layers
        .iter()
        .filter_map(|l| match l.kind {
            LayerKind::Conv {
                out_channels, kernel, ..
            } => Some((kernel, out_channels)),
            _ => None,
        })
        .collect()
}

/// Rows comparing a reference spec with a pruned one of the same topology.
pub fn pattern_between(reference: &NetworkSpec, pruned: &NetworkSpec) -> Result<Vec<PatternRow>> {
    let (a, b) = (convs(reference), convs(pruned));
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "reference has {} convolutions, pruned model {}",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(&b)
        .enumerate()
        .map(|(i, (&(k, n0), &(k1, n1)))| {
            if k != k1 || n1 > n0 {
                return Err(Error::Input(format!("convolution {} does not match the reference", i + 1)));
            }
            Ok(PatternRow {
                index: i + 1,
                kernel: k,
                original: n0,
                kept: n1,
            })
        })
        .collect()
}

/// Rows of a masked model against its own unpruned widths.
pub fn pattern_of(model: &Model) -> Vec<PatternRow> {
    pattern_between(model.spec(), &effective_spec(model)).expect("same topology")
}

pub fn pattern_csv(rows: &[PatternRow]) -> String {
    let mut s = String::from("layer,kernel,original,kept\n");
    for r in rows {
        let _ = writeln!(s, "{},{}x{},{},{}", r.index, r.kernel, r.kernel, r.original, r.kept);
    }
    s
}

const BAR_H: f64 = 14.0;
const GAP: f64 = 4.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 20.0;
const PLOT_W: f64 = 400.0;

/// One bar per convolution, top to bottom. The bar spans the original width;
/// the kept prefix is black for 3×3 kernels, green for 1×1 and grey for
/// anything else; the pruned remainder is white.
pub fn pattern_svg(rows: &[PatternRow]) -> String {
    let max = rows.iter().map(|r| r.original).max().unwrap_or(1).max(1) as f64;
    let scale = PLOT_W / max;
    let plot_h = rows.len() as f64 * (BAR_H + GAP) + GAP;
    let (w, h) = (LEFT + PLOT_W + 30.0, TOP + plot_h + 50.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (i, r) in rows.iter().enumerate() {
        let y = TOP + GAP + i as f64 * (BAR_H + GAP);
        let fill = match r.kernel {
            3 => "black",
            1 => "green",
            _ => "gray",
        };
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{y}" width="{:.2}" height="{BAR_H}" fill="white" stroke="black" stroke-width="0.5"/>"#,
            r.original as f64 * scale
        );
        let _ = writeln!(
            s,
            r#"<rect class="kept" x="{LEFT}" y="{y}" width="{:.2}" height="{BAR_H}" fill="{fill}"/>"#,
            r.kept as f64 * scale
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            y + BAR_H - 3.0,
            r.index
        );
    }
    let axis_y = TOP + plot_h;
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#,
        LEFT + PLOT_W
    );
    for t in 0..=4 {
        let v = max * t as f64 / 4.0;
        let x = LEFT + v * scale;
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            axis_y + 14.0,
            v.round()
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">size of output channels</text>"#,
        LEFT + PLOT_W / 2.0,
        axis_y + 34.0
    );
    let mid = TOP + plot_h / 2.0;
    let _ = writeln!(
        s,
        r#"<text x="14" y="{mid}" text-anchor="middle" transform="rotate(-90 14 {mid})">index of convolution layer</text>"#
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{materialize, resnet8, PruneMask, SpecBuilder};

    #[test]
    fn unpruned_bars_are_full() {
        let m = Model::init(resnet8(3, 8, 8, 10), 0).unwrap();
        let rows = pattern_of(&m);
        assert_eq!(rows.len(), 9);
        assert!(rows.iter().all(|r| r.kept == r.original));
        // The two projection shortcuts are 1x1.
        let ones: Vec<usize> = rows.iter().filter(|r| r.kernel == 1).map(|r| r.index).collect();
        assert_eq!(ones, vec![6, 9]);
        assert_eq!(rows[8].original, 64);
        let svg = pattern_svg(&rows);
        assert!(svg.contains("size of output channels") && svg.contains("index of convolution layer"));
    }

    #[test]
    fn kept_counts_match_materialized_widths() {
        let mut m = Model::init(resnet8(3, 8, 8, 10), 0).unwrap();
        let mut mask = PruneMask::all_keep(&m);
        mask.keep[0][..5].iter_mut().for_each(|k| *k = false);
        mask.keep[4][..30].iter_mut().for_each(|k| *k = false);
        crate::network::apply_mask(&mut m, &mask).unwrap();
        let small = materialize(&m, &mask).unwrap();
        let masked = pattern_of(&m);
        assert_eq!(pattern_between(m.spec(), small.spec()).unwrap(), masked);
        let csv = pattern_csv(&masked);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,kernel,original,kept");
        // Convs 1 and 3 (ids 1, 8) share group 0.
        assert_eq!(lines[1], "1,3x3,16,11");
        assert_eq!(lines[3], "3,3x3,16,11");
        assert_eq!(lines[7], "7,3x3,64,34");
    }

    #[test]
    fn colours_follow_kernel_size() {
        let mut b = SpecBuilder::new("mixed", 3, 8, 8);
        let x = b.conv_bn_relu(b.input(), 8, 3, 1);
        let x = b.conv_bn_relu(x, 8, 1, 1);
        b.head(x, 2);
        let m = Model::init(b.finish(), 0).unwrap();
        let svg = pattern_svg(&pattern_of(&m));
        let kept: Vec<&str> = svg.lines().filter(|l| l.contains("class=\"kept\"")).collect();
        assert!(kept[0].contains("fill=\"black\"") && kept[1].contains("fill=\"green\""));
        assert_eq!(pattern_csv(&pattern_of(&m)).lines().nth(2), Some("2,1x1,8,8"));
    }

    #[test]
    fn mismatched_topology_is_rejected() {
        let a = resnet8(3, 8, 8, 10);
        let b = crate::network::convnet6(3, 8, 8, 10);
        assert!(pattern_between(&a, &b).is_err());
    }
}
