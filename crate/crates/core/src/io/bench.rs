//! Wall-clock micro-benchmark of every convolution over a grid of widths,
//! producing a latency table.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::LatencyTable;
use crate::error::{Error, Result};
use crate::network::{LayerKind, NetworkSpec};
use crate::tensor::{conv2d_forward, Tensor};

pub const WARMUP_PASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    pub repeats: usize,
    /// Width fractions in (0, 1]; width 1 and the full width are always added.
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            repeats: 5,
            grid: vec![0.25, 0.5, 0.75, 1.0],
            seed: 0,
        }
    }
}

/// Distinct widths `round(f·c)` over the grid plus 1 and `c`, ascending.
pub fn grid_widths(c: usize, grid: &[f64]) -> Result<Vec<usize>> {
    let mut w = vec![1, c];
    for &f in grid {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Input(format!("grid fraction {f} outside (0, 1]; widths cannot exceed the original")));
        }
        w.push(((f * c as f64).round() as usize).clamp(1, c));
    }
    w.sort_unstable();
    w.dedup();
    Ok(w)
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub table: LatencyTable,
    /// Grid points where a narrower layer measured slower.
    pub warnings: Vec<String>,
}

/// Times every convolution of `spec` at each grid point: `WARMUP_PASSES`
/// untimed passes, then the median of `repeats` timed ones, in µs. Inputs
/// read by the network input keep their channel count.
pub fn bench_latency(spec: &NetworkSpec, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.batch == 0 || cfg.repeats == 0 {
        return Err(Error::Input("batch and repeats must be positive".into()));
    }
    let graph = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for l in &spec.layers {
        let LayerKind::Conv {
            out_channels,
            in_channels,
            kernel,
            stride,
            pad,
        } = l.kind
        else {
            continue;
        };
        let src = graph.index[&l.inputs[0]];
        let shape = graph.shapes[src];
        let ms = if src == graph.input {
            vec![in_channels]
        } else {
            grid_widths(in_channels, &cfg.grid)?
        };
        let ns = grid_widths(out_channels, &cfg.grid)?;
        for &m in &ms {
            let x = Tensor::from_fn(&[cfg.batch, m, shape.height, shape.width], |_| rng.random_range(-1.0f32..1.0));
            for &n in &ns {
                let w = Tensor::from_fn(&[n, m, kernel, kernel], |_| rng.random_range(-1.0f32..1.0));
                for _ in 0..WARMUP_PASSES {
                    std::hint::black_box(conv2d_forward(&x, &w, stride, pad)?);
                }
                let mut times: Vec<f64> = (0..cfg.repeats)
                    .map(|_| {
                        let t = Instant::now();
                        let y = conv2d_forward(&x, &w, stride, pad);
                        let us = t.elapsed().as_secs_f64() * 1e6;
                        std::hint::black_box(y).map(|_| us)
                    })
                    .collect::<Result<_>>()?;
                // The table format needs strictly positive costs.
                entries.push((l.id, m, n, median(&mut times).max(1e-3)));
            }
        }
    }
    let table = LatencyTable::from_entries(&entries)?;
    let warnings = table.monotonicity_violations();
    Ok(BenchReport { table, warnings })
}
