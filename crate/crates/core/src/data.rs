//! Image datasets: MNIST IDX and CIFAR-10 binary readers, stratified
//! subsets, per-channel normalization and seeded batching.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3072;

/// Undecoded images, `u8` pixels in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn select(&self, indices: &[usize]) -> RawImages {
        let len = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * len..(i + 1) * len]);
        }
        RawImages {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(format_err(path, "file shorter than the IDX image header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(format_err(path, format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, h, w) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(format_err(path, format!("expected {need} bytes, found {}", bytes.len())));
    }
    Ok((n, h, w, bytes[16..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(format_err(path, "file shorter than the IDX label header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABEL_MAGIC {
        return Err(format_err(path, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(format_err(path, format!("expected {} bytes, found {}", 8 + n, bytes.len())));
    }
    Ok(bytes[8..8 + n].to_vec())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<RawImages> {
    let (n, h, w, pixels) = parse_idx_images(&read(images)?, images)?;
    let labels_v = parse_idx_labels(&read(labels)?, labels)?;
    if labels_v.len() != n {
        return Err(format_err(labels, format!("{} labels for {n} images", labels_v.len())));
    }
    Ok(RawImages {
        pixels,
        labels: labels_v,
        channels: 1,
        height: h,
        width: w,
    })
}

pub fn parse_cifar(bytes: &[u8], path: &Path) -> Result<RawImages> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format_err(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(format_err(path, format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(RawImages {
        pixels,
        labels,
        channels: 3,
        height: 32,
        width: 32,
    })
}

pub fn load_cifar(paths: &[&Path]) -> Result<RawImages> {
    let mut all: Option<RawImages> = None;
    for &p in paths {
        let part = parse_cifar(&read(p)?, p)?;
        match &mut all {
            Some(a) => {
                a.pixels.extend(part.pixels);
                a.labels.extend(part.labels);
            }
            None => all = Some(part),
        }
    }
    all.ok_or_else(|| Error::Input("no CIFAR-10 files given".into()))
}

pub fn write_cifar(path: &Path, raw: &RawImages) -> Result<()> {
    if raw.channels != 3 || raw.height != 32 || raw.width != 32 {
        return Err(Error::Input("CIFAR-10 records hold 3x32x32 images".into()));
    }
    let mut bytes = Vec::with_capacity(raw.len() * CIFAR_RECORD);
    for (i, &l) in raw.labels.iter().enumerate() {
        bytes.push(l);
        bytes.extend_from_slice(&raw.pixels[i * 3072..(i + 1) * 3072]);
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Indices of a class-balanced subset: `size / classes` per class, the
/// remainder going to the lowest class ids. Sampling within a class is
/// seeded; the result is sorted.
pub fn stratified_subset(labels: &[u8], size: usize, seed: u64) -> Result<Vec<usize>> {
    if size >= labels.len() {
        return Ok((0..labels.len()).collect());
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for (c, members) in by_class.iter_mut().enumerate() {
        let quota = size / classes + usize::from(c < size % classes);
        if members.len() < quota {
            return Err(Error::Input(format!(
                "class {c} has {} samples, subset needs {quota}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..quota]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Per-channel mean and standard deviation on the `[0, 1]` pixel scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn fit(raw: &RawImages) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Input("cannot fit normalization on an empty dataset".into()));
        }
        let plane = raw.height * raw.width;
        let mut sum = vec![0.0f64; raw.channels];
        let mut sq = vec![0.0f64; raw.channels];
        for img in raw.pixels.chunks_exact(raw.image_len()) {
            for c in 0..raw.channels {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (raw.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0)).sqrt().max(1e-3) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Normalized images ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn from_raw(raw: &RawImages, norm: &Normalization, classes: usize) -> Result<Self> {
        if norm.mean.len() != raw.channels {
            return Err(Error::dim("normalization", &[norm.mean.len()], &[raw.channels]));
        }
        if let Some(&bad) = raw.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        let plane = raw.height * raw.width;
        let images = raw
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i / plane) % raw.channels;
                (p as f32 / 255.0 - norm.mean[c]) / norm.std[c]
            })
            .collect();
        Ok(Self {
            images,
            labels: raw.labels.iter().map(|&l| l as usize).collect(),
            channels: raw.channels,
            height: raw.height,
            width: raw.width,
            classes,
        })
    }

    /// Wraps already-normalized NCHW data.
    pub fn from_tensor(images: &Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let [n, c, h, w] = images.dims4("dataset")?;
        if labels.len() != n {
            return Err(Error::dim("dataset labels", &[labels.len()], &[n]));
        }
        Ok(Self {
            images: images.data().to_vec(),
            labels,
            channels: c,
            height: h,
            width: w,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images[i * len..(i + 1) * len]);
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("gathered sizes agree");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Index batches for one epoch. With `shuffle`, the order depends only on
    /// `(seed, epoch)`. A trailing batch smaller than 2 is folded into the
    /// previous one so batch statistics stay defined.
    pub fn batch_indices(&self, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
        }
        let bs = batch_size.max(1);
        let mut batches: Vec<Vec<usize>> = order.chunks(bs).map(|c| c.to_vec()).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().expect("checked");
            batches.last_mut().expect("checked").extend(tail);
        }
        batches
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (t, labels) = self.gather(indices);
        Dataset {
            images: t.into_data(),
            labels,
            ..*self
        }
    }
}

/// Settings of the synthetic texture-classification task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    /// Standard deviation of the additive pixel noise on the `[0, 1]` scale.
    pub noise: f64,
    /// Upper bound of the weight of a distractor pattern from another class.
    pub distractor: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 10_000,
            classes: 10,
            noise: 0.25,
            distractor: 0.9,
            seed: 0,
        }
    }
}

struct Pattern {
    freq: [(f64, f64); 2],
    color: [[f64; 3]; 2],
}

/// 32×32 RGB images whose class is a pair of coloured oriented gratings;
/// every sample has a random phase, contrast, a distractor grating of
/// another class and pixel noise. Classes are balanced.
pub fn synthetic_cifar(spec: &SyntheticSpec) -> RawImages {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Class patterns depend only on the class count so train and test sets
    // generated with different seeds describe the same task.
    let mut prng = ChaCha8Rng::seed_from_u64(0x5E_ED0F_7A5C ^ spec.classes as u64);
    let patterns: Vec<Pattern> = (0..spec.classes)
        .map(|_| {
            let mut freq = [(0.0, 0.0); 2];
            let mut color = [[0.0; 3]; 2];
            for k in 0..2 {
                let angle = prng.random_range(0.0..PI);
                let f = prng.random_range(1.5..6.0);
                freq[k] = (f * angle.cos(), f * angle.sin());
                for c in &mut color[k] {
                    *c = prng.random_range(-1.0..1.0);
                }
            }
            Pattern { freq, color }
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid deviation");
    let mut pixels = Vec::with_capacity(spec.samples * 3072);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut img = vec![0.0f64; 3072];
    for s in 0..spec.samples {
        let label = s % spec.classes;
        let other = (label + rng.random_range(1..spec.classes.max(2))) % spec.classes.max(1);
        let weights = [rng.random_range(0.6..1.0), rng.random_range(0.0..spec.distractor.max(1e-9))];
        img.iter_mut().for_each(|v| *v = 0.0);
        for (pat, wgt) in [(&patterns[label], weights[0]), (&patterns[other], weights[1])] {
            for k in 0..2 {
                let phase = rng.random_range(0.0..2.0 * PI);
                let (fx, fy) = pat.freq[k];
                for y in 0..32 {
                    for x in 0..32 {
                        let v = wgt * (2.0 * PI * (fx * x as f64 + fy * y as f64) / 32.0 + phase).sin();
                        for c in 0..3 {
                            img[c * 1024 + y * 32 + x] += 0.5 * v * pat.color[k][c];
                        }
                    }
                }
            }
        }
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
        for (i, v) in img.iter().enumerate() {
            let p = 0.5 + 0.25 * v + shift[i / 1024] + noise.sample(&mut rng);
            pixels.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        labels.push(label as u8);
    }
    RawImages {
        pixels,
        labels,
        channels: 3,
        height: 32,
        width: 32,
    }
}
