//! Model container: a directory holding `manifest.json`, its SHA-256 in
//! `manifest.sha256`, and one little-endian f32 blob per tensor under
//! `blobs/`. The manifest records each blob's shape and SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::gcp::PruneHistory;
use crate::network::{LayerId, Model, ModelParts, NetworkSpec};
use crate::tensor::{BnParams, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const MANIFEST_SUM: &str = "manifest.sha256";
const BLOBS: &str = "blobs";

/// Short record of the pruning run that produced a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub objective: String,
    pub eta: f64,
    pub iterations: usize,
    pub original_cost: f64,
    pub final_cost: Option<f64>,
    pub kept_per_group: Vec<usize>,
}

impl HistorySummary {
    pub fn of(h: &PruneHistory) -> Self {
        Self {
            objective: h.objective.map(|o| o.to_string()).unwrap_or_default(),
            eta: h.eta,
            iterations: h.iterations,
            original_cost: h.original_cost,
            final_cost: h.final_cost,
            kept_per_group: h.steps.last().map(|s| s.kept_per_group.clone()).unwrap_or_default(),
        }
    }
}

/// A model plus what is needed to use it on raw images.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub normalization: Option<Normalization>,
    pub history: Option<HistorySummary>,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            model,
            seed,
            normalization: None,
            history: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    dtype: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GroupEntry {
    id: usize,
    kept: Vec<bool>,
    mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    seed: u64,
    spec: NetworkSpec,
    layers: Vec<String>,
    bn_eps: BTreeMap<LayerId, f32>,
    global_stats: bool,
    groups: Vec<GroupEntry>,
    normalization: Option<Normalization>,
    history: Option<HistorySummary>,
    tensors: Vec<TensorEntry>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `ckpt` into directory `dir`, creating it if needed. Stale blobs
/// from an earlier save are removed.
pub fn save_model(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let blob_dir = dir.join(BLOBS);
    if blob_dir.exists() {
        fs::remove_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    }
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let m = &ckpt.model;
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (id, w) in m.conv_weights() {
        named.push((format!("conv{id}.weight"), w));
    }
    for (id, p) in m.bn_params() {
        named.push((format!("bn{id}.gamma"), &p.gamma));
        named.push((format!("bn{id}.beta"), &p.beta));
        named.push((format!("bn{id}.running_mean"), &p.running_mean));
        named.push((format!("bn{id}.running_var"), &p.running_var));
    }
    let mut groups = Vec::new();
    for g in m.groups() {
        let mask = g.mask.as_ref().map(|t| {
            let name = format!("group{}.mask", g.info.id);
            named.push((name.clone(), t));
            name
        });
        groups.push(GroupEntry {
            id: g.info.id,
            kept: g.kept.clone(),
            mask,
        });
    }
    let (hw, hb) = m.head();
    named.push(("head.weight".into(), hw));
    named.push(("head.bias".into(), hb));

    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let bytes = encode(t);
        let file = format!("{BLOBS}/{name}.f32");
        write(&dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.shape().to_vec(),
            dtype: "f32le".into(),
            sha256: sha_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: ckpt.seed,
        spec: m.spec().clone(),
        layers: m
            .spec()
            .layers
            .iter()
            .map(|l| format!("{} {}", l.id, l.kind.name()))
            .collect(),
        bn_eps: m.bn_params().iter().map(|(&id, p)| (id, p.eps)).collect(),
        global_stats: m.has_global_stats(),
        groups,
        normalization: ckpt.normalization.clone(),
        history: ckpt.history.clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    write(&dir.join(MANIFEST), text.as_bytes())?;
    write(&dir.join(MANIFEST_SUM), format!("{}\n", sha_hex(text.as_bytes())).as_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a container written by [`save_model`], verifying every checksum.
pub fn load_model(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::Manifest(format!("{} not found", manifest_path.display())));
    }
    let bytes = read(&manifest_path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Manifest("format_version missing".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let sum_path = dir.join(MANIFEST_SUM);
    let stored = fs::read(&sum_path).map_err(|_| Error::MissingBlob {
        tensor: "manifest".into(),
        path: sum_path.clone(),
    })?;
    if stored.strip_suffix(b"\n").unwrap_or(&stored) != sha_hex(&bytes).as_bytes() {
        return Err(Error::Checksum {
            tensor: "manifest".into(),
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))?;

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f32le" {
            return Err(Error::Manifest(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        if e.file.contains("..") || Path::new(&e.file).is_absolute() {
            return Err(Error::Manifest(format!("tensor {} points outside the container", e.name)));
        }
        let path: PathBuf = dir.join(&e.file);
        if !path.is_file() {
            return Err(Error::MissingBlob {
                tensor: e.name.clone(),
                path,
            });
        }
        let raw = read(&path)?;
        let numel: usize = e.shape.iter().product();
        if raw.len() != numel * 4 {
            return Err(Error::TruncatedBlob {
                tensor: e.name.clone(),
                expected: numel * 4,
                found: raw.len(),
            });
        }
        if sha_hex(&raw) != e.sha256 {
            return Err(Error::Checksum { tensor: e.name.clone() });
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(Error::Manifest(format!("tensor {} listed twice", e.name)));
        }
    }
    let mut take = |name: String| -> Result<Tensor<f32>> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Manifest(format!("tensor {name} not listed")))
    };

    let spec = manifest.spec;
    let mut conv = BTreeMap::new();
    let mut bn = BTreeMap::new();
    for l in &spec.layers {
        match l.kind {
            crate::network::LayerKind::Conv { .. } => {
                conv.insert(l.id, take(format!("conv{}.weight", l.id))?);
            }
            crate::network::LayerKind::BatchNorm => {
                let eps = *manifest
                    .bn_eps
                    .get(&l.id)
                    .ok_or_else(|| Error::Manifest(format!("no eps for bn{}", l.id)))?;
                bn.insert(
                    l.id,
                    BnParams {
                        gamma: take(format!("bn{}.gamma", l.id))?,
                        beta: take(format!("bn{}.beta", l.id))?,
                        running_mean: take(format!("bn{}.running_mean", l.id))?,
                        running_var: take(format!("bn{}.running_var", l.id))?,
                        eps,
                    },
                );
            }
            _ => {}
        }
    }
    let mut masks = Vec::new();
    let mut kept = Vec::new();
    for (i, g) in manifest.groups.iter().enumerate() {
        if g.id != i {
            return Err(Error::Manifest(format!("group {} listed at position {i}", g.id)));
        }
        masks.push(g.mask.clone().map(&mut take).transpose()?);
        kept.push(g.kept.clone());
    }
    let head_weight = take("head.weight".into())?;
    let head_bias = take("head.bias".into())?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Manifest(format!("unexpected tensor {extra}")));
    }
    let mut model = Model::from_parts(
        spec,
        ModelParts {
            conv,
            bn,
            head_weight,
            head_bias,
            masks,
            kept,
        },
    )
    .map_err(|e| Error::Manifest(format!("tensors do not fit the spec: {e}")))?;
    model.set_global_stats(manifest.global_stats);
    Ok(Checkpoint {
        model,
        seed: manifest.seed,
        normalization: manifest.normalization,
        history: manifest.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{apply_mask, convnet6, resnet8, PruneMask};

    fn same(a: &Model, b: &Model) {
        assert_eq!(a.parts(), b.parts());
        assert_eq!(a.spec(), b.spec());
        assert_eq!(a.has_global_stats(), b.has_global_stats());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::init(resnet8(3, 32, 32, 10), 3).unwrap();
        let mut mask = PruneMask::current(&m);
        mask.keep[0][2] = false;
        apply_mask(&mut m, &mask).unwrap();
        m.set_global_stats(true);
        let mut ckpt = Checkpoint::new(m, 77);
        ckpt.normalization = Some(Normalization {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![0.9, 0.8, 0.7],
        });
        save_model(dir.path(), &ckpt).unwrap();
        let back = load_model(dir.path()).unwrap();
        same(&back.model, &ckpt.model);
        assert_eq!(back.seed, 77);
        assert_eq!(back.normalization, ckpt.normalization);
    }

    #[test]
    fn resave_drops_stale_blobs() {
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &Checkpoint::new(Model::init(resnet8(3, 32, 32, 10), 1).unwrap(), 1)).unwrap();
        let small = Model::init(convnet6(1, 28, 28, 10), 2).unwrap();
        save_model(dir.path(), &Checkpoint::new(small.clone(), 2)).unwrap();
        let n = fs::read_dir(dir.path().join(BLOBS)).unwrap().count();
        assert_eq!(n, small.param_keys().len() + 2 * small.bn_params().len());
        same(&load_model(dir.path()).unwrap().model, &small);
    }

    fn saved() -> (tempfile::TempDir, Checkpoint) {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint::new(Model::init(convnet6(1, 28, 28, 10), 4).unwrap(), 4);
        save_model(dir.path(), &ckpt).unwrap();
        (dir, ckpt)
    }

    #[test]
    fn distinct_errors() {
        let (dir, _) = saved();
        let blob = dir.path().join("blobs/head.bias.f32");
        let bytes = fs::read(&blob).unwrap();

        fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::TruncatedBlob { .. })));

        let mut flipped = bytes.clone();
        flipped[0] ^= 1;
        fs::write(&blob, &flipped).unwrap();
        match load_model(dir.path()) {
            Err(Error::Checksum { tensor }) => assert_eq!(tensor, "head.bias"),
            other => panic!("{other:?}"),
        }

        fs::remove_file(&blob).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::MissingBlob { .. })));
        fs::write(&blob, &bytes).unwrap();
        assert!(load_model(dir.path()).is_ok());

        let mp = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mp).unwrap();
        let v2 = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        fs::write(&mp, &v2).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        fs::write(&mp, text.replacen("\"seed\": 4", "\"seed\": 5", 1)).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checksum { .. })));
        fs::write(&mp, "{").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn garbled_manifest_sum_is_a_checksum_error() {
        let (dir, _) = saved();
        fs::write(dir.path().join(MANIFEST_SUM), [0xff, 0xfe]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn empty_directory_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Manifest(_))));
    }
}
