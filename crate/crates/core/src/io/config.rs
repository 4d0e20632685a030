//! Run configuration files and the data/model setup they describe.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{LatencyTable, Objective, ObjectiveKind};
use crate::data::{load_cifar, load_idx, stratified_subset, Dataset, DatasetKind, Normalization, RawImages};
use crate::error::{Error, Result};
use crate::gcp::GcpConfig;
use crate::network::{builtin, NetworkSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// CIFAR-10: one or more record files. MNIST: `[images, labels]`.
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
    /// Stratified training subset size; everything when absent.
    pub subset: Option<usize>,
    pub test_subset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Built-in architecture name.
    pub arch: Option<String>,
    /// JSON network spec; overrides `arch`.
    pub spec: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Some("resnet8".into()),
            spec: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub gcp: GcpConfig,
    pub latency_table: Option<PathBuf>,
}

impl RunConfig {
    /// Parses `text`, resolving relative paths against `base`, and checks
    /// that every referenced file exists.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.train.iter_mut().for_each(fix);
        self.data.test.iter_mut().for_each(fix);
        if let Some(p) = self.model.spec.as_mut() {
            fix(p);
        }
        if let Some(p) = self.latency_table.as_mut() {
            fix(p);
        }
        fix(&mut self.out);
    }

    pub fn validate(&self) -> Result<()> {
        let need = match self.data.kind {
            DatasetKind::Mnist => Some(2),
            DatasetKind::Cifar10 => None,
        };
        for (name, files) in [("train", &self.data.train), ("test", &self.data.test)] {
            if name == "train" && files.is_empty() {
                return Err(Error::Config("data.train lists no files".into()));
            }
            if let Some(k) = need {
                if !files.is_empty() && files.len() != k {
                    return Err(Error::Config(format!("MNIST data.{name} takes [images, labels]")));
                }
            }
        }
        let mut paths: Vec<&PathBuf> = self.data.train.iter().chain(&self.data.test).collect();
        paths.extend(self.model.spec.iter());
        paths.extend(self.latency_table.iter());
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("{} does not exist", missing.display())));
        }
        if self.model.spec.is_none() && self.model.arch.is_none() {
            return Err(Error::Config("model needs `arch` or `spec`".into()));
        }
        self.gcp.validate()
    }

    /// The objective named by `kind`, loading the latency table if needed.
    pub fn objective(&self, kind: ObjectiveKind) -> Result<Objective> {
        load_objective(kind, self.latency_table.as_deref())
    }

    /// Network spec for data of the given geometry.
    pub fn spec(&self, channels: usize, height: usize, width: usize, classes: usize) -> Result<NetworkSpec> {
        if let Some(path) = &self.model.spec {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let spec: NetworkSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            spec.validate()?;
            return Ok(spec);
        }
        builtin(self.model.arch.as_deref().expect("validated"), channels, height, width, classes)
    }
}

/// `kind` as a full objective; only the latency objective reads `table`.
pub fn load_objective(kind: ObjectiveKind, table: Option<&Path>) -> Result<Objective> {
    match kind {
        ObjectiveKind::Flops => Ok(Objective::Flops),
        ObjectiveKind::Params => Ok(Objective::Params),
        ObjectiveKind::Latency => {
            let path = table.ok_or_else(|| Error::Config("the latency objective needs a latency table".into()))?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(Objective::Latency(LatencyTable::parse(&text)?))
        }
    }
}

pub fn load_raw(kind: DatasetKind, files: &[PathBuf]) -> Result<RawImages> {
    match kind {
        DatasetKind::Cifar10 => load_cifar(&files.iter().map(PathBuf::as_path).collect::<Vec<_>>()),
        DatasetKind::Mnist => match files {
            [images, labels] => load_idx(images, labels),
            _ => Err(Error::Config("MNIST takes [images, labels]".into())),
        },
    }
}

fn take_subset(raw: RawImages, size: Option<usize>, seed: u64) -> Result<RawImages> {
    match size {
        Some(n) if n < raw.len() => Ok(raw.select(&stratified_subset(&raw.labels, n, seed)?)),
        _ => Ok(raw),
    }
}

/// Normalized splits of a run.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub normalization: Normalization,
    pub classes: usize,
}

/// Loads the subsets and normalizes both with statistics of the training
/// subset. `norm` overrides the fit, e.g. with a checkpoint's statistics.
pub fn prepare_data(cfg: &DataConfig, seed: u64, norm: Option<&Normalization>) -> Result<PreparedData> {
    let train_raw = take_subset(load_raw(cfg.kind, &cfg.train)?, cfg.subset, seed)?;
    let test_raw = if cfg.test.is_empty() {
        None
    } else {
        Some(take_subset(load_raw(cfg.kind, &cfg.test)?, cfg.test_subset, seed)?)
    };
    let classes = match cfg.kind {
        DatasetKind::Mnist | DatasetKind::Cifar10 => 10,
    };
    let normalization = match norm {
        Some(n) => n.clone(),
        None => Normalization::fit(&train_raw)?,
    };
    let train = Dataset::from_raw(&train_raw, &normalization, classes)?;
    let test = test_raw
        .map(|r| Dataset::from_raw(&r, &normalization, classes))
        .transpose()?;
    Ok(PreparedData {
        train,
        test,
        normalization,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_cifar, write_cifar, SyntheticSpec};

    fn write_data(dir: &Path) {
        let raw = synthetic_cifar(&SyntheticSpec {
            samples: 100,
            ..Default::default()
        });
        write_cifar(&dir.join("train.bin"), &raw).unwrap();
        write_cifar(&dir.join("test.bin"), &raw.select(&(0..40).collect::<Vec<_>>())).unwrap();
    }

    const BASIC: &str = r#"
seed = 3
out = "run"

[data]
kind = "cifar10"
train = ["train.bin"]
test = ["test.bin"]
subset = 50

[gcp]
eta = 0.4
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_data(dir.path());
        let cfg = RunConfig::from_toml(BASIC, dir.path()).unwrap();
        assert_eq!(cfg.out, dir.path().join("run"));
        assert_eq!(cfg.data.train, vec![dir.path().join("train.bin")]);
        assert_eq!(cfg.gcp.eta, 0.4);
        assert_eq!(cfg.gcp.iterations, GcpConfig::default().iterations);
        assert_eq!(cfg.model.arch.as_deref(), Some("resnet8"));
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_paths_and_unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunConfig::from_toml(BASIC, dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("train.bin")), "{err}");
        write_data(dir.path());
        let typo = BASIC.replace("eta = 0.4", "etta = 0.4");
        assert!(matches!(RunConfig::from_toml(&typo, dir.path()), Err(Error::Config(_))));
        let bad_eta = BASIC.replace("eta = 0.4", "eta = 1.5");
        assert!(matches!(RunConfig::from_toml(&bad_eta, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn latency_objective_needs_a_table() {
        let dir = tempfile::tempdir().unwrap();
        write_data(dir.path());
        let cfg = RunConfig::from_toml(BASIC, dir.path()).unwrap();
        assert!(matches!(cfg.objective(ObjectiveKind::Latency), Err(Error::Config(_))));
        assert_eq!(cfg.objective(ObjectiveKind::Params).unwrap(), Objective::Params);
    }

    #[test]
    fn subset_is_stratified_and_normalized_on_train() {
        let dir = tempfile::tempdir().unwrap();
        write_data(dir.path());
        let cfg = RunConfig::from_toml(BASIC, dir.path()).unwrap();
        let d = prepare_data(&cfg.data, cfg.seed, None).unwrap();
        assert_eq!(d.train.len(), 50);
        for c in 0..10 {
            assert_eq!(d.train.labels().iter().filter(|&&l| l == c).count(), 5);
        }
        assert_eq!(d.test.as_ref().unwrap().len(), 40);
        // Normalized training pixels have zero mean per channel.
        let (x, _) = d.train.gather(&(0..50).collect::<Vec<_>>());
        let plane = 32 * 32;
        let mean0: f64 = x
            .data()
            .chunks(plane)
            .step_by(3)
            .flatten()
            .map(|&v| v as f64)
            .sum::<f64>()
            / (50 * plane) as f64;
        assert!(mean0.abs() < 1e-4, "{mean0}");
        let again = prepare_data(&cfg.data, cfg.seed, Some(&d.normalization)).unwrap();
        assert_eq!(again.train, d.train);
    }
}
