//! The train and prune pipelines behind the command line, writing their
//! artifacts under the configured output directory.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gcp::{run_gcp, IterationRecord, PruneHistory};
use crate::io::config::{prepare_data, RunConfig};
use crate::io::container::{load_model, save_model, Checkpoint, HistorySummary};
use crate::io::metrics::metrics_csv;
use crate::io::pattern::{pattern_csv, pattern_of};
use crate::network::{materialize, Model, PruneMask};
use crate::train::{train, EpochRecord};

pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTORY_FILE: &str = "history.json";
pub const MODEL_DIR: &str = "model";
pub const MASKED_DIR: &str = "pruned_masked";
pub const PRUNED_DIR: &str = "pruned";
pub const PATTERN_FILE: &str = "pattern.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn make_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

/// Trains from random initialization; writes `metrics.csv` and the model.
pub fn train_command(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>> {
    let data = prepare_data(&cfg.data, cfg.seed, None)?;
    let (c, h, w) = (data.train.channels, data.train.height, data.train.width);
    let mut model = Model::init(cfg.spec(c, h, w, data.classes)?, cfg.seed)?;
    let records = train(&mut model, &data.train, data.test.as_ref(), &cfg.train, on_epoch)?;
    make_out(cfg)?;
    write(&cfg.out.join(METRICS_FILE), &metrics_csv(&records))?;
    save_model(
        &cfg.out.join(MODEL_DIR),
        &Checkpoint {
            normalization: Some(data.normalization),
            ..Checkpoint::new(model, cfg.seed)
        },
    )?;
    Ok(records)
}

/// Prunes the model at `pretrained`. Writes `history.json` even when a phase
/// fails; on success also the fine-tune metrics, the keep pattern, and the
/// masked and materialized models.
pub fn prune_command(
    cfg: &RunConfig,
    pretrained: &Path,
    on_step: impl FnMut(&IterationRecord),
) -> Result<PruneHistory> {
    let objective = cfg.objective(cfg.gcp.objective)?;
    let ckpt = load_model(pretrained)?;
    let data = prepare_data(&cfg.data, cfg.seed, ckpt.normalization.as_ref())?;
    make_out(cfg)?;
    let mut model = ckpt.model.clone();
    let mut history = PruneHistory::default();
    let result = run_gcp(&mut model, &data.train, &cfg.gcp, &objective, &mut history, on_step);
    write(&cfg.out.join(HISTORY_FILE), &history.to_json()?)?;
    result?;
    write(&cfg.out.join(METRICS_FILE), &metrics_csv(&history.finetune))?;
    write(&cfg.out.join(PATTERN_FILE), &pattern_csv(&pattern_of(&model)))?;
    let summary = Some(HistorySummary::of(&history));
    let small = materialize(&model, &PruneMask::current(&model))?;
    for (dir, m) in [(MASKED_DIR, model), (PRUNED_DIR, small)] {
        save_model(
            &cfg.out.join(dir),
            &Checkpoint {
                model: m,
                seed: cfg.seed,
                normalization: ckpt.normalization.clone(),
                history: summary.clone(),
            },
        )?;
    }
    Ok(history)
}
