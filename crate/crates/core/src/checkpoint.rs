//! On-disk model directories.
//!
//! Layout: `config.toml` (every hyperparameter), `params/<module>.json`
//! (one blob map per submodule), optional `history.jsonl` plus
//! `history_summary.json`, and `VERSION`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SurrogateModel;
use crate::scalar::Scalar;
use crate::tensor::MatrixBlob;
use crate::training::{StopReason, TrainConfig, TrainingHistory};

/// Identifier written next to every output.
pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct HistorySummary {
    best_epoch: usize,
    stop_reason: StopReason,
}

pub fn save_history(dir: &Path, history: &TrainingHistory) -> Result<()> {
    write(&dir.join("history.jsonl"), &history.to_jsonl())?;
    let s = HistorySummary {
        best_epoch: history.best_epoch,
        stop_reason: history.stop_reason,
    };
    write(
        &dir.join("history_summary.json"),
        &serde_json::to_string_pretty(&s).expect("summary serialises"),
    )
}

pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &SurrogateModel<T>,
    cfg: &TrainConfig,
    history: Option<&TrainingHistory>,
) -> Result<()> {
    let dir = dir.as_ref();
    if cfg.model_config() != model.config {
        return Err(Error::Checkpoint("config snapshot does not describe this model".into()));
    }
    let params = dir.join("params");
    fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    for (module, blobs) in model.store.blobs_by_module() {
        let text = serde_json::to_string(&blobs).expect("blobs serialise");
        write(&params.join(format!("{module}.json")), &text)?;
    }
    if let Some(h) = history {
        save_history(dir, h)?;
    }
    write(&dir.join("VERSION"), &(version_string() + "\n"))
}

pub fn load_history(dir: &Path) -> Result<Option<TrainingHistory>> {
    let lines = dir.join("history.jsonl");
    if !lines.exists() {
        return Ok(None);
    }
    let epochs = read(&lines)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Checkpoint(format!("history.jsonl: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let s: HistorySummary = serde_json::from_str(&read(&dir.join("history_summary.json"))?)
        .map_err(|e| Error::Checkpoint(format!("history_summary.json: {e}")))?;
    Ok(Some(TrainingHistory {
        epochs,
        best_epoch: s.best_epoch,
        stop_reason: s.stop_reason,
    }))
}

pub struct LoadedCheckpoint<T> {
    pub model: SurrogateModel<T>,
    pub config: TrainConfig,
    pub history: Option<TrainingHistory>,
}

/// Rebuild the model from the config snapshot and overwrite every parameter
/// found under `params/`. Missing parameter files are an error.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint<T>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("checkpoint directory {}", dir.display())));
    }
    let config = TrainConfig::from_toml(&read(&dir.join("config.toml"))?)?;
    let mut model = SurrogateModel::<T>::new(config.model_config(), config.seed)?;
    let expected: Vec<String> = model.store.blobs_by_module().into_keys().collect();
    for module in expected {
        let path = dir.join("params").join(format!("{module}.json"));
        let blobs: BTreeMap<String, MatrixBlob> = serde_json::from_str(&read(&path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        model.store.load_blobs(&blobs)?;
    }
    Ok(LoadedCheckpoint {
        model,
        config,
        history: load_history(dir)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reload_is_bit_identical() {
        let cfg = TrainConfig {
            d: 8,
            text_dim: 12,
            sem_dim: 5,
            gnn_heads: 2,
            fusion_heads: 2,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut m = SurrogateModel::<f64>::new(cfg.model_config(), 11).unwrap();
        // Perturb so that the reload cannot pass by re-initialising from the seed.
        for id in m.store.ids().collect::<Vec<_>>() {
            for x in m.store.get_mut(id).data_mut() {
                *x = *x * 1.000001 + 1e-7;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &m, &cfg, None).unwrap();
        let back = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(back.config, cfg);
        for id in m.store.ids() {
            assert_eq!(m.store.get(id), back.model.store.get(id), "{}", m.store.name(id));
        }
        assert!(back.history.is_none());
        assert!(dir.path().join("params/fusion.json").exists());
    }

    #[test]
    fn missing_dir_is_not_found() {
        assert!(matches!(load_checkpoint::<f32>("/nonexistent/ckpt"), Err(Error::NotFound(_))));
    }
}
