//! Run manifest: everything needed to reproduce a training run.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use super::config::KeyValues;
use crate::trainer::TrainConfig;
use crate::Result;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: KeyValues,
}

impl Manifest {
    pub fn for_training(cfg: &TrainConfig, dataset: &str, fingerprint: &str, extra: &[(&str, String)]) -> Self {
        let mut kv = KeyValues::default();
        kv.insert("tool", "cgfac");
        kv.insert("tool_version", TOOL_VERSION);
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        kv.insert("start_unix_ms", started);
        kv.insert("seed", cfg.seed);
        kv.insert("method", cfg.method.name());
        kv.insert("eta", cfg.eta);
        kv.insert("gamma", cfg.gamma);
        kv.insert("batch_size", cfg.batch_size);
        kv.insert("epochs", cfg.epochs);
        kv.insert("loss", cfg.loss_kind.name());
        kv.insert("cg_max_iters", cfg.cg.max_iters);
        kv.insert("cg_rel_tol", cfg.cg.rel_tol);
        kv.insert("cg_abs_tol", cfg.cg.abs_tol);
        kv.insert("warm_start", cfg.warm_start);
        kv.insert("dataset", dataset);
        kv.insert("dataset_fingerprint", fingerprint);
        for (k, v) in extra {
            kv.insert(k, v);
        }
        Manifest { entries: kv }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.entries.render())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Manifest {
            entries: KeyValues::load(path)?,
        })
    }
}
