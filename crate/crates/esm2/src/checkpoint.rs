//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"ESM2CKPT"
//! version u32
//! echo    u64 length + canonical TOML of the train config and data schema
//! count   u32 number of components
//! per component:
//!     name  u32 length + utf8
//!     shape u32 ndims + u64 per dim
//!     data  f64 (IEEE-754, little-endian) per element
//! sha256 over everything above (32 bytes)
//! ```
//!
//! Components carry the trainable blocks, the frozen dense-feature
//! statistics, the Adam accumulators and the training-metrics history.
//! Loading rebuilds the model skeleton from the config echo, then overwrites
//! every block bit for bit, so a round trip reproduces identical inference
//! outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::SchemaMeta;
use crate::error::{Esm2Error, Result};
use crate::features::DenseStats;
use crate::model::{Model, ModelOpt};
use crate::training::{TrainConfig, TrainingHistory};

pub const MAGIC: [u8; 8] = *b"ESM2CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigEcho {
    train: TrainConfig,
    schema: SchemaMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: ModelOpt,
    pub history: TrainingHistory,
}

impl Checkpoint {
    pub fn new(model: Model, opt: ModelOpt, history: TrainingHistory) -> Checkpoint {
        Checkpoint { model, opt, history }
    }

    /// Canonical text form of the resolved configuration; embedded in the
    /// file and reproducible from a loaded checkpoint.
    pub fn config_echo(&self) -> String {
        let echo = ConfigEcho {
            train: self.model.config.clone(),
            schema: self.model.schema.clone(),
        };
        toml::to_string(&echo).expect("config echo serializes")
    }

    pub fn check_dataset_compat(&self, schema: &SchemaMeta) -> Result<()> {
        if self.model.schema != *schema {
            return Err(Esm2Error::Incompatible(format!(
                "checkpoint schema {:?} vs dataset schema {:?}",
                self.model.schema, schema
            )));
        }
        Ok(())
    }

    fn components(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = Vec::new();
        for (prefix, enc) in self.model.encoders() {
            out.push((format!("{prefix}.encoder.dense_mean"), enc.dense_stats.mean.clone()));
            out.push((format!("{prefix}.encoder.dense_std"), enc.dense_stats.std.clone()));
        }
        for (name, block) in self.model.flat_blocks() {
            out.push((name, block.clone()));
        }
        for ((name, _), state) in self.model.flat_blocks().iter().zip(&self.opt.states) {
            out.push((format!("{name}.adam.m"), state.m.clone()));
            out.push((format!("{name}.adam.v"), state.v.clone()));
        }
        out.push((
            "optimizer.steps".into(),
            self.opt.states.iter().map(|s| s.step as f64).collect(),
        ));
        let h = &self.history;
        for (name, values) in [
            ("history.train_loss", &h.train_loss),
            ("history.loss_ctr", &h.loss_ctr),
            ("history.loss_ctavr", &h.loss_ctavr),
            ("history.loss_ctcvr", &h.loss_ctcvr),
            ("history.loss_cvr_clicked", &h.loss_cvr_clicked),
            ("history.val_ctr_auc", &h.val_ctr_auc),
            ("history.val_cvr_auc", &h.val_cvr_auc),
            ("history.val_ctcvr_auc", &h.val_ctcvr_auc),
            ("history.records_ctr", &h.records_ctr),
            ("history.records_ctavr", &h.records_ctavr),
            ("history.records_ctcvr", &h.records_ctcvr),
            ("history.records_cvr_clicked", &h.records_cvr_clicked),
        ] {
            out.push((name.into(), values.clone()));
        }
        out.push(("history.best_epoch".into(), vec![h.best_epoch as f64]));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let echo = self.config_echo();
        buf.extend_from_slice(&(echo.len() as u64).to_le_bytes());
        buf.extend_from_slice(echo.as_bytes());
        let components = self.components();
        buf.extend_from_slice(&(components.len() as u32).to_le_bytes());
        for (name, data) in &components {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&1u32.to_le_bytes());
            buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Esm2Error::io(dir, e))?;
            }
        }
        fs::write(path, &buf).map_err(|e| Esm2Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Esm2Error::io(path, e))?;
        let corrupt = |msg: &str| Esm2Error::CheckpointCorrupt(format!("{}: {msg}", path.display()));
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(corrupt("file too short"));
        }
        if bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut cur = Cursor {
            bytes: &bytes[..bytes.len() - 32],
            pos: 8,
        };
        let version = cur.u32(&corrupt)?;
        if version != FORMAT_VERSION {
            return Err(Esm2Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let digest = Sha256::digest(&bytes[..bytes.len() - 32]);
        if digest[..] != bytes[bytes.len() - 32..] {
            return Err(corrupt("checksum mismatch"));
        }

        let echo_len = cur.u64(&corrupt)? as usize;
        let echo_bytes = cur.take(echo_len, &corrupt)?;
        let echo_text = std::str::from_utf8(echo_bytes).map_err(|_| corrupt("echo is not utf8"))?;
        let echo: ConfigEcho =
            toml::from_str(echo_text).map_err(|e| corrupt(&format!("bad config echo: {e}")))?;

        let n_components = cur.u32(&corrupt)? as usize;
        let mut components: Vec<(String, Vec<f64>)> = Vec::with_capacity(n_components);
        for _ in 0..n_components {
            let name_len = cur.u32(&corrupt)? as usize;
            let name = std::str::from_utf8(cur.take(name_len, &corrupt)?)
                .map_err(|_| corrupt("component name is not utf8"))?
                .to_string();
            let ndims = cur.u32(&corrupt)? as usize;
            let mut len = 1usize;
            for _ in 0..ndims {
                len = len
                    .checked_mul(cur.u64(&corrupt)? as usize)
                    .ok_or_else(|| corrupt("shape overflow"))?;
            }
            if ndims == 0 {
                len = 0;
            }
            let raw = cur.take(len * 8, &corrupt)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            components.push((name, data));
        }
        if cur.pos != cur.bytes.len() {
            return Err(corrupt("trailing bytes after components"));
        }

        let lookup = |name: &str| -> Result<&Vec<f64>> {
            components
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, d)| d)
                .ok_or_else(|| corrupt(&format!("missing component `{name}`")))
        };

        // Rebuild the skeleton from the echo, then overwrite every block.
        let first_prefix = match echo.train.variant {
            crate::training::Variant::Dnn | crate::training::Variant::DnnOs => "ctr",
            _ => "shared",
        };
        let stats = DenseStats {
            mean: lookup(&format!("{first_prefix}.encoder.dense_mean"))?.clone(),
            std: lookup(&format!("{first_prefix}.encoder.dense_std"))?.clone(),
        };
        let mut model = Model::new(&echo.train, &echo.schema, &stats)?;
        for (prefix, enc) in model.encoders_mut() {
            enc.dense_stats = DenseStats {
                mean: lookup(&format!("{prefix}.encoder.dense_mean"))?.clone(),
                std: lookup(&format!("{prefix}.encoder.dense_std"))?.clone(),
            };
        }
        for (name, block) in model.flat_blocks_mut() {
            let data = lookup(&name)?;
            if data.len() != block.len() {
                return Err(corrupt(&format!(
                    "component `{name}` has {} values, model expects {}",
                    data.len(),
                    block.len()
                )));
            }
            block.copy_from_slice(data);
        }
        let mut opt = ModelOpt::new(&model);
        let steps = lookup("optimizer.steps")?.clone();
        if steps.len() != opt.states.len() {
            return Err(corrupt("optimizer state count mismatch"));
        }
        let block_names: Vec<String> = model.flat_blocks().iter().map(|(n, _)| n.clone()).collect();
        for ((state, name), step) in opt.states.iter_mut().zip(&block_names).zip(&steps) {
            let m = lookup(&format!("{name}.adam.m"))?;
            let v = lookup(&format!("{name}.adam.v"))?;
            if m.len() != state.m.len() || v.len() != state.v.len() {
                return Err(corrupt(&format!("adam state for `{name}` has wrong shape")));
            }
            state.m.copy_from_slice(m);
            state.v.copy_from_slice(v);
            state.step = *step as u64;
        }
        let history = TrainingHistory {
            train_loss: lookup("history.train_loss")?.clone(),
            loss_ctr: lookup("history.loss_ctr")?.clone(),
            loss_ctavr: lookup("history.loss_ctavr")?.clone(),
            loss_ctcvr: lookup("history.loss_ctcvr")?.clone(),
            loss_cvr_clicked: lookup("history.loss_cvr_clicked")?.clone(),
            val_ctr_auc: lookup("history.val_ctr_auc")?.clone(),
            val_cvr_auc: lookup("history.val_cvr_auc")?.clone(),
            val_ctcvr_auc: lookup("history.val_ctcvr_auc")?.clone(),
            records_ctr: lookup("history.records_ctr")?.clone(),
            records_ctavr: lookup("history.records_ctavr")?.clone(),
            records_ctcvr: lookup("history.records_ctcvr")?.clone(),
            records_cvr_clicked: lookup("history.records_cvr_clicked")?.clone(),
            best_epoch: lookup("history.best_epoch")?.first().copied().unwrap_or(0.0) as usize,
        };
        Ok(Checkpoint {
            model,
            opt,
            history,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, corrupt: &impl Fn(&str) -> Esm2Error) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt("unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, corrupt: &impl Fn(&str) -> Esm2Error) -> Result<u32> {
        let b = self.take(4, corrupt)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, corrupt: &impl Fn(&str) -> Esm2Error) -> Result<u64> {
        let b = self.take(8, corrupt)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
