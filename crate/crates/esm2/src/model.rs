//! Model assembly: the shared encoder plus the tower set for each variant,
//! inference, and a flat named-block view over all trainable parameters used
//! by the optimizer, the checkpoint format and the gradient checks.
//!
//! Variants:
//! * `esm2` — one shared encoder feeding four towers (click, daction,
//!   buy-given-daction, buy-given-oaction), composed sequentially.
//! * `esmm` — one shared encoder feeding a click tower and a direct
//!   conversion tower; their product is the entire-space purchase rate.
//! * `dnn` / `dnn_os` — two fully independent single-task submodels, each
//!   with its own encoder: a click model trained on all impressions and a
//!   conversion model trained on clicked samples only.

use rand_chacha::ChaCha8Rng;

use crate::composition::{compose, compose_esmm, TowerOutputs};
use crate::datagen::{BehaviorRecord, SchemaMeta};
use crate::error::{Esm2Error, Result};
use crate::features::{DenseEncoding, DenseStats, FeatureEncoder};
use crate::network::{init_tower, AdamState, MlpTower};
use crate::seeding::{stream_rng, streams};
use crate::training::{DenseEmbeddingMode, TrainConfig, Variant};

/// Tower names, fixed per variant; these appear in checkpoint block names.
pub const ESM2_TOWERS: [&str; 4] = ["click", "daction", "buy_daction", "buy_oaction"];
pub const ESMM_TOWERS: [&str; 2] = ["click", "cvr"];

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Esm2 {
        encoder: FeatureEncoder,
        towers: Vec<MlpTower>,
    },
    Esmm {
        encoder: FeatureEncoder,
        towers: Vec<MlpTower>,
    },
    Dnn {
        ctr_encoder: FeatureEncoder,
        ctr_tower: MlpTower,
        cvr_encoder: FeatureEncoder,
        cvr_tower: MlpTower,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub schema: SchemaMeta,
    pub kind: ModelKind,
}

/// Composed probabilities for one record. `pctavr` only exists for the
/// four-tower variant; the baselines do not model deterministic actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predictions {
    pub pctr: f64,
    pub pcvr: f64,
    pub pctcvr: f64,
    pub pctavr: Option<f64>,
}

impl Model {
    pub fn new(config: &TrainConfig, schema: &SchemaMeta, dense_stats: &DenseStats) -> Result<Model> {
        config.validate()?;
        if dense_stats.mean.len() != schema.dense_dim {
            return Err(Esm2Error::ShapeMismatch(format!(
                "dense stats dim {} != schema dense dim {}",
                dense_stats.mean.len(),
                schema.dense_dim
            )));
        }
        let mut rng = stream_rng(config.seed, streams::TOWER_INIT);
        let discretize = config.dense_embedding == DenseEmbeddingMode::Discretize;
        let mut make_encoder = |rng: &mut ChaCha8Rng| {
            FeatureEncoder::new(
                &schema.vocab_sizes,
                config.embedding_dim,
                dense_stats.clone(),
                discretize,
                rng,
            )
        };
        let tower_dims = |input: usize| -> Vec<usize> {
            let mut dims = vec![input];
            dims.extend_from_slice(&config.layer_dims);
            dims.push(1);
            dims
        };
        let kind = match config.variant {
            Variant::Esm2 => {
                let encoder = make_encoder(&mut rng)?;
                let dims = tower_dims(encoder.output_dim);
                let towers = ESM2_TOWERS
                    .iter()
                    .map(|name| init_tower(name, &dims, config.dropout, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                ModelKind::Esm2 { encoder, towers }
            }
            Variant::Esmm => {
                let encoder = make_encoder(&mut rng)?;
                let dims = tower_dims(encoder.output_dim);
                let towers = ESMM_TOWERS
                    .iter()
                    .map(|name| init_tower(name, &dims, config.dropout, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                ModelKind::Esmm { encoder, towers }
            }
            Variant::Dnn | Variant::DnnOs => {
                let ctr_encoder = make_encoder(&mut rng)?;
                let ctr_tower = init_tower("ctr", &tower_dims(ctr_encoder.output_dim), config.dropout, &mut rng)?;
                let cvr_encoder = make_encoder(&mut rng)?;
                let cvr_tower = init_tower("cvr", &tower_dims(cvr_encoder.output_dim), config.dropout, &mut rng)?;
                ModelKind::Dnn {
                    ctr_encoder,
                    ctr_tower,
                    cvr_encoder,
                    cvr_tower,
                }
            }
        };
        Ok(Model {
            config: config.clone(),
            schema: schema.clone(),
            kind,
        })
    }

    pub fn predict(&self, record: &BehaviorRecord) -> Result<Predictions> {
        match &self.kind {
            ModelKind::Esm2 { encoder, towers } => {
                let g = encoder.encode(record)?;
                let y = TowerOutputs::new(
                    towers[0].predict(&g)?,
                    towers[1].predict(&g)?,
                    towers[2].predict(&g)?,
                    towers[3].predict(&g)?,
                );
                let c = compose(&y)?;
                Ok(Predictions {
                    pctr: c.pctr,
                    pcvr: c.pcvr,
                    pctcvr: c.pctcvr,
                    pctavr: Some(c.pctavr),
                })
            }
            ModelKind::Esmm { encoder, towers } => {
                let g = encoder.encode(record)?;
                let y1 = towers[0].predict(&g)?;
                let ycvr = towers[1].predict(&g)?;
                let (pctr, pcvr, pctcvr) = compose_esmm(y1, ycvr)?;
                Ok(Predictions {
                    pctr,
                    pcvr,
                    pctcvr,
                    pctavr: None,
                })
            }
            ModelKind::Dnn {
                ctr_encoder,
                ctr_tower,
                cvr_encoder,
                cvr_tower,
            } => {
                let pctr = ctr_tower.predict(&ctr_encoder.encode(record)?)?;
                let pcvr = cvr_tower.predict(&cvr_encoder.encode(record)?)?;
                Ok(Predictions {
                    pctr,
                    pcvr,
                    pctcvr: pctr * pcvr,
                    pctavr: None,
                })
            }
        }
    }

    /// Encoders with their block-name prefixes.
    pub fn encoders(&self) -> Vec<(&'static str, &FeatureEncoder)> {
        match &self.kind {
            ModelKind::Esm2 { encoder, .. } | ModelKind::Esmm { encoder, .. } => {
                vec![("shared", encoder)]
            }
            ModelKind::Dnn {
                ctr_encoder,
                cvr_encoder,
                ..
            } => vec![("ctr", ctr_encoder), ("cvr", cvr_encoder)],
        }
    }

    pub fn encoders_mut(&mut self) -> Vec<(&'static str, &mut FeatureEncoder)> {
        match &mut self.kind {
            ModelKind::Esm2 { encoder, .. } | ModelKind::Esmm { encoder, .. } => {
                vec![("shared", encoder)]
            }
            ModelKind::Dnn {
                ctr_encoder,
                cvr_encoder,
                ..
            } => vec![("ctr", ctr_encoder), ("cvr", cvr_encoder)],
        }
    }

    pub fn towers(&self) -> Vec<&MlpTower> {
        match &self.kind {
            ModelKind::Esm2 { towers, .. } | ModelKind::Esmm { towers, .. } => towers.iter().collect(),
            ModelKind::Dnn {
                ctr_tower,
                cvr_tower,
                ..
            } => vec![ctr_tower, cvr_tower],
        }
    }

    /// All trainable parameter blocks in a stable order:
    /// encoders first (tables, then discretized dense tables), then towers
    /// (per layer, weights then biases).
    pub fn flat_blocks(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (prefix, enc) in self.encoders() {
            for t in &enc.tables {
                out.push((format!("{prefix}.encoder.table{}", t.field_index), &t.weights));
            }
            if let DenseEncoding::Discretized { tables } = &enc.dense_encoding {
                for (j, t) in tables.iter().enumerate() {
                    out.push((format!("{prefix}.encoder.dense{j}"), &t.weights));
                }
            }
        }
        for tower in self.towers() {
            for (l, layer) in tower.layers.iter().enumerate() {
                out.push((format!("{}.layer{l}.w", tower.name), &layer.weights));
                out.push((format!("{}.layer{l}.b", tower.name), &layer.biases));
            }
        }
        out
    }

    /// Mutable view over the same blocks, in the same order.
    pub fn flat_blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        let (encoders, towers): (Vec<(&str, &mut FeatureEncoder)>, Vec<&mut MlpTower>) =
            match &mut self.kind {
                ModelKind::Esm2 { encoder, towers } | ModelKind::Esmm { encoder, towers } => {
                    (vec![("shared", encoder)], towers.iter_mut().collect())
                }
                ModelKind::Dnn {
                    ctr_encoder,
                    ctr_tower,
                    cvr_encoder,
                    cvr_tower,
                } => (
                    vec![("ctr", ctr_encoder), ("cvr", cvr_encoder)],
                    vec![ctr_tower, cvr_tower],
                ),
            };
        for (prefix, enc) in encoders {
            for t in enc.tables.iter_mut() {
                out.push((format!("{prefix}.encoder.table{}", t.field_index), &mut t.weights));
            }
            if let DenseEncoding::Discretized { tables } = &mut enc.dense_encoding {
                for (j, t) in tables.iter_mut().enumerate() {
                    out.push((format!("{prefix}.encoder.dense{j}"), &mut t.weights));
                }
            }
        }
        for tower in towers {
            let name = tower.name.clone();
            for (l, layer) in tower.layers.iter_mut().enumerate() {
                out.push((format!("{name}.layer{l}.w"), &mut layer.weights));
                out.push((format!("{name}.layer{l}.b"), &mut layer.biases));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.flat_blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

/// Adam accumulators per parameter block, aligned with
/// [`Model::flat_blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOpt {
    pub states: Vec<AdamState>,
}

impl ModelOpt {
    pub fn new(model: &Model) -> ModelOpt {
        ModelOpt {
            states: model
                .flat_blocks()
                .iter()
                .map(|(_, b)| AdamState::new(b.len()))
                .collect(),
        }
    }
}
