//! Losses, the mini-batch training loop and the model variants.
//!
//! The four-tower model and the two-tower baseline train on every impression
//! record: the click, deterministic-action and purchase labels all supervise
//! composed entire-space probabilities, so no loss term is restricted to a
//! self-selected subset. The plain DNN baseline deliberately reproduces the
//! biased regime instead: its conversion submodel sees clicked samples only,
//! while evaluation still runs over all impressions. The oversampling
//! variant additionally duplicates the rare purchase positives in that
//! clicked stream.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::{compose, compose_backward, compose_esmm, compose_esmm_backward, ComposedGrads, ComposedProbs, TowerOutputs};
use crate::datagen::{BehaviorRecord, Dataset, SchemaMeta};
use crate::error::{Esm2Error, Result};
use crate::features::{fit_dense_stats, EncoderGrads};
use crate::metrics::{auc, ScoredSet, TieHandling};
use crate::model::{Model, ModelKind, ModelOpt, Predictions};
use crate::network::{adam_step, Mode, TowerGrads};
use crate::seeding::{stream_rng, streams};

/// Probabilities are clamped away from {0, 1} by this margin inside the
/// logloss so it stays finite.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Esm2,
    Esmm,
    Dnn,
    DnnOs,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Esm2 => "esm2",
            Variant::Esmm => "esmm",
            Variant::Dnn => "dnn",
            Variant::DnnOs => "dnn_os",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Esm2Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "esm2" => Ok(Variant::Esm2),
            "esmm" => Ok(Variant::Esmm),
            "dnn" => Ok(Variant::Dnn),
            "dnn_os" => Ok(Variant::DnnOs),
            other => Err(Esm2Error::InvalidConfig(format!(
                "unknown variant `{other}` (expected esm2, esmm, dnn, dnn_os)"
            ))),
        }
    }
}

/// Which post-click behaviors feed the deterministic-action label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DactionChoice {
    Scart,
    Wish,
    Both,
}

impl std::fmt::Display for DactionChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DactionChoice::Scart => "scart",
            DactionChoice::Wish => "wish",
            DactionChoice::Both => "both",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DactionChoice {
    type Err = Esm2Error;
    fn from_str(s: &str) -> Result<DactionChoice> {
        match s {
            "scart" => Ok(DactionChoice::Scart),
            "wish" => Ok(DactionChoice::Wish),
            "both" => Ok(DactionChoice::Both),
            other => Err(Esm2Error::InvalidConfig(format!(
                "unknown daction composition `{other}` (expected scart, wish, both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseEmbeddingMode {
    Normalize,
    Discretize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_ctr: f64,
    pub w_ctavr: f64,
    pub w_ctcvr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_ctr: 1.0,
            w_ctavr: 1.0,
            w_ctcvr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_ctr", self.w_ctr),
            ("w_ctavr", self.w_ctavr),
            ("w_ctcvr", self.w_ctcvr),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Esm2Error::InvalidConfig(format!(
                    "loss weight {name} = {w} must be a finite nonnegative real"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub daction_composition: DactionChoice,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: f64,
    /// Hidden layer widths; the input width comes from the encoder and the
    /// output is a single logit.
    pub layer_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub dense_embedding: DenseEmbeddingMode,
    pub seed: u64,
    /// Positive-duplication factor for the oversampling baseline.
    pub oversample_factor: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Esm2,
            daction_composition: DactionChoice::Both,
            batch_size: 512,
            learning_rate: 0.0005,
            epochs: 5,
            dropout: 0.5,
            layer_dims: vec![64, 32],
            embedding_dim: 16,
            dense_embedding: DenseEmbeddingMode::Normalize,
            seed: 42,
            oversample_factor: 10,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Esm2Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return fail("layer_dims entries must be >= 1".into());
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be >= 1".into());
        }
        if self.oversample_factor == 0 {
            return fail("oversample_factor must be >= 1".into());
        }
        self.loss_weights.validate()
    }
}

/// Per-example binary cross entropy on a clamped probability. Returns
/// (loss, dL/dp) with the gradient taken at the clamped value.
pub fn logloss(p: f64, label: bool) -> (f64, f64) {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        (-pc.ln(), -1.0 / pc)
    } else {
        (-(1.0 - pc).ln(), 1.0 / (1.0 - pc))
    }
}

/// Weighted sum of the three per-task batch-mean loglosses. Labels are
/// (click, daction, buy) per sample and must be funnel-consistent.
pub fn total_loss(
    probs: &[ComposedProbs],
    labels: &[(bool, bool, bool)],
    weights: &LossWeights,
) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Esm2Error::ShapeMismatch(format!(
            "{} probs vs {} labels (need a non-empty batch)",
            probs.len(),
            labels.len()
        )));
    }
    weights.validate()?;
    let n = probs.len() as f64;
    let mut sum = 0.0;
    for (p, &(c, a, b)) in probs.iter().zip(labels) {
        if !c && (a || b) {
            return Err(Esm2Error::InvalidConfig(
                "label inconsistency: post-click label without a click".into(),
            ));
        }
        sum += weights.w_ctr * logloss(p.pctr, c).0
            + weights.w_ctavr * logloss(p.pctavr, a).0
            + weights.w_ctcvr * logloss(p.pctcvr, b).0;
    }
    Ok(sum / n)
}

/// Duplicate positive samples `factor` times, keep negatives once, and
/// reshuffle the result.
pub fn oversample<T: Clone>(
    samples: &[T],
    is_positive: impl Fn(&T) -> bool,
    factor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<T>> {
    if factor == 0 {
        return Err(Esm2Error::InvalidConfig("oversample factor must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let copies = if is_positive(s) { factor } else { 1 };
        for _ in 0..copies {
            out.push(s.clone());
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Rebuild the deterministic-action label from the stored cart/wishlist
/// flags; click and purchase are untouched.
pub fn recompose_daction(dataset: &Dataset, choice: DactionChoice) -> Dataset {
    let records = dataset
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.daction = match choice {
                DactionChoice::Scart => r.scart,
                DactionChoice::Wish => r.wish,
                DactionChoice::Both => r.scart || r.wish,
            };
            r
        })
        .collect();
    Dataset {
        records,
        field_vocab_sizes: dataset.field_vocab_sizes.clone(),
        dense_dim: dataset.dense_dim,
    }
}

/// Gradient buffers for a whole model, aligned with
/// [`Model::flat_blocks`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoders: Vec<EncoderGrads>,
    pub towers: Vec<TowerGrads>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> ModelGrads {
        ModelGrads {
            encoders: model
                .encoders()
                .iter()
                .map(|(_, e)| EncoderGrads::zeros_like(e))
                .collect(),
            towers: model.towers().iter().map(|t| TowerGrads::zeros_like(t)).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.encoders.iter_mut().for_each(EncoderGrads::reset);
        self.towers.iter_mut().for_each(TowerGrads::reset);
    }

    /// Blocks in the same order as `Model::flat_blocks`.
    pub fn flat(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.extend(e.tables.iter());
            out.extend(e.dense_tables.iter());
        }
        for t in &self.towers {
            for l in 0..t.weights.len() {
                out.push(&t.weights[l]);
                out.push(&t.biases[l]);
            }
        }
        out
    }
}

/// One Adam update over every block of the model.
pub fn apply_adam(
    model: &mut Model,
    grads: &ModelGrads,
    opt: &mut ModelOpt,
    learning_rate: f64,
) -> Result<()> {
    let flat_grads = grads.flat();
    let mut blocks = model.flat_blocks_mut();
    if flat_grads.len() != blocks.len() || blocks.len() != opt.states.len() {
        return Err(Esm2Error::ShapeMismatch(format!(
            "block count mismatch: {} params, {} grads, {} optimizer states",
            blocks.len(),
            flat_grads.len(),
            opt.states.len()
        )));
    }
    for ((block, grad), state) in blocks.iter_mut().zip(&flat_grads).zip(&mut opt.states) {
        adam_step(&mut block.1[..], grad, state, learning_rate)?;
    }
    Ok(())
}

/// Loss and sample-count bookkeeping for one accumulated batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub n: usize,
    pub loss: f64,
    pub loss_ctr: f64,
    pub loss_ctavr: f64,
    pub loss_ctcvr: f64,
    pub loss_cvr_clicked: f64,
    pub n_ctr: usize,
    pub n_ctavr: usize,
    pub n_ctcvr: usize,
    pub n_cvr_clicked: usize,
}

/// Forward/backward over one batch for the shared-encoder variants,
/// accumulating gradients of the batch-mean loss. Every record contributes
/// to every active loss term.
pub fn accumulate_batch(
    model: &Model,
    batch: &[&BehaviorRecord],
    grads: &mut ModelGrads,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Esm2Error::EmptyDataset("empty batch".into()));
    }
    let w = &model.config.loss_weights;
    let inv_n = 1.0 / batch.len() as f64;
    let mut stats = BatchStats {
        n: batch.len(),
        ..Default::default()
    };
    let mut g = Vec::new();
    match &model.kind {
        ModelKind::Esm2 { encoder, towers } => {
            let mut d_g = vec![0.0; encoder.output_dim];
            for rec in batch {
                encoder.encode_into(rec, &mut g)?;
                let mut ys = [0.0; 4];
                let mut caches = Vec::with_capacity(4);
                for (k, tower) in towers.iter().enumerate() {
                    let (y, cache) = tower.forward(&g, Mode::Train, dropout_rng)?;
                    ys[k] = y;
                    caches.push(cache);
                }
                let y = TowerOutputs::new(ys[0], ys[1], ys[2], ys[3]);
                let c = compose(&y)?;
                let (l_ctr, d_ctr) = logloss(c.pctr, rec.click);
                let (l_ctavr, d_ctavr) = logloss(c.pctavr, rec.daction);
                let (l_ctcvr, d_ctcvr) = logloss(c.pctcvr, rec.buy);
                stats.loss_ctr += w.w_ctr * l_ctr * inv_n;
                stats.loss_ctavr += w.w_ctavr * l_ctavr * inv_n;
                stats.loss_ctcvr += w.w_ctcvr * l_ctcvr * inv_n;
                stats.n_ctr += 1;
                stats.n_ctavr += 1;
                stats.n_ctcvr += 1;

                let upstream = ComposedGrads {
                    d_pctr: w.w_ctr * d_ctr * inv_n,
                    d_pctavr: w.w_ctavr * d_ctavr * inv_n,
                    d_pcvr: 0.0,
                    d_pctcvr: w.w_ctcvr * d_ctcvr * inv_n,
                };
                let d_y = compose_backward(&y, &upstream);
                d_g.iter_mut().for_each(|v| *v = 0.0);
                for (k, tower) in towers.iter().enumerate() {
                    let d_in = tower.backward_into(&caches[k], d_y[k], &mut grads.towers[k])?;
                    for (acc, d) in d_g.iter_mut().zip(&d_in) {
                        *acc += d;
                    }
                }
                encoder.encode_backward(rec, &d_g, &mut grads.encoders[0])?;
            }
        }
        ModelKind::Esmm { encoder, towers } => {
            let mut d_g = vec![0.0; encoder.output_dim];
            for rec in batch {
                encoder.encode_into(rec, &mut g)?;
                let (y1, cache1) = towers[0].forward(&g, Mode::Train, dropout_rng)?;
                let (ycvr, cache2) = towers[1].forward(&g, Mode::Train, dropout_rng)?;
                let (pctr, _, pctcvr) = compose_esmm(y1, ycvr)?;
                let (l_ctr, d_ctr) = logloss(pctr, rec.click);
                let (l_ctcvr, d_ctcvr) = logloss(pctcvr, rec.buy);
                stats.loss_ctr += w.w_ctr * l_ctr * inv_n;
                stats.loss_ctcvr += w.w_ctcvr * l_ctcvr * inv_n;
                stats.n_ctr += 1;
                stats.n_ctcvr += 1;

                let (d_y1, d_ycvr) = compose_esmm_backward(
                    y1,
                    ycvr,
                    w.w_ctr * d_ctr * inv_n,
                    w.w_ctcvr * d_ctcvr * inv_n,
                );
                d_g.iter_mut().for_each(|v| *v = 0.0);
                let d_in1 = towers[0].backward_into(&cache1, d_y1, &mut grads.towers[0])?;
                let d_in2 = towers[1].backward_into(&cache2, d_ycvr, &mut grads.towers[1])?;
                for ((acc, a), b) in d_g.iter_mut().zip(&d_in1).zip(&d_in2) {
                    *acc += a + b;
                }
                encoder.encode_backward(rec, &d_g, &mut grads.encoders[0])?;
            }
        }
        ModelKind::Dnn { .. } => {
            return Err(Esm2Error::InvalidConfig(
                "the DNN baseline trains its submodels in separate phases".into(),
            ));
        }
    }
    stats.loss = stats.loss_ctr + stats.loss_ctavr + stats.loss_ctcvr;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnnTask {
    Ctr,
    Cvr,
}

/// One batch for a DNN submodel: the click model on arbitrary impressions,
/// or the conversion model on (possibly oversampled) clicked samples.
pub fn accumulate_batch_dnn(
    model: &Model,
    batch: &[&BehaviorRecord],
    task: DnnTask,
    grads: &mut ModelGrads,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Esm2Error::EmptyDataset("empty batch".into()));
    }
    let ModelKind::Dnn {
        ctr_encoder,
        ctr_tower,
        cvr_encoder,
        cvr_tower,
    } = &model.kind
    else {
        return Err(Esm2Error::InvalidConfig(
            "accumulate_batch_dnn called on a shared-encoder variant".into(),
        ));
    };
    let (encoder, tower, enc_idx, tower_idx) = match task {
        DnnTask::Ctr => (ctr_encoder, ctr_tower, 0usize, 0usize),
        DnnTask::Cvr => (cvr_encoder, cvr_tower, 1, 1),
    };
    let inv_n = 1.0 / batch.len() as f64;
    let mut stats = BatchStats {
        n: batch.len(),
        ..Default::default()
    };
    let mut g = Vec::new();
    for rec in batch {
        encoder.encode_into(rec, &mut g)?;
        let (y, cache) = tower.forward(&g, Mode::Train, dropout_rng)?;
        let label = match task {
            DnnTask::Ctr => rec.click,
            DnnTask::Cvr => rec.buy,
        };
        let (l, dl) = logloss(y, label);
        match task {
            DnnTask::Ctr => {
                stats.loss_ctr += l * inv_n;
                stats.n_ctr += 1;
            }
            DnnTask::Cvr => {
                stats.loss_cvr_clicked += l * inv_n;
                stats.n_cvr_clicked += 1;
            }
        }
        let d_in = tower.backward_into(&cache, dl * inv_n, &mut grads.towers[tower_idx])?;
        encoder.encode_backward(rec, &d_in, &mut grads.encoders[enc_idx])?;
    }
    stats.loss = stats.loss_ctr + stats.loss_cvr_clicked;
    Ok(stats)
}

/// Per-epoch scalars captured during training; everything lands in the
/// checkpoint so a run can be audited after the fact.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub loss_ctr: Vec<f64>,
    pub loss_ctavr: Vec<f64>,
    pub loss_ctcvr: Vec<f64>,
    pub loss_cvr_clicked: Vec<f64>,
    pub val_ctr_auc: Vec<f64>,
    pub val_cvr_auc: Vec<f64>,
    pub val_ctcvr_auc: Vec<f64>,
    /// Records contributing to each loss term per epoch (entire-space
    /// instrumentation).
    pub records_ctr: Vec<f64>,
    pub records_ctavr: Vec<f64>,
    pub records_ctcvr: Vec<f64>,
    pub records_cvr_clicked: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: Model,
    pub final_opt: ModelOpt,
    pub best_model: Model,
    pub best_opt: ModelOpt,
    pub best_epoch: usize,
    pub history: TrainingHistory,
    /// Set when training aborted on a non-finite loss or gradient; the
    /// models above are the last good snapshot.
    pub diverged: Option<(usize, String)>,
}

/// Predictions over every record of a dataset.
pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<Predictions>> {
    dataset.records.iter().map(|r| model.predict(r)).collect()
}

/// Validation AUCs; NaN where the population is single-class.
pub fn validation_aucs(model: &Model, val: &Dataset) -> Result<(f64, f64, f64)> {
    let preds = predict_dataset(model, val)?;
    let to_auc = |scores: Vec<f64>, labels: Vec<bool>| -> Result<f64> {
        if scores.is_empty() {
            return Ok(f64::NAN);
        }
        match auc(&ScoredSet::new(scores, labels, None)?, TieHandling::Strict) {
            Ok(a) => Ok(a),
            Err(Esm2Error::UndefinedAuc(_)) => Ok(f64::NAN),
            Err(e) => Err(e),
        }
    };
    let ctr = to_auc(
        preds.iter().map(|p| p.pctr).collect(),
        val.records.iter().map(|r| r.click).collect(),
    )?;
    let clicked: Vec<usize> = (0..val.len()).filter(|&i| val.records[i].click).collect();
    let cvr = to_auc(
        clicked.iter().map(|&i| preds[i].pcvr).collect(),
        clicked.iter().map(|&i| val.records[i].buy).collect(),
    )?;
    let ctcvr = to_auc(
        preds.iter().map(|p| p.pctcvr).collect(),
        val.records.iter().map(|r| r.buy).collect(),
    )?;
    Ok((ctr, cvr, ctcvr))
}

/// Train a model: seeded shuffle, mini-batches, manual backprop, one Adam
/// step per batch, per-epoch validation metrics, best-checkpoint selection
/// by validation conversion AUC (falling back to entire-space purchase AUC,
/// then click AUC, then training loss when a population is single-class).
pub fn train(
    train_ds: &Dataset,
    val_ds: &Dataset,
    schema: &SchemaMeta,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    train_ds.validate()?;
    val_ds.validate()?;
    if train_ds.field_vocab_sizes != schema.vocab_sizes || train_ds.dense_dim != schema.dense_dim {
        return Err(Esm2Error::Incompatible(
            "training dataset does not match the declared schema".into(),
        ));
    }

    let train_ds = recompose_daction(train_ds, config.daction_composition);
    let val_ds = recompose_daction(val_ds, config.daction_composition);

    let stats = fit_dense_stats(&train_ds)?;
    let mut model = Model::new(config, schema, &stats)?;
    let mut opt = ModelOpt::new(&model);
    let mut grads = ModelGrads::zeros_like(&model);

    let mut shuffle_rng = stream_rng(config.seed, streams::SHUFFLE);
    let mut dropout_rng = stream_rng(config.seed, streams::DROPOUT);
    let mut oversample_rng = stream_rng(config.seed, streams::OVERSAMPLE);

    let mut history = TrainingHistory::default();
    let mut best_model = model.clone();
    let mut best_opt = opt.clone();
    let mut best_epoch = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut last_good: Option<(Model, ModelOpt)> = None;
    let mut diverged: Option<(usize, String)> = None;

    let n = train_ds.len();
    let clicked: Vec<usize> = (0..n).filter(|&i| train_ds.records[i].click).collect();

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_stats = BatchStats::default();
        let mut weighted = |acc: &mut BatchStats, s: &BatchStats| {
            let frac = s.n as f64;
            acc.loss += s.loss * frac;
            acc.loss_ctr += s.loss_ctr * frac;
            acc.loss_ctavr += s.loss_ctavr * frac;
            acc.loss_ctcvr += s.loss_ctcvr * frac;
            acc.loss_cvr_clicked += s.loss_cvr_clicked * frac;
            acc.n += s.n;
            acc.n_ctr += s.n_ctr;
            acc.n_ctavr += s.n_ctavr;
            acc.n_ctcvr += s.n_ctcvr;
            acc.n_cvr_clicked += s.n_cvr_clicked;
        };

        let is_dnn = matches!(config.variant, Variant::Dnn | Variant::DnnOs);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&BehaviorRecord> = chunk.iter().map(|&i| &train_ds.records[i]).collect();
            grads.reset();
            let stats = if is_dnn {
                accumulate_batch_dnn(&model, &batch, DnnTask::Ctr, &mut grads, &mut dropout_rng)
            } else {
                accumulate_batch(&model, &batch, &mut grads, &mut dropout_rng)
            };
            let stats = match stats {
                Ok(s) => s,
                Err(e) => {
                    diverged = Some((epoch, e.to_string()));
                    break 'epochs;
                }
            };
            if !stats.loss.is_finite() {
                diverged = Some((epoch, format!("non-finite batch loss {}", stats.loss)));
                break 'epochs;
            }
            if let Err(e) = apply_adam(&mut model, &grads, &mut opt, config.learning_rate) {
                diverged = Some((epoch, e.to_string()));
                break 'epochs;
            }
            weighted(&mut epoch_stats, &stats);
        }

        if is_dnn {
            // Second phase: the conversion submodel sees clicked samples
            // only, oversampled for the dnn_os variant.
            let mut cvr_stream: Vec<usize> = if config.variant == Variant::DnnOs {
                oversample(
                    &clicked,
                    |&i| train_ds.records[i].buy,
                    config.oversample_factor,
                    &mut oversample_rng,
                )?
            } else {
                clicked.clone()
            };
            cvr_stream.shuffle(&mut shuffle_rng);
            for chunk in cvr_stream.chunks(config.batch_size) {
                let batch: Vec<&BehaviorRecord> =
                    chunk.iter().map(|&i| &train_ds.records[i]).collect();
                grads.reset();
                let stats = match accumulate_batch_dnn(
                    &model,
                    &batch,
                    DnnTask::Cvr,
                    &mut grads,
                    &mut dropout_rng,
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        diverged = Some((epoch, e.to_string()));
                        break 'epochs;
                    }
                };
                if !stats.loss.is_finite() {
                    diverged = Some((epoch, format!("non-finite batch loss {}", stats.loss)));
                    break 'epochs;
                }
                if let Err(e) = apply_adam(&mut model, &grads, &mut opt, config.learning_rate) {
                    diverged = Some((epoch, e.to_string()));
                    break 'epochs;
                }
                weighted(&mut epoch_stats, &stats);
            }
        }

        let denom = epoch_stats.n as f64;
        history.train_loss.push(epoch_stats.loss / denom);
        history.loss_ctr.push(epoch_stats.loss_ctr / denom);
        history.loss_ctavr.push(epoch_stats.loss_ctavr / denom);
        history.loss_ctcvr.push(epoch_stats.loss_ctcvr / denom);
        history.loss_cvr_clicked.push(epoch_stats.loss_cvr_clicked / denom);
        history.records_ctr.push(epoch_stats.n_ctr as f64);
        history.records_ctavr.push(epoch_stats.n_ctavr as f64);
        history.records_ctcvr.push(epoch_stats.n_ctcvr as f64);
        history.records_cvr_clicked.push(epoch_stats.n_cvr_clicked as f64);

        let (val_ctr, val_cvr, val_ctcvr) = validation_aucs(&model, &val_ds)?;
        history.val_ctr_auc.push(val_ctr);
        history.val_cvr_auc.push(val_cvr);
        history.val_ctcvr_auc.push(val_ctcvr);

        let score = [val_cvr, val_ctcvr, val_ctr, -history.train_loss[epoch]]
            .into_iter()
            .find(|v| v.is_finite())
            .unwrap_or(f64::NEG_INFINITY);
        if score > best_score {
            best_score = score;
            best_model = model.clone();
            best_opt = opt.clone();
            best_epoch = epoch;
        }
        last_good = Some((model.clone(), opt.clone()));
    }

    if diverged.is_some() {
        if let Some((m, o)) = last_good {
            model = m;
            opt = o;
        } else {
            // Diverged inside the first epoch: fall back to initialization.
            let stats = fit_dense_stats(&train_ds)?;
            model = Model::new(config, schema, &stats)?;
            opt = ModelOpt::new(&model);
        }
    }

    history.best_epoch = best_epoch;
    Ok(TrainOutcome {
        final_model: model,
        final_opt: opt,
        best_model,
        best_opt,
        best_epoch,
        history,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_records, GeneratorConfig, FIELD_VOCAB_SIZES};

    fn desk_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            batch_size: 64,
            learning_rate: 0.005,
            epochs: 2,
            dropout: 0.0,
            layer_dims: vec![16, 8],
            embedding_dim: 4,
            seed: 11,
            ..Default::default()
        }
    }

    fn small_data(n: usize, seed: u64) -> (Dataset, Dataset) {
        let cfg = GeneratorConfig {
            num_impressions: n,
            num_users: 200,
            num_items: 300,
            target_click_rate: 0.3,
            target_daction_given_click: 0.3,
            target_buy_given_daction: 0.4,
            target_buy_given_oaction: 0.05,
            seed,
            ..Default::default()
        };
        let (_, records) = generate_records(&cfg, 1).unwrap();
        let cut = n * 4 / 5;
        let mk = |recs: Vec<BehaviorRecord>| Dataset {
            records: recs,
            field_vocab_sizes: FIELD_VOCAB_SIZES.to_vec(),
            dense_dim: crate::datagen::DENSE_DIM,
        };
        (
            mk(records[..cut].to_vec()),
            mk(records[cut..].to_vec()),
        )
    }

    #[test]
    fn logloss_known_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logloss(0.5, true).0 - ln2).abs() < 1e-12);
        assert!((logloss(0.5, false).0 - ln2).abs() < 1e-12);
        // Exactly right predictions bottom out at the clamp floor.
        assert!((logloss(1.0, true).0 - 1e-7).abs() < 1e-9);
        assert!((logloss(0.0, false).0 - 1e-7).abs() < 1e-9);
        // Hand-differentiated: d/dp of -ln(1-p) at 0.9 is 10.
        let (l, d) = logloss(0.9, false);
        assert!((l - 2.302585092994046).abs() < 1e-12);
        assert!((d - 10.0).abs() < 1e-9);
    }

    #[test]
    fn total_loss_examples() {
        let p = ComposedProbs {
            pctr: 0.5,
            pctavr: 0.5,
            pcvr: 0.5,
            pctcvr: 0.5,
        };
        let zero_w = LossWeights {
            w_ctr: 0.0,
            w_ctavr: 0.0,
            w_ctcvr: 0.0,
        };
        assert_eq!(total_loss(&[p], &[(true, false, false)], &zero_w).unwrap(), 0.0);
        let l = total_loss(&[p], &[(true, false, false)], &LossWeights::default()).unwrap();
        assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 2.0794415416798357).abs() < 1e-12);
    }

    #[test]
    fn total_loss_matches_naive_summation() {
        use rand::Rng;
        let mut rng = stream_rng(5, 600);
        let n = 16;
        let probs: Vec<ComposedProbs> = (0..n)
            .map(|_| ComposedProbs {
                pctr: rng.random(),
                pctavr: rng.random(),
                pcvr: rng.random(),
                pctcvr: rng.random(),
            })
            .collect();
        let labels: Vec<(bool, bool, bool)> = (0..n)
            .map(|_| {
                let c = rng.random::<f64>() < 0.5;
                let a = c && rng.random::<f64>() < 0.5;
                let b = c && rng.random::<f64>() < 0.5;
                (c, a, b)
            })
            .collect();
        let w = LossWeights {
            w_ctr: 0.7,
            w_ctavr: 1.3,
            w_ctcvr: 0.4,
        };
        let fast = total_loss(&probs, &labels, &w).unwrap();
        // Naive per-sample oracle.
        let mut sum = 0.0;
        for (p, &(c, a, b)) in probs.iter().zip(&labels) {
            sum += w.w_ctr * logloss(p.pctr, c).0;
            sum += w.w_ctavr * logloss(p.pctavr, a).0;
            sum += w.w_ctcvr * logloss(p.pctcvr, b).0;
        }
        assert!((fast - sum / n as f64).abs() <= 1e-12);
    }

    #[test]
    fn total_loss_rejects_inconsistent_labels() {
        let p = ComposedProbs {
            pctr: 0.5,
            pctavr: 0.5,
            pcvr: 0.5,
            pctcvr: 0.5,
        };
        assert!(total_loss(&[p], &[(false, false, true)], &LossWeights::default()).is_err());
        assert!(total_loss(&[], &[], &LossWeights::default()).is_err());
    }

    #[test]
    fn oversample_counts() {
        let mut rng = stream_rng(1, 601);
        let samples: Vec<i32> = vec![1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let out = oversample(&samples, |&s| s == 1, 5, &mut rng).unwrap();
        assert_eq!(out.iter().filter(|&&s| s == 1).count(), 10);
        assert_eq!(out.iter().filter(|&&s| s == 0).count(), 10);

        let mut same = oversample(&samples, |&s| s == 1, 1, &mut rng).unwrap();
        same.sort_unstable();
        let mut orig = samples.clone();
        orig.sort_unstable();
        assert_eq!(same, orig);
        assert!(oversample(&samples, |&s| s == 1, 0, &mut rng).is_err());
    }

    /// Counting oracle: positive rate after oversampling is kp/(kp + (1-p)).
    #[test]
    fn oversample_rate_formula() {
        let mut rng = stream_rng(2, 602);
        let n = 5000usize;
        let samples: Vec<bool> = (0..n).map(|i| i % 50 == 0).collect();
        let p = samples.iter().filter(|&&s| s).count() as f64 / n as f64;
        let k = 7usize;
        let out = oversample(&samples, |&s| s, k, &mut rng).unwrap();
        let rate = out.iter().filter(|&&s| s).count() as f64 / out.len() as f64;
        let expected = k as f64 * p / (k as f64 * p + (1.0 - p));
        assert!((rate - expected).abs() < 1e-12);
    }

    #[test]
    fn recompose_variants() {
        let (ds, _) = small_data(200, 3);
        let scart_only = recompose_daction(&ds, DactionChoice::Scart);
        let wish_only = recompose_daction(&ds, DactionChoice::Wish);
        let both = recompose_daction(&ds, DactionChoice::Both);
        for i in 0..ds.len() {
            assert_eq!(scart_only.records[i].daction, ds.records[i].scart);
            assert_eq!(wish_only.records[i].daction, ds.records[i].wish);
            assert_eq!(
                both.records[i].daction,
                ds.records[i].scart || ds.records[i].wish
            );
            assert_eq!(both.records[i].click, ds.records[i].click);
            assert_eq!(both.records[i].buy, ds.records[i].buy);
        }
        let rate = |d: &Dataset| d.records.iter().filter(|r| r.daction).count();
        assert!(rate(&both) >= rate(&scart_only).max(rate(&wish_only)));
    }

    /// Zeroing the action and purchase loss weights starves towers y2..y4 of
    /// gradient: they only receive signal through the composition.
    #[test]
    fn ctr_only_weights_leave_downstream_towers_untouched() {
        let (ds, _) = small_data(200, 5);
        let mut config = desk_config(Variant::Esm2);
        config.loss_weights = LossWeights {
            w_ctr: 1.0,
            w_ctavr: 0.0,
            w_ctcvr: 0.0,
        };
        let stats = fit_dense_stats(&ds).unwrap();
        let schema = SchemaMeta::current();
        let model = Model::new(&config, &schema, &stats).unwrap();
        let mut grads = ModelGrads::zeros_like(&model);
        let batch: Vec<&BehaviorRecord> = ds.records.iter().take(64).collect();
        let mut rng = stream_rng(1, 603);
        accumulate_batch(&model, &batch, &mut grads, &mut rng).unwrap();

        // Tower 0 (click) must have gradient; towers 1..3 must be exactly zero.
        let nonzero = |g: &TowerGrads| {
            g.weights.iter().flatten().any(|&v| v != 0.0)
                || g.biases.iter().flatten().any(|&v| v != 0.0)
        };
        assert!(nonzero(&grads.towers[0]));
        for k in 1..4 {
            assert!(!nonzero(&grads.towers[k]), "tower {k} received gradient");
        }
    }

    /// Entire-space accounting: every record feeds every loss term.
    #[test]
    fn entire_space_counters() {
        let (train_ds, val_ds) = small_data(300, 7);
        let schema = SchemaMeta::current();
        for variant in [Variant::Esm2, Variant::Esmm] {
            let mut config = desk_config(variant);
            config.epochs = 1;
            let out = train(&train_ds, &val_ds, &schema, &config).unwrap();
            assert_eq!(out.history.records_ctr[0] as usize, train_ds.len());
            assert_eq!(out.history.records_ctcvr[0] as usize, train_ds.len());
            if variant == Variant::Esm2 {
                assert_eq!(out.history.records_ctavr[0] as usize, train_ds.len());
            }
        }
    }

    #[test]
    fn dnn_cvr_phase_sees_only_clicked() {
        let (train_ds, val_ds) = small_data(300, 9);
        let schema = SchemaMeta::current();
        let config = desk_config(Variant::Dnn);
        let out = train(&train_ds, &val_ds, &schema, &config).unwrap();
        let clicked = train_ds.records.iter().filter(|r| r.click).count();
        assert_eq!(out.history.records_cvr_clicked[0] as usize, clicked);
        assert_eq!(out.history.records_ctr[0] as usize, train_ds.len());
    }

    #[test]
    fn dnn_os_inflates_positive_stream() {
        let (train_ds, val_ds) = small_data(300, 13);
        let schema = SchemaMeta::current();
        let mut config = desk_config(Variant::DnnOs);
        config.oversample_factor = 5;
        let out = train(&train_ds, &val_ds, &schema, &config).unwrap();
        let clicked: Vec<_> = train_ds.records.iter().filter(|r| r.click).collect();
        let pos = clicked.iter().filter(|r| r.buy).count();
        let expected = clicked.len() + pos * 4;
        assert_eq!(out.history.records_cvr_clicked[0] as usize, expected);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (train_ds, val_ds) = small_data(200, 15);
        let schema = SchemaMeta::current();
        let mut config = desk_config(Variant::Esm2);
        config.epochs = 0;
        let out = train(&train_ds, &val_ds, &schema, &config).unwrap();
        let train_recomposed = recompose_daction(&train_ds, config.daction_composition);
        let stats = fit_dense_stats(&train_recomposed).unwrap();
        let fresh = Model::new(&config, &schema, &stats).unwrap();
        assert_eq!(out.final_model, fresh);
        assert_eq!(out.best_model, fresh);
        assert!(out.history.train_loss.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (train_ds, val_ds) = small_data(300, 17);
        let schema = SchemaMeta::current();
        for variant in [Variant::Esm2, Variant::Esmm, Variant::Dnn, Variant::DnnOs] {
            let config = desk_config(variant);
            let a = train(&train_ds, &val_ds, &schema, &config).unwrap();
            let b = train(&train_ds, &val_ds, &schema, &config).unwrap();
            assert_eq!(a.history, b.history, "variant {variant}");
            assert_eq!(a.final_model, b.final_model, "variant {variant}");
        }
    }

    #[test]
    fn divergence_aborts_with_last_good_snapshot() {
        let (train_ds, val_ds) = small_data(200, 19);
        let schema = SchemaMeta::current();
        let mut config = desk_config(Variant::Esm2);
        config.loss_weights = LossWeights {
            w_ctr: 1e308,
            w_ctavr: 1e308,
            w_ctcvr: 1e308,
        };
        let out = train(&train_ds, &val_ds, &schema, &config).unwrap();
        assert!(out.diverged.is_some());
        // Diverged in epoch 0: the snapshot is the initialization.
        let train_recomposed = recompose_daction(&train_ds, config.daction_composition);
        let stats = fit_dense_stats(&train_recomposed).unwrap();
        let fresh = Model::new(&config, &schema, &stats).unwrap();
        assert_eq!(out.final_model, fresh);
    }

    /// Overfit sanity at unit-test scale: capacity far exceeds 60 records,
    /// so the training loss must collapse.
    #[test]
    fn overfits_a_tiny_dataset() {
        let (mut train_ds, _) = small_data(75, 21);
        train_ds.records.truncate(60);
        let schema = SchemaMeta::current();
        let config = TrainConfig {
            variant: Variant::Esm2,
            batch_size: 60,
            learning_rate: 0.02,
            epochs: 300,
            dropout: 0.0,
            layer_dims: vec![32, 16],
            embedding_dim: 8,
            seed: 3,
            ..Default::default()
        };
        let out = train(&train_ds, &train_ds, &schema, &config).unwrap();
        let final_loss = *out.history.train_loss.last().unwrap();
        assert!(final_loss < 0.05, "loss {final_loss} did not collapse");

        // Loss is non-increasing over any 10-epoch window after warmup.
        let warmup = 30;
        for e in warmup..out.history.train_loss.len() - 10 {
            assert!(
                out.history.train_loss[e + 10] <= out.history.train_loss[e] + 1e-9,
                "loss rose between epochs {e} and {}",
                e + 10
            );
        }
    }
}
