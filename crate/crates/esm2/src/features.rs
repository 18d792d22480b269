//! Shared feature encoder: embedding tables for sparse ID fields plus dense
//! numerical features, producing the one input vector consumed by every
//! tower. Sparse lookups are the one-hot-times-matrix product of a linear
//! embedding layer, realized as row selection. Dense features default to
//! normalize-then-tanh; a discretize-to-buckets variant is available for the
//! ablation comparing the two dense encodings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{BehaviorRecord, Dataset};
use crate::error::{Esm2Error, Result};

pub const DENSE_STD_FLOOR: f64 = 1e-6;
/// Bucket edges for the discretized dense encoding, in units of sigma.
const DISCRETIZE_EDGES: [f64; 7] = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
/// Embedding width for each discretized dense feature.
const DISCRETIZE_EMB_DIM: usize = 4;

/// Embedding matrix for one sparse field; `weights` is row-major
/// `vocab_size x dim`, one row per bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub field_index: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl EmbeddingTable {
    /// Uniform init in [-1/sqrt(dim), 1/sqrt(dim)] keeps initial logits O(1).
    fn init(field_index: usize, vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let weights = (0..vocab_size * dim)
            .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
            .collect();
        EmbeddingTable {
            field_index,
            vocab_size,
            dim,
            weights,
        }
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.weights[bucket * self.dim..(bucket + 1) * self.dim]
    }
}

/// Per-dimension mean and standard deviation of the dense features, fitted
/// on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean/std per dense dimension; std floored at
/// [`DENSE_STD_FLOOR`] so constant columns stay usable.
pub fn fit_dense_stats(train: &Dataset) -> Result<DenseStats> {
    if train.records.len() < 2 {
        return Err(Esm2Error::EmptyDataset(format!(
            "dense stats need at least 2 training records, got {}",
            train.records.len()
        )));
    }
    let d = train.dense_dim;
    let n = train.records.len() as f64;
    let mut mean = vec![0.0; d];
    for r in &train.records {
        for (m, x) in mean.iter_mut().zip(&r.dense) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in &train.records {
        for ((v, x), m) in var.iter_mut().zip(&r.dense).zip(&mean) {
            let dx = x - m;
            *v += dx * dx;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n).sqrt().max(DENSE_STD_FLOOR))
        .collect();
    Ok(DenseStats { mean, std })
}

/// How dense numerical features enter the shared input vector.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseEncoding {
    /// tanh((x - mean) / std), one output per dense dim.
    Normalized,
    /// Bucketize by sigma offsets from the mean, then embed each bucket;
    /// `tables[j]` holds the embedding for dense dim `j`.
    Discretized { tables: Vec<EmbeddingTable> },
}

/// The shared embedding module: one table per sparse field plus the dense
/// path. All towers read the same encoder output for a record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    pub tables: Vec<EmbeddingTable>,
    pub dense_stats: DenseStats,
    pub dense_encoding: DenseEncoding,
    pub output_dim: usize,
}

/// Gradient buffers shaped like an encoder's trainable tables.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub tables: Vec<Vec<f64>>,
    pub dense_tables: Vec<Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &FeatureEncoder) -> Self {
        let dense_tables = match &enc.dense_encoding {
            DenseEncoding::Normalized => Vec::new(),
            DenseEncoding::Discretized { tables } => {
                tables.iter().map(|t| vec![0.0; t.weights.len()]).collect()
            }
        };
        EncoderGrads {
            tables: enc.tables.iter().map(|t| vec![0.0; t.weights.len()]).collect(),
            dense_tables,
        }
    }

    pub fn reset(&mut self) {
        for t in self.tables.iter_mut().chain(self.dense_tables.iter_mut()) {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl FeatureEncoder {
    /// Build an encoder for the given field vocabularies. `discretize_dense`
    /// selects the bucketized dense path used by the dense-feature ablation.
    pub fn new(
        field_vocab_sizes: &[usize],
        embedding_dim: usize,
        dense_stats: DenseStats,
        discretize_dense: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Esm2Error::InvalidConfig("embedding dim must be >= 1".into()));
        }
        if field_vocab_sizes.iter().any(|&v| v == 0) {
            return Err(Esm2Error::InvalidConfig("zero vocab size".into()));
        }
        let tables: Vec<EmbeddingTable> = field_vocab_sizes
            .iter()
            .enumerate()
            .map(|(f, &v)| EmbeddingTable::init(f, v, embedding_dim, rng))
            .collect();
        let dense_dim = dense_stats.mean.len();
        let dense_encoding = if discretize_dense {
            let tables = (0..dense_dim)
                .map(|j| EmbeddingTable::init(j, DISCRETIZE_EDGES.len() + 1, DISCRETIZE_EMB_DIM, rng))
                .collect();
            DenseEncoding::Discretized { tables }
        } else {
            DenseEncoding::Normalized
        };
        let output_dim = field_vocab_sizes.len() * embedding_dim
            + match &dense_encoding {
                DenseEncoding::Normalized => dense_dim,
                DenseEncoding::Discretized { .. } => dense_dim * DISCRETIZE_EMB_DIM,
            };
        Ok(FeatureEncoder {
            tables,
            dense_stats,
            dense_encoding,
            output_dim,
        })
    }

    pub fn dense_dim(&self) -> usize {
        self.dense_stats.mean.len()
    }

    fn dense_bucket(&self, j: usize, x: f64) -> usize {
        let z = (x - self.dense_stats.mean[j]) / self.dense_stats.std[j];
        DISCRETIZE_EDGES.iter().take_while(|&&e| z > e).count()
    }

    pub fn encode(&self, record: &BehaviorRecord) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.output_dim);
        self.encode_into(record, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, record: &BehaviorRecord, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        if record.sparse_ids.len() != self.tables.len() {
            return Err(Esm2Error::ShapeMismatch(format!(
                "record has {} sparse fields, encoder has {}",
                record.sparse_ids.len(),
                self.tables.len()
            )));
        }
        if record.dense.len() != self.dense_dim() {
            return Err(Esm2Error::ShapeMismatch(format!(
                "record has {} dense dims, encoder has {}",
                record.dense.len(),
                self.dense_dim()
            )));
        }
        for &(field, bucket) in &record.sparse_ids {
            let table = self.tables.get(field).ok_or(Esm2Error::BucketOutOfRange {
                field,
                bucket,
                vocab: 0,
            })?;
            if bucket >= table.vocab_size {
                return Err(Esm2Error::BucketOutOfRange {
                    field,
                    bucket,
                    vocab: table.vocab_size,
                });
            }
            out.extend_from_slice(table.row(bucket));
        }
        match &self.dense_encoding {
            DenseEncoding::Normalized => {
                for (j, &x) in record.dense.iter().enumerate() {
                    let z = (x - self.dense_stats.mean[j]) / self.dense_stats.std[j];
                    out.push(z.tanh());
                }
            }
            DenseEncoding::Discretized { tables } => {
                for (j, &x) in record.dense.iter().enumerate() {
                    out.extend_from_slice(tables[j].row(self.dense_bucket(j, x)));
                }
            }
        }
        Ok(())
    }

    /// Route dL/d(encoder output) back onto the looked-up embedding rows.
    /// The normalized dense path has no trainable parameters, so its grad
    /// slice is dropped; stats are frozen after fitting.
    pub fn encode_backward(
        &self,
        record: &BehaviorRecord,
        d_output: &[f64],
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        if d_output.len() != self.output_dim {
            return Err(Esm2Error::ShapeMismatch(format!(
                "gradient length {} != encoder output dim {}",
                d_output.len(),
                self.output_dim
            )));
        }
        let mut offset = 0;
        for &(field, bucket) in &record.sparse_ids {
            let table = &self.tables[field];
            let dst = &mut grads.tables[field][bucket * table.dim..(bucket + 1) * table.dim];
            for (g, d) in dst.iter_mut().zip(&d_output[offset..offset + table.dim]) {
                *g += d;
            }
            offset += table.dim;
        }
        if let DenseEncoding::Discretized { tables } = &self.dense_encoding {
            for (j, &x) in record.dense.iter().enumerate() {
                let bucket = self.dense_bucket(j, x);
                let dim = tables[j].dim;
                let dst = &mut grads.dense_tables[j][bucket * dim..(bucket + 1) * dim];
                for (g, d) in dst.iter_mut().zip(&d_output[offset..offset + dim]) {
                    *g += d;
                }
                offset += dim;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::test_support::record_with;
    use crate::seeding::stream_rng;

    fn tiny_dataset(dense_cols: Vec<Vec<f64>>) -> Dataset {
        let n = dense_cols[0].len();
        let records = (0..n)
            .map(|i| {
                let dense: Vec<f64> = dense_cols.iter().map(|c| c[i]).collect();
                record_with(i as u64, 0, vec![(0, 0)], dense)
            })
            .collect();
        Dataset {
            records,
            field_vocab_sizes: vec![4],
            dense_dim: dense_cols.len(),
        }
    }

    #[test]
    fn constant_column_floors_std() {
        let ds = tiny_dataset(vec![vec![5.0, 5.0, 5.0]]);
        let stats = fit_dense_stats(&ds).unwrap();
        assert_eq!(stats.mean[0], 5.0);
        assert_eq!(stats.std[0], DENSE_STD_FLOOR);
    }

    #[test]
    fn population_std_convention() {
        let ds = tiny_dataset(vec![vec![0.0, 2.0]]);
        let stats = fit_dense_stats(&ds).unwrap();
        assert_eq!(stats.mean[0], 1.0);
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut rng = stream_rng(3, 77);
        let n = 10_000;
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                (0..n)
                    .map(|_| rng.random::<f64>() * (c as f64 + 1.0) - 0.3)
                    .collect()
            })
            .collect();
        let ds = tiny_dataset(cols.clone());
        let stats = fit_dense_stats(&ds).unwrap();
        for (j, col) in cols.iter().enumerate() {
            // Independent naive two-pass computation.
            let mean: f64 = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            assert!((stats.mean[j] - mean).abs() <= 1e-12);
            assert!((stats.std[j] - var.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn too_few_records_rejected() {
        let ds = tiny_dataset(vec![vec![1.0]]);
        assert!(matches!(fit_dense_stats(&ds), Err(Esm2Error::EmptyDataset(_))));
    }

    fn encoder_with(vocabs: &[usize], dim: usize, dense: DenseStats) -> FeatureEncoder {
        FeatureEncoder::new(vocabs, dim, dense, false, &mut stream_rng(1, 10)).unwrap()
    }

    #[test]
    fn sparse_span_is_exactly_the_looked_up_row() {
        let enc = encoder_with(
            &[8],
            5,
            DenseStats {
                mean: vec![0.0],
                std: vec![1.0],
            },
        );
        let rec = record_with(1, 2, vec![(0, 3)], vec![0.0]);
        let g = enc.encode(&rec).unwrap();
        assert_eq!(&g[..5], enc.tables[0].row(3));
        assert_eq!(g.len(), enc.output_dim);
    }

    #[test]
    fn dense_at_mean_encodes_to_zero_and_one_sigma_to_tanh1() {
        let enc = encoder_with(
            &[4],
            2,
            DenseStats {
                mean: vec![3.0, -1.0],
                std: vec![2.0, 0.5],
            },
        );
        let rec = record_with(0, 0, vec![(0, 1)], vec![3.0, -0.5]);
        let g = enc.encode(&rec).unwrap();
        assert_eq!(g[2], 0.0);
        assert!((g[3] - 1.0_f64.tanh()).abs() < 1e-15);
        assert!((g[3] - 0.7615941559557649).abs() < 1e-12);
    }

    #[test]
    fn dense_output_strictly_bounded() {
        let enc = encoder_with(
            &[4],
            2,
            DenseStats {
                mean: vec![0.0],
                std: vec![DENSE_STD_FLOOR],
            },
        );
        let rec = record_with(0, 0, vec![(0, 1)], vec![1e9]);
        let g = enc.encode(&rec).unwrap();
        let z = *g.last().unwrap();
        assert!(z > -1.0 && z < 1.0);
    }

    #[test]
    fn bucket_out_of_range_rejected() {
        let enc = encoder_with(
            &[4],
            2,
            DenseStats {
                mean: vec![0.0],
                std: vec![1.0],
            },
        );
        let rec = record_with(0, 0, vec![(0, 4)], vec![0.0]);
        assert!(matches!(
            enc.encode(&rec),
            Err(Esm2Error::BucketOutOfRange { .. })
        ));
    }

    /// Lookup equivalence: encoding equals the explicit one-hot vector times
    /// embedding matrix product.
    #[test]
    fn lookup_equals_one_hot_matmul() {
        let mut rng = stream_rng(9, 11);
        let enc = FeatureEncoder::new(
            &[6, 9],
            4,
            DenseStats {
                mean: vec![],
                std: vec![],
            },
            false,
            &mut rng,
        )
        .unwrap();
        for bucket0 in 0..6 {
            for bucket1 in 0..9 {
                let rec = record_with(0, 0, vec![(0, bucket0), (1, bucket1)], vec![]);
                let g = enc.encode(&rec).unwrap();
                for (f, bucket) in [(0usize, bucket0), (1usize, bucket1)] {
                    let t = &enc.tables[f];
                    let one_hot: Vec<f64> =
                        (0..t.vocab_size).map(|i| (i == bucket) as u8 as f64).collect();
                    // g_j = sum_i one_hot[i] * W[i][j]
                    for j in 0..t.dim {
                        let mm: f64 = (0..t.vocab_size)
                            .map(|i| one_hot[i] * t.weights[i * t.dim + j])
                            .sum();
                        assert!((mm - g[f * t.dim + j]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_routes_only_to_looked_up_rows() {
        let enc = encoder_with(
            &[4, 4],
            3,
            DenseStats {
                mean: vec![0.0],
                std: vec![1.0],
            },
        );
        let rec = record_with(0, 0, vec![(0, 1), (1, 2)], vec![0.5]);
        let mut grads = EncoderGrads::zeros_like(&enc);

        let zeros = vec![0.0; enc.output_dim];
        enc.encode_backward(&rec, &zeros, &mut grads).unwrap();
        assert!(grads.tables.iter().flatten().all(|&g| g == 0.0));

        let mut d = vec![0.0; enc.output_dim];
        d[0] = 1.0;
        d[1] = 2.0;
        d[2] = 3.0;
        enc.encode_backward(&rec, &d, &mut grads).unwrap();
        assert_eq!(&grads.tables[0][3..6], &[1.0, 2.0, 3.0]);
        assert!(grads.tables[0][..3].iter().all(|&g| g == 0.0));
        assert!(grads.tables[0][6..].iter().all(|&g| g == 0.0));
        assert!(grads.tables[1].iter().all(|&g| g == 0.0));
    }

    /// Probe loss <d, encode(record)> is linear in the looked-up row, so the
    /// routed gradient must match finite differences tightly.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(21, 12);
        let mut enc = FeatureEncoder::new(
            &[5, 7],
            4,
            DenseStats {
                mean: vec![0.1, -0.2],
                std: vec![1.0, 2.0],
            },
            false,
            &mut rng,
        )
        .unwrap();
        let rec = record_with(0, 0, vec![(0, 2), (1, 6)], vec![0.3, 0.4]);
        let d: Vec<f64> = (0..enc.output_dim)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let mut grads = EncoderGrads::zeros_like(&enc);
        enc.encode_backward(&rec, &d, &mut grads).unwrap();
        let h = 1e-6;
        for (field, bucket) in [(0usize, 2usize), (1, 6)] {
            let dim = enc.tables[field].dim;
            for k in 0..dim {
                let idx = bucket * dim + k;
                let orig = enc.tables[field].weights[idx];
                enc.tables[field].weights[idx] = orig + h;
                let hi: f64 = enc.encode(&rec).unwrap().iter().zip(&d).map(|(a, b)| a * b).sum();
                enc.tables[field].weights[idx] = orig - h;
                let lo: f64 = enc.encode(&rec).unwrap().iter().zip(&d).map(|(a, b)| a * b).sum();
                enc.tables[field].weights[idx] = orig;
                let fd = (hi - lo) / (2.0 * h);
                let analytic = grads.tables[field][idx];
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((analytic - fd) / denom).abs() <= 1e-6,
                    "field {field} idx {idx}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn discretized_dense_path_encodes_and_routes() {
        let mut rng = stream_rng(4, 13);
        let enc = FeatureEncoder::new(
            &[4],
            2,
            DenseStats {
                mean: vec![0.0],
                std: vec![1.0],
            },
            true,
            &mut rng,
        )
        .unwrap();
        assert_eq!(enc.output_dim, 2 + DISCRETIZE_EMB_DIM);
        let rec = record_with(0, 0, vec![(0, 1)], vec![0.25]);
        let g = enc.encode(&rec).unwrap();
        // z = 0.25 exceeds edges -1.5..0.0, so bucket 4.
        let DenseEncoding::Discretized { tables } = &enc.dense_encoding else {
            panic!("expected discretized encoding");
        };
        assert_eq!(&g[2..], tables[0].row(4));

        let mut grads = EncoderGrads::zeros_like(&enc);
        let mut d = vec![0.0; enc.output_dim];
        d[2] = 1.5;
        enc.encode_backward(&rec, &d, &mut grads).unwrap();
        assert_eq!(grads.dense_tables[0][4 * DISCRETIZE_EMB_DIM], 1.5);
    }

    /// Structural sharing: one table per field, distinct field indices.
    #[test]
    fn one_table_per_field() {
        let enc = encoder_with(
            &[3, 5, 7],
            2,
            DenseStats {
                mean: vec![],
                std: vec![],
            },
        );
        assert_eq!(enc.tables.len(), 3);
        for (i, t) in enc.tables.iter().enumerate() {
            assert_eq!(t.field_index, i);
        }
    }
}
