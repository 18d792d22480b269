//! Synthetic impression-log generator and dataset loader.
//!
//! Records follow the behavior graph impression→click→D(O)Action→purchase:
//! a click is sampled first, the cart/wishlist actions only when the click
//! fired, and the purchase probability depends on whether a deterministic
//! action happened. Labels downstream of an unfired parent are forced to
//! zero, so every generated record satisfies the funnel invariants by
//! construction.
//!
//! Each user and item carries a latent vector; every edge of the graph has a
//! fixed direction in latent space, and the edge logit for a (user, item)
//! pair is the projection of their latents onto that direction plus a
//! calibrated bias. Biases are found by bisection so the empirical rates hit
//! the configured targets. Edge directions are orthogonalized so that
//! conditioning on a parent label barely shifts the child logit population,
//! keeping the per-edge calibration accurate without a fixed-point loop.
//!
//! Dense features are a fixed noisy linear projection of the concatenated
//! user/item latents; sparse IDs are hashed into bounded per-field buckets
//! with SplitMix64, so embedding tables stay small however many users the
//! generator is asked for.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Esm2Error, Result};
use crate::network::sigmoid;
use crate::seeding::{stream_rng, streams};

/// Width of the dense feature vector emitted per record.
pub const DENSE_DIM: usize = 8;
/// Sparse fields, in column order.
pub const SPARSE_FIELD_NAMES: [&str; 3] = ["user", "item", "cross"];
/// Bucket counts per sparse field; fixed caps keep embedding tables bounded
/// regardless of `num_users` / `num_items`.
pub const FIELD_VOCAB_SIZES: [usize; 3] = [4096, 4096, 8192];

/// Purchase logits are flattened towards their branch bias: most of the
/// purchase signal rides on whether a deterministic action happened, which
/// is what makes the action labels worth modeling.
const BUY_LOGIT_SCALE: f64 = 0.5;
const CALIBRATION_PAIRS: usize = 50_000;
const BIAS_BRACKET: f64 = 30.0;

const SALT_USER: u64 = 0x5eed_0000_0000_0001;
const SALT_ITEM: u64 = 0x5eed_0000_0000_0002;
const SALT_CROSS: u64 = 0x5eed_0000_0000_0003;

/// SplitMix64 finalizer; the fixed public mixing function behind sparse-ID
/// bucketing.
pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bucket ids for the three sparse fields of a (user, item) pair.
pub fn sparse_buckets(user_id: u64, item_id: u64) -> [(usize, usize); 3] {
    let user = (splitmix64(user_id ^ SALT_USER) % FIELD_VOCAB_SIZES[0] as u64) as usize;
    let item = (splitmix64(item_id ^ SALT_ITEM) % FIELD_VOCAB_SIZES[1] as u64) as usize;
    let cross_key = splitmix64(user_id ^ SALT_CROSS).wrapping_add(item_id);
    let cross = (splitmix64(cross_key) % FIELD_VOCAB_SIZES[2] as u64) as usize;
    [(0, user), (1, item), (2, cross)]
}

/// Generator parameters. The rate targets are what the calibration aims the
/// empirical label frequencies at; defaults mirror production-scale sparsity
/// (about 6% click-through, 12% deterministic action given click, and 1.1%
/// purchase given click).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_impressions: usize,
    pub latent_dim: usize,
    pub target_click_rate: f64,
    pub target_daction_given_click: f64,
    pub target_buy_given_daction: f64,
    pub target_buy_given_oaction: f64,
    /// Fraction of the DAction rate carried by the cart edge; the wishlist
    /// edge is calibrated to cover the rest under independent sampling.
    pub scart_share_of_daction: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
    /// (train, val, test); must sum to 1.
    pub split_fractions: (f64, f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_users: 3000,
            num_items: 5000,
            num_impressions: 200_000,
            latent_dim: 8,
            target_click_rate: 0.0632,
            target_daction_given_click: 0.1212,
            target_buy_given_daction: 0.073,
            target_buy_given_oaction: 0.0024,
            scart_share_of_daction: 0.825,
            feature_noise_sigma: 0.3,
            seed: 42,
            split_fractions: (0.8, 0.1, 0.1),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Esm2Error::InvalidConfig(msg));
        if self.num_users == 0 || self.num_items == 0 || self.num_impressions == 0 {
            return fail("num_users, num_items, num_impressions must be >= 1".into());
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be >= 1".into());
        }
        for (name, p) in [
            ("target_click_rate", self.target_click_rate),
            ("target_daction_given_click", self.target_daction_given_click),
            ("target_buy_given_daction", self.target_buy_given_daction),
            ("target_buy_given_oaction", self.target_buy_given_oaction),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return fail(format!("{name} = {p} must lie strictly inside (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.scart_share_of_daction) {
            return fail(format!(
                "scart_share_of_daction = {} outside [0, 1]",
                self.scart_share_of_daction
            ));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return fail(format!(
                "feature_noise_sigma = {} must be a nonnegative real",
                self.feature_noise_sigma
            ));
        }
        let (a, b, c) = self.split_fractions;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return fail(format!("split fractions ({a}, {b}, {c}) must all be positive"));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return fail(format!("split fractions sum to {}, expected 1", a + b + c));
        }
        Ok(())
    }

    /// Per-edge target rates derived from the config: cart and wishlist each
    /// get a Bernoulli rate such that P(scart OR wish) hits the DAction
    /// target under independence.
    pub fn edge_targets(&self) -> EdgeTargets {
        let p_a = self.target_daction_given_click;
        let p_scart = self.scart_share_of_daction * p_a;
        let p_wish = (p_a - p_scart) / (1.0 - p_scart);
        EdgeTargets {
            click: self.target_click_rate,
            scart: p_scart,
            wish: p_wish,
            buy_daction: self.target_buy_given_daction,
            buy_oaction: self.target_buy_given_oaction,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeTargets {
    pub click: f64,
    pub scart: f64,
    pub wish: f64,
    pub buy_daction: f64,
    pub buy_oaction: f64,
}

/// One impression with its sparse ids, dense features and labels. The
/// impression label itself is implicit (every record is an impression);
/// `daction` is derived from the cart/wishlist flags.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorRecord {
    pub user_id: u64,
    pub item_id: u64,
    pub sparse_ids: Vec<(usize, usize)>,
    pub dense: Vec<f64>,
    pub click: bool,
    pub scart: bool,
    pub wish: bool,
    pub daction: bool,
    pub buy: bool,
}

impl BehaviorRecord {
    /// Funnel consistency: nothing downstream of an unclicked impression.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        if !self.click && (self.scart || self.wish || self.daction || self.buy) {
            return Err("c = 0 but a post-click label is set".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<BehaviorRecord>,
    pub field_vocab_sizes: Vec<usize>,
    pub dense_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Esm2Error::EmptyDataset("dataset has no records".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            r.check_consistency()
                .map_err(|msg| Esm2Error::InvalidConfig(format!("record {i}: {msg}")))?;
            if r.dense.len() != self.dense_dim {
                return Err(Esm2Error::ShapeMismatch(format!(
                    "record {i}: dense width {} != {}",
                    r.dense.len(),
                    self.dense_dim
                )));
            }
            for &(field, bucket) in &r.sparse_ids {
                let vocab = *self.field_vocab_sizes.get(field).unwrap_or(&0);
                if bucket >= vocab {
                    return Err(Esm2Error::BucketOutOfRange { field, bucket, vocab });
                }
            }
        }
        Ok(())
    }
}

/// Find `bias` so that `mean(sigmoid(logit + bias))` over the samples equals
/// `target_rate`, by bisection over [-30, 30]. The mean is monotone in the
/// bias, so bisection converges to machine precision.
pub fn calibrate_bias(logit_samples: &[f64], target_rate: f64) -> Result<f64> {
    if logit_samples.is_empty() {
        return Err(Esm2Error::InvalidConfig(
            "calibrate_bias needs a non-empty logit sample".into(),
        ));
    }
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Esm2Error::InvalidConfig(format!(
            "target rate {target_rate} must lie strictly inside (0, 1)"
        )));
    }
    let n = logit_samples.len() as f64;
    let mean_rate =
        |b: f64| logit_samples.iter().map(|&l| sigmoid(l + b)).sum::<f64>() / n;
    let (mut lo, mut hi) = (-BIAS_BRACKET, BIAS_BRACKET);
    if mean_rate(lo) > target_rate || mean_rate(hi) < target_rate {
        return Err(Esm2Error::Calibration {
            target: target_rate,
            lo,
            hi,
        });
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let bias = 0.5 * (lo + hi);
    if (mean_rate(bias) - target_rate).abs() > 1e-6 {
        return Err(Esm2Error::Calibration {
            target: target_rate,
            lo,
            hi,
        });
    }
    Ok(bias)
}

/// One edge's direction in latent space, split into a user-side and an
/// item-side component, with a logit scale.
#[derive(Debug, Clone)]
struct EdgeDirection {
    user: Vec<f64>,
    item: Vec<f64>,
    scale: f64,
}

/// The fixed latent world behind one dataset: latents, edge directions,
/// calibrated biases and the dense-feature projection.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: GeneratorConfig,
    user_latents: Vec<f64>,
    item_latents: Vec<f64>,
    click: EdgeDirection,
    scart: EdgeDirection,
    wish: EdgeDirection,
    buy: EdgeDirection,
    /// DENSE_DIM x (2 * latent_dim), row-major.
    dense_proj: Vec<f64>,
    pub bias_click: f64,
    /// None when the configured rate is exactly zero (the edge never fires).
    pub bias_scart: Option<f64>,
    pub bias_wish: Option<f64>,
    pub bias_buy_daction: f64,
    pub bias_buy_oaction: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Up to `k` unit vectors in R^d, orthogonalized while d allows it.
fn orthonormal_set(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Vec<Vec<f64>> {
    let mut set: Vec<Vec<f64>> = Vec::with_capacity(k);
    while set.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &set {
                let p = dot(&v, u);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= p * ui;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            set.push(v);
        } else {
            // d < k: no orthogonal direction left, fall back to a fresh
            // normalized draw.
            let mut w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = dot(&w, &w).sqrt().max(1e-12);
            w.iter_mut().for_each(|x| *x /= n);
            set.push(w);
        }
    }
    set
}

impl World {
    pub fn build(cfg: &GeneratorConfig) -> Result<World> {
        cfg.validate()?;
        let d = cfg.latent_dim;

        let mut rng = stream_rng(cfg.seed, streams::USER_LATENTS);
        let user_latents: Vec<f64> = (0..cfg.num_users * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut rng = stream_rng(cfg.seed, streams::ITEM_LATENTS);
        let item_latents: Vec<f64> = (0..cfg.num_items * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();

        let mut rng = stream_rng(cfg.seed, streams::WORLD_WEIGHTS);
        let user_dirs = orthonormal_set(&mut rng, d, 4);
        let item_dirs = orthonormal_set(&mut rng, d, 4);
        let mut dirs = user_dirs.into_iter().zip(item_dirs);
        let mut next_edge = |scale: f64| {
            let (user, item) = dirs.next().expect("four directions");
            EdgeDirection { user, item, scale }
        };
        let click = next_edge(1.0);
        let scart = next_edge(1.0);
        let wish = next_edge(1.0);
        let buy = next_edge(BUY_LOGIT_SCALE);

        let proj_std = (1.0 / (2 * d) as f64).sqrt();
        let dense_proj: Vec<f64> = (0..DENSE_DIM * 2 * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * proj_std
            })
            .collect();

        let mut world = World {
            cfg: cfg.clone(),
            user_latents,
            item_latents,
            click,
            scart,
            wish,
            buy,
            dense_proj,
            bias_click: 0.0,
            bias_scart: None,
            bias_wish: None,
            bias_buy_daction: 0.0,
            bias_buy_oaction: 0.0,
        };

        // Per-edge bisection against an unconditioned pair population.
        let mut rng = stream_rng(cfg.seed, streams::CALIBRATION);
        let mut logits = [const { Vec::new() }; 4];
        for v in &mut logits {
            v.reserve(CALIBRATION_PAIRS);
        }
        for _ in 0..CALIBRATION_PAIRS {
            let user = rng.random_range(0..cfg.num_users as u64);
            let item = rng.random_range(0..cfg.num_items as u64);
            let (u, t) = (world.user_latent(user), world.item_latent(item));
            logits[0].push(world.click.logit(u, t));
            logits[1].push(world.scart.logit(u, t));
            logits[2].push(world.wish.logit(u, t));
            logits[3].push(world.buy.logit(u, t));
        }
        let targets = cfg.edge_targets();
        world.bias_click = calibrate_bias(&logits[0], targets.click)?;
        world.bias_scart = if targets.scart > 0.0 {
            Some(calibrate_bias(&logits[1], targets.scart)?)
        } else {
            None
        };
        world.bias_wish = if targets.wish > 0.0 {
            Some(calibrate_bias(&logits[2], targets.wish)?)
        } else {
            None
        };
        world.bias_buy_daction = calibrate_bias(&logits[3], targets.buy_daction)?;
        world.bias_buy_oaction = calibrate_bias(&logits[3], targets.buy_oaction)?;
        Ok(world)
    }

    pub fn user_latent(&self, user_id: u64) -> &[f64] {
        let d = self.cfg.latent_dim;
        let i = user_id as usize;
        &self.user_latents[i * d..(i + 1) * d]
    }

    pub fn item_latent(&self, item_id: u64) -> &[f64] {
        let d = self.cfg.latent_dim;
        let i = item_id as usize;
        &self.item_latents[i * d..(i + 1) * d]
    }

    /// Hierarchical label sampling along the graph, then the feature vector.
    /// Labels downstream of an unfired parent are never drawn and stay zero.
    pub fn sample_record(
        &self,
        rng: &mut ChaCha8Rng,
        user_id: u64,
        item_id: u64,
    ) -> BehaviorRecord {
        let (u, t) = (self.user_latent(user_id), self.item_latent(item_id));
        let click = rng.random::<f64>() < sigmoid(self.click.logit(u, t) + self.bias_click);
        let (mut scart, mut wish, mut buy) = (false, false, false);
        if click {
            if let Some(b) = self.bias_scart {
                scart = rng.random::<f64>() < sigmoid(self.scart.logit(u, t) + b);
            }
            if let Some(b) = self.bias_wish {
                wish = rng.random::<f64>() < sigmoid(self.wish.logit(u, t) + b);
            }
            let bias = if scart || wish {
                self.bias_buy_daction
            } else {
                self.bias_buy_oaction
            };
            buy = rng.random::<f64>() < sigmoid(self.buy.logit(u, t) + bias);
        }
        let d = self.cfg.latent_dim;
        let mut dense = Vec::with_capacity(DENSE_DIM);
        for k in 0..DENSE_DIM {
            let row = &self.dense_proj[k * 2 * d..(k + 1) * 2 * d];
            let noise: f64 = StandardNormal.sample(rng);
            dense.push(dot(&row[..d], u) + dot(&row[d..], t) + self.cfg.feature_noise_sigma * noise);
        }
        BehaviorRecord {
            user_id,
            item_id,
            sparse_ids: sparse_buckets(user_id, item_id).to_vec(),
            dense,
            click,
            scart,
            wish,
            daction: scart || wish,
            buy,
        }
    }

    pub fn sample_impression(&self, rng: &mut ChaCha8Rng) -> BehaviorRecord {
        let user = rng.random_range(0..self.cfg.num_users as u64);
        let item = rng.random_range(0..self.cfg.num_items as u64);
        self.sample_record(rng, user, item)
    }
}

impl EdgeDirection {
    fn logit(&self, u: &[f64], t: &[f64]) -> f64 {
        self.scale * (dot(&self.user, u) + dot(&self.item, t))
    }
}

/// Largest-remainder rounding of `n` into three split counts.
pub fn split_counts(n: usize, fracs: (f64, f64, f64)) -> [usize; 3] {
    let targets = [fracs.0 * n as f64, fracs.1 * n as f64, fracs.2 * n as f64];
    let mut counts = [0usize; 3];
    for (c, t) in counts.iter_mut().zip(&targets) {
        *c = t.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..n - assigned {
        counts[order[i % 3]] += 1;
    }
    counts
}

fn shard_sizes(n: usize, shards: usize) -> Vec<usize> {
    let base = n / shards;
    (0..shards).map(|s| base + usize::from(s < n % shards)).collect()
}

/// Generate all impressions in memory. Shards draw from independent streams
/// derived from (seed, shard index) and are concatenated in shard order, so
/// the output is a deterministic function of the seed and the shard count.
pub fn generate_records(cfg: &GeneratorConfig, shards: usize) -> Result<(World, Vec<BehaviorRecord>)> {
    if shards == 0 {
        return Err(Esm2Error::InvalidConfig("shard count must be >= 1".into()));
    }
    let world = World::build(cfg)?;
    let mut records = Vec::with_capacity(cfg.num_impressions);
    for (shard, &count) in shard_sizes(cfg.num_impressions, shards).iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, streams::SHARD_BASE + shard as u64);
        for _ in 0..count {
            let r = world.sample_impression(&mut rng);
            debug_assert!(r.check_consistency().is_ok());
            records.push(r);
        }
    }
    Ok((world, records))
}

/// Label counts and derived empirical rates over a record slice.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EmpiricalRates {
    pub impressions: usize,
    pub clicks: usize,
    pub scarts: usize,
    pub wishes: usize,
    pub dactions: usize,
    pub buys: usize,
    pub click_rate: f64,
    pub scart_given_click: f64,
    pub wish_given_click: f64,
    pub daction_given_click: f64,
    pub buy_given_click: f64,
    pub buy_given_daction: f64,
    pub buy_given_oaction: f64,
}

impl EmpiricalRates {
    pub fn compute(records: &[BehaviorRecord]) -> EmpiricalRates {
        let mut r = EmpiricalRates {
            impressions: records.len(),
            ..Default::default()
        };
        let mut buys_daction = 0usize;
        for rec in records {
            r.clicks += rec.click as usize;
            r.scarts += rec.scart as usize;
            r.wishes += rec.wish as usize;
            r.dactions += rec.daction as usize;
            r.buys += rec.buy as usize;
            buys_daction += (rec.buy && rec.daction) as usize;
        }
        let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        r.click_rate = frac(r.clicks, r.impressions);
        r.scart_given_click = frac(r.scarts, r.clicks);
        r.wish_given_click = frac(r.wishes, r.clicks);
        r.daction_given_click = frac(r.dactions, r.clicks);
        r.buy_given_click = frac(r.buys, r.clicks);
        r.buy_given_daction = frac(buys_daction, r.dactions);
        r.buy_given_oaction = frac(r.buys - buys_daction, r.clicks - r.dactions);
        r
    }
}

/// Sidecar metadata written next to the split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub schema: SchemaMeta,
    pub splits: SplitMeta,
    pub generator: GeneratorConfig,
    pub rates: EmpiricalRates,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SchemaMeta {
    pub sparse_fields: Vec<String>,
    pub vocab_sizes: Vec<usize>,
    pub dense_dim: usize,
}

impl SchemaMeta {
    pub fn current() -> SchemaMeta {
        SchemaMeta {
            sparse_fields: SPARSE_FIELD_NAMES.iter().map(|s| s.to_string()).collect(),
            vocab_sizes: FIELD_VOCAB_SIZES.to_vec(),
            dense_dim: DENSE_DIM,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMeta {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub const META_FILE: &str = "meta.toml";
pub const SPLIT_FILES: [&str; 3] = ["train.tsv", "val.tsv", "test.tsv"];

#[derive(Debug)]
pub struct GenerateReport {
    pub out_dir: PathBuf,
    pub split_counts: [usize; 3],
    pub rates: EmpiricalRates,
    pub targets: EdgeTargets,
    /// (file name, sha256 hex) per emitted file, split files first.
    pub checksums: Vec<(String, String)>,
}

fn header_line(schema: &SchemaMeta) -> String {
    let mut cols: Vec<String> = vec!["user_id".into(), "item_id".into()];
    cols.extend(schema.sparse_fields.iter().map(|f| format!("sparse_{f}")));
    cols.extend((0..schema.dense_dim).map(|j| format!("dense_{j}")));
    cols.extend(["c", "scart", "wish", "b"].map(String::from));
    cols.join("\t")
}

fn format_records(records: &[BehaviorRecord], schema: &SchemaMeta) -> String {
    let mut out = String::with_capacity(records.len() * 160);
    out.push_str(&header_line(schema));
    out.push('\n');
    for r in records {
        let _ = write!(out, "{}\t{}", r.user_id, r.item_id);
        for &(_, bucket) in &r.sparse_ids {
            let _ = write!(out, "\t{bucket}");
        }
        for &x in &r.dense {
            let _ = write!(out, "\t{x}");
        }
        let _ = write!(
            out,
            "\t{}\t{}\t{}\t{}",
            r.click as u8, r.scart as u8, r.wish as u8, r.buy as u8
        );
        out.push('\n');
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Generate, split and write a dataset: `train.tsv`, `val.tsv`, `test.tsv`
/// plus the `meta.toml` sidecar. Byte-identical for identical configs.
pub fn generate_dataset(cfg: &GeneratorConfig, out_dir: &Path, shards: usize) -> Result<GenerateReport> {
    let (world, records) = generate_records(cfg, shards)?;
    let counts = split_counts(records.len(), cfg.split_fractions);
    fs::create_dir_all(out_dir).map_err(|e| Esm2Error::io(out_dir, e))?;

    let schema = SchemaMeta::current();
    let mut checksums = Vec::new();
    let mut offset = 0usize;
    for (file, &count) in SPLIT_FILES.iter().zip(&counts) {
        let slice = &records[offset..offset + count];
        offset += count;
        let body = format_records(slice, &schema);
        let path = out_dir.join(file);
        fs::write(&path, body.as_bytes()).map_err(|e| Esm2Error::io(&path, e))?;
        checksums.push((file.to_string(), sha256_hex(body.as_bytes())));
    }

    let rates = EmpiricalRates::compute(&records);
    let meta = DatasetMeta {
        schema_version: 1,
        schema,
        splits: SplitMeta {
            train: counts[0],
            val: counts[1],
            test: counts[2],
        },
        generator: cfg.clone(),
        rates,
    };
    let meta_body = toml::to_string(&meta)
        .map_err(|e| Esm2Error::InvalidConfig(format!("meta serialization: {e}")))?;
    let meta_path = out_dir.join(META_FILE);
    fs::write(&meta_path, meta_body.as_bytes()).map_err(|e| Esm2Error::io(&meta_path, e))?;
    checksums.push((META_FILE.to_string(), sha256_hex(meta_body.as_bytes())));

    Ok(GenerateReport {
        out_dir: out_dir.to_path_buf(),
        split_counts: counts,
        rates,
        targets: cfg.edge_targets(),
        checksums,
    })
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let body = fs::read_to_string(&path).map_err(|e| Esm2Error::io(&path, e))?;
    toml::from_str(&body).map_err(|e| Esm2Error::Parse {
        path,
        line: 0,
        msg: format!("invalid metadata: {e}"),
    })
}

/// Load one split file, validating every record; the sidecar `meta.toml`
/// must sit in the same directory. Any malformed or inconsistent line aborts
/// with its 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let meta = load_meta(dir)?;
    let schema = &meta.schema;
    let file = fs::File::open(path).map_err(|e| Esm2Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let parse_err = |line: usize, msg: String| Esm2Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Esm2Error::io(path, e)),
        None => return Err(Esm2Error::EmptyDataset(format!("{} has no header", path.display()))),
    };
    let expected_header = header_line(schema);
    if header != expected_header {
        return Err(parse_err(1, format!(
            "header mismatch: got `{header}`, expected `{expected_header}`"
        )));
    }

    let n_sparse = schema.sparse_fields.len();
    let n_cols = 2 + n_sparse + schema.dense_dim + 4;
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Esm2Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n_cols {
            return Err(parse_err(line_no, format!(
                "expected {n_cols} columns, got {}",
                fields.len()
            )));
        }
        let mut col = fields.iter();
        let mut next_u64 = |name: &str| -> Result<u64> {
            let raw = col.next().expect("column count checked");
            raw.parse()
                .map_err(|e| parse_err(line_no, format!("{name} `{raw}`: {e}")))
        };
        let user_id = next_u64("user_id")?;
        let item_id = next_u64("item_id")?;
        let mut sparse_ids = Vec::with_capacity(n_sparse);
        for (f, vocab) in schema.vocab_sizes.iter().enumerate() {
            let bucket = next_u64(&format!("sparse field {f}"))? as usize;
            if bucket >= *vocab {
                return Err(parse_err(line_no, format!(
                    "sparse field {f} bucket {bucket} >= vocab size {vocab}"
                )));
            }
            sparse_ids.push((f, bucket));
        }
        let mut dense = Vec::with_capacity(schema.dense_dim);
        for (j, raw) in col.by_ref().take(schema.dense_dim).enumerate() {
            let x: f64 = raw
                .parse()
                .map_err(|e| parse_err(line_no, format!("dense_{j} `{raw}`: {e}")))?;
            if !x.is_finite() {
                return Err(parse_err(line_no, format!("dense_{j} is not finite")));
            }
            dense.push(x);
        }
        let mut next_label = |name: &str| -> Result<bool> {
            match *col.next().expect("column count checked") {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(line_no, format!("label {name} `{other}` not in {{0, 1}}"))),
            }
        };
        let click = next_label("c")?;
        let scart = next_label("scart")?;
        let wish = next_label("wish")?;
        let buy = next_label("b")?;

        let record = BehaviorRecord {
            user_id,
            item_id,
            sparse_ids,
            dense,
            click,
            scart,
            wish,
            daction: scart || wish,
            buy,
        };
        if let Err(msg) = record.check_consistency() {
            return Err(Esm2Error::LabelConsistency {
                path: path.to_path_buf(),
                line: line_no,
                msg,
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Esm2Error::EmptyDataset(format!(
            "{} contains a header but no records",
            path.display()
        )));
    }
    Ok(Dataset {
        records,
        field_vocab_sizes: schema.vocab_sizes.clone(),
        dense_dim: schema.dense_dim,
    })
}

#[cfg(test)]
pub mod test_support {
    use super::BehaviorRecord;

    /// Unlabeled record for encoder/network tests.
    pub fn record_with(
        user_id: u64,
        item_id: u64,
        sparse_ids: Vec<(usize, usize)>,
        dense: Vec<f64>,
    ) -> BehaviorRecord {
        BehaviorRecord {
            user_id,
            item_id,
            sparse_ids,
            dense,
            click: false,
            scart: false,
            wish: false,
            daction: false,
            buy: false,
        }
    }
}
