//! Ranking metrics: pairwise AUC, user-grouped GAUC, precision/recall/F1 at
//! top-k% cutoffs, and the purchase-frequency grouped AUC breakdown.
//!
//! AUC uses the strict pairwise definition — the fraction of
//! (positive, negative) pairs ranked with the positive strictly higher.
//! Ties earn nothing by default; a half-credit flag exists for cross-checking
//! against tooling that uses the trapezoidal convention. The implementation
//! sorts once and counts pairs with integer arithmetic, so it equals the
//! quadratic definition exactly, not just approximately.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::datagen::BehaviorRecord;
use crate::error::{Esm2Error, Result};

/// Scores with binary labels and optional per-record group keys.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub group_keys: Option<Vec<u64>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, group_keys: Option<Vec<u64>>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Esm2Error::ShapeMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(keys) = &group_keys {
            if keys.len() != scores.len() {
                return Err(Esm2Error::ShapeMismatch(format!(
                    "{} group keys vs {} scores",
                    keys.len(),
                    scores.len()
                )));
            }
        }
        if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Esm2Error::ShapeMismatch(format!(
                "score {bad} is not finite"
            )));
        }
        Ok(ScoredSet {
            scores,
            labels,
            group_keys,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieHandling {
    /// Tied pairs contribute 0 — the strict indicator.
    Strict,
    /// Tied pairs contribute 0.5 — the conventional rank/trapezoid value.
    HalfCredit,
}

fn auc_over(indices: impl Iterator<Item = usize>, set: &ScoredSet, ties: TieHandling) -> Result<f64> {
    let mut items: Vec<(f64, bool)> = indices.map(|i| (set.scores[i], set.labels[i])).collect();
    let positives = items.iter().filter(|(_, l)| *l).count() as u64;
    let negatives = items.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Esm2Error::UndefinedAuc(format!(
            "{positives} positives and {negatives} negatives"
        )));
    }
    items.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));

    // Walk tie groups in ascending score order, counting, per positive, the
    // negatives strictly below it (and the tied ones for half credit).
    let mut won_x2: u64 = 0; // doubled so half credit stays integral
    let mut negs_below: u64 = 0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u64, 0u64);
        while j < items.len() && items[j].0 == items[i].0 {
            if items[j].1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        won_x2 += 2 * pos_here * negs_below;
        if ties == TieHandling::HalfCredit {
            won_x2 += pos_here * neg_here;
        }
        negs_below += neg_here;
        i = j;
    }
    Ok(won_x2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Pairwise AUC over the whole set. Errors when the set is single-class.
pub fn auc(scored: &ScoredSet, ties: TieHandling) -> Result<f64> {
    auc_over(0..scored.len(), scored, ties)
}

#[derive(Debug, Clone, Copy)]
pub struct GaucOutcome {
    pub value: f64,
    /// Groups with both classes present; each contributes weight 1.
    pub retained_groups: usize,
    /// Single-class groups, skipped because their AUC is undefined.
    pub skipped_groups: usize,
}

/// Group by key, average per-group AUC with unit weights. Single-class
/// groups are skipped; errors if nothing is retainable.
pub fn gauc(scored: &ScoredSet, ties: TieHandling) -> Result<GaucOutcome> {
    let keys = scored.group_keys.as_ref().ok_or_else(|| {
        Esm2Error::ShapeMismatch("gauc needs group keys".into())
    })?;
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut total = 0.0;
    let mut retained = 0usize;
    let mut skipped = 0usize;
    for indices in groups.values() {
        match auc_over(indices.iter().copied(), scored, ties) {
            Ok(a) => {
                total += a;
                retained += 1;
            }
            Err(Esm2Error::UndefinedAuc(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if retained == 0 {
        return Err(Esm2Error::NoRetainableGroup);
    }
    Ok(GaucOutcome {
        value: total / retained as f64,
        retained_groups: retained,
        skipped_groups: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKMetrics {
    pub k_percent: f64,
    pub cutoff: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Mark the top ceil(k% * n) scores as predicted positive (stable order
/// breaks ties) and count precision, recall and F1 against the labels.
pub fn f1_at_topk(scored: &ScoredSet, k_percent: f64) -> Result<TopKMetrics> {
    if scored.is_empty() {
        return Err(Esm2Error::EmptyDataset("f1_at_topk on empty set".into()));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Esm2Error::InvalidConfig(format!(
            "k_percent {k_percent} outside (0, 100]"
        )));
    }
    let n = scored.len();
    let cutoff = ((k_percent / 100.0) * n as f64).ceil() as usize;
    let cutoff = cutoff.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal scores keep their original record order.
    order.sort_by(|&a, &b| scored.scores[b].partial_cmp(&scored.scores[a]).expect("finite"));
    let total_pos = scored.labels.iter().filter(|&&l| l).count();
    let tp = order[..cutoff].iter().filter(|&&i| scored.labels[i]).count();
    let fp = cutoff - tp;
    let fn_ = total_pos - tp;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(TopKMetrics {
        k_percent,
        cutoff,
        precision,
        recall,
        f1,
    })
}

/// Purchase-frequency bins; upper edges inclusive, so the open-ended bin
/// starts at 51.
pub const PURCHASE_BINS: [(&str, u64, u64); 4] = [
    ("[0,10]", 0, 10),
    ("[11,20]", 11, 20),
    ("[21,50]", 21, 50),
    ("[50,+)", 51, u64::MAX),
];

pub fn purchase_bin(count: u64) -> usize {
    PURCHASE_BINS
        .iter()
        .position(|&(_, lo, hi)| count >= lo && count <= hi)
        .expect("bins cover all counts")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurchaseBinRow {
    pub bin: &'static str,
    pub users: usize,
    pub records: usize,
    /// None when every record in the bin shares one class.
    pub auc: Option<f64>,
}

/// Per-user purchase counts over a record slice.
pub fn purchase_counts(records: &[BehaviorRecord]) -> BTreeMap<u64, u64> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.user_id).or_insert(0) += r.buy as u64;
    }
    counts
}

/// Partition users by purchase count and report the AUC inside each
/// populated bin. Empty bins are absent from the output.
pub fn grouped_auc_by_purchase_count(
    scored: &ScoredSet,
    counts: &BTreeMap<u64, u64>,
    ties: TieHandling,
) -> Result<Vec<PurchaseBinRow>> {
    let keys = scored.group_keys.as_ref().ok_or_else(|| {
        Esm2Error::ShapeMismatch("grouped AUC needs user keys".into())
    })?;
    let mut bin_indices: [Vec<usize>; 4] = Default::default();
    let mut bin_users: [std::collections::BTreeSet<u64>; 4] = Default::default();
    for (i, &user) in keys.iter().enumerate() {
        let count = counts.get(&user).copied().unwrap_or(0);
        let b = purchase_bin(count);
        bin_indices[b].push(i);
        bin_users[b].insert(user);
    }
    let mut rows = Vec::new();
    for (b, (label, _, _)) in PURCHASE_BINS.iter().enumerate() {
        if bin_indices[b].is_empty() {
            continue;
        }
        let auc = match auc_over(bin_indices[b].iter().copied(), scored, ties) {
            Ok(a) => Some(a),
            Err(Esm2Error::UndefinedAuc(_)) => None,
            Err(e) => return Err(e),
        };
        rows.push(PurchaseBinRow {
            bin: label,
            users: bin_users[b].len(),
            records: bin_indices[b].len(),
            auc,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Report assembly and rendering.

#[derive(Debug, Clone)]
pub struct TaskMetrics {
    pub task: String,
    /// Note on which sample population the task is scored over.
    pub population: String,
    pub records: usize,
    pub auc: f64,
    pub gauc: Option<GaucOutcome>,
    pub f1_table: Vec<TopKMetrics>,
    pub grouped_auc: Option<Vec<PurchaseBinRow>>,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub model_label: String,
    pub notes: Vec<String>,
    pub tasks: Vec<TaskMetrics>,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsReport {
    /// Machine-readable form: `model,task,section,metric,arg,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,task,section,metric,arg,value\n");
        let model = csv_field(&self.model_label);
        for t in &self.tasks {
            let task = csv_field(&t.task);
            let mut push = |section: &str, metric: &str, arg: &str, value: f64| {
                let _ = writeln!(
                    out,
                    "{model},{task},{section},{metric},{},{value}",
                    csv_field(arg)
                );
            };
            push("summary", "auc", "", t.auc);
            if let Some(g) = &t.gauc {
                push("summary", "gauc", "", g.value);
                push("summary", "gauc_groups", "", g.retained_groups as f64);
            }
            for row in &t.f1_table {
                let arg = format!("top{}%", row.k_percent);
                push("topk", "precision", &arg, row.precision);
                push("topk", "recall", &arg, row.recall);
                push("topk", "f1", &arg, row.f1);
            }
            if let Some(bins) = &t.grouped_auc {
                for b in bins {
                    if let Some(a) = b.auc {
                        push("purchase_bins", "auc", b.bin, a);
                    }
                    push("purchase_bins", "users", b.bin, b.users as f64);
                }
            }
        }
        out
    }

    /// Aligned text tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model: {}", self.model_label);
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out.push('\n');

        let mut summary = vec![vec![
            "task".to_string(),
            "population".to_string(),
            "records".to_string(),
            "AUC".to_string(),
            "GAUC".to_string(),
        ]];
        for t in &self.tasks {
            summary.push(vec![
                t.task.clone(),
                t.population.clone(),
                t.records.to_string(),
                format!("{:.4}", t.auc),
                t.gauc
                    .as_ref()
                    .map(|g| format!("{:.4}", g.value))
                    .unwrap_or_else(|| "-".into()),
            ]);
        }
        out.push_str(&render_table(&summary));
        out.push('\n');

        for t in &self.tasks {
            if t.f1_table.is_empty() {
                continue;
            }
            let mut rows = vec![vec![
                format!("{}@top-k%", t.task),
                "precision".to_string(),
                "recall".to_string(),
                "F1".to_string(),
            ]];
            for r in &t.f1_table {
                rows.push(vec![
                    format!("top{}%", r.k_percent),
                    format!("{:.4}", r.precision),
                    format!("{:.4}", r.recall),
                    format!("{:.4}", r.f1),
                ]);
            }
            out.push_str(&render_table(&rows));
            out.push('\n');
        }

        for t in &self.tasks {
            if let Some(bins) = &t.grouped_auc {
                let mut rows = vec![vec![
                    format!("{} by purchases", t.task),
                    "users".to_string(),
                    "records".to_string(),
                    "AUC".to_string(),
                ]];
                for b in bins {
                    rows.push(vec![
                        b.bin.to_string(),
                        b.users.to_string(),
                        b.records.to_string(),
                        b.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                    ]);
                }
                out.push_str(&render_table(&rows));
                out.push('\n');
            }
        }
        out
    }
}

/// Fixed-width table: first column left-aligned, the rest right-aligned.
pub fn render_table(rows: &[Vec<String>]) -> String {
    if rows.is_empty() {
        return String::new();
    }
    let cols = rows[0].len();
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{:<width$}", cell, width = widths[0]);
            } else {
                let _ = write!(out, "  {:>width$}", cell, width = widths[c]);
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::seeding::stream_rng;

    fn set(scores: Vec<f64>, labels: Vec<bool>) -> ScoredSet {
        ScoredSet::new(scores, labels, None).unwrap()
    }

    /// Quadratic reference: count strictly-won pairs directly.
    fn brute_force_auc(scores: &[f64], labels: &[bool], ties: TieHandling) -> f64 {
        let mut won_x2 = 0u64;
        let mut pairs = 0u64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    won_x2 += 2;
                } else if scores[i] == scores[j] && ties == TieHandling::HalfCredit {
                    won_x2 += 1;
                }
            }
        }
        won_x2 as f64 / (2.0 * pairs as f64)
    }

    #[test]
    fn perfect_ranking() {
        let s = set(vec![0.9, 0.1], vec![true, false]);
        assert_eq!(auc(&s, TieHandling::Strict).unwrap(), 1.0);
    }

    #[test]
    fn tie_strict_vs_half_credit() {
        let s = set(vec![0.5, 0.5], vec![true, false]);
        assert_eq!(auc(&s, TieHandling::Strict).unwrap(), 0.0);
        assert_eq!(auc(&s, TieHandling::HalfCredit).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_sets_error() {
        let s = set(vec![0.1, 0.2], vec![true, true]);
        assert!(matches!(
            auc(&s, TieHandling::Strict),
            Err(Esm2Error::UndefinedAuc(_))
        ));
    }

    #[test]
    fn matches_brute_force_exactly() {
        let mut rng = stream_rng(17, 500);
        for trial in 0..40 {
            let n = 2 + (trial * 13) % 499;
            // Coarse score grid forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
            labels[0] = true;
            if n > 1 {
                labels[1] = false;
            }
            let s = set(scores.clone(), labels.clone());
            for ties in [TieHandling::Strict, TieHandling::HalfCredit] {
                let fast = auc(&s, ties).unwrap();
                let slow = brute_force_auc(&scores, &labels, ties);
                assert_eq!(fast, slow, "trial {trial}");
            }
        }
    }

    #[test]
    fn random_scores_near_half() {
        let mut rng = stream_rng(3, 501);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
        let a = auc(&set(scores, labels), TieHandling::Strict).unwrap();
        assert!((0.47..=0.53).contains(&a), "auc {a}");
    }

    #[test]
    fn gauc_single_group_reduces_to_auc() {
        let scored = ScoredSet::new(
            vec![0.9, 0.3, 0.5, 0.1],
            vec![true, false, true, false],
            Some(vec![7, 7, 7, 7]),
        )
        .unwrap();
        let g = gauc(&scored, TieHandling::Strict).unwrap();
        let a = auc(&scored, TieHandling::Strict).unwrap();
        assert_eq!(g.value, a);
        assert_eq!(g.retained_groups, 1);
    }

    #[test]
    fn gauc_averages_unit_weights() {
        // User 1: perfect ranking (AUC 1.0). User 2: one win, one tie -> 0.5.
        let scored = ScoredSet::new(
            vec![0.9, 0.1, 0.6, 0.6, 0.7, 0.2],
            vec![true, false, true, false, true, false],
            Some(vec![1, 1, 2, 2, 2, 2]),
        )
        .unwrap();
        let g = gauc(&scored, TieHandling::HalfCredit).unwrap();
        assert!((g.value - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gauc_skips_single_class_users() {
        let scored = ScoredSet::new(
            vec![0.9, 0.1, 0.8, 0.7],
            vec![true, false, true, true],
            Some(vec![1, 1, 2, 2]),
        )
        .unwrap();
        let g = gauc(&scored, TieHandling::Strict).unwrap();
        assert_eq!(g.retained_groups, 1);
        assert_eq!(g.skipped_groups, 1);
        assert_eq!(g.value, 1.0);
    }

    #[test]
    fn gauc_errors_without_retainable_group() {
        let scored = ScoredSet::new(
            vec![0.9, 0.1],
            vec![true, true],
            Some(vec![1, 1]),
        )
        .unwrap();
        assert!(matches!(
            gauc(&scored, TieHandling::Strict),
            Err(Esm2Error::NoRetainableGroup)
        ));
    }

    #[test]
    fn gauc_matches_per_group_oracle() {
        let mut rng = stream_rng(23, 502);
        let n = 600;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
        let keys: Vec<u64> = (0..n).map(|_| rng.random_range(0..20)).collect();
        let scored = ScoredSet::new(scores.clone(), labels.clone(), Some(keys.clone())).unwrap();
        let fast = gauc(&scored, TieHandling::Strict).unwrap();

        // Naive oracle: explicit per-user slices and the quadratic AUC.
        let mut total = 0.0;
        let mut retained = 0usize;
        for user in 0..20u64 {
            let idx: Vec<usize> = (0..n).filter(|&i| keys[i] == user).collect();
            let pos = idx.iter().filter(|&&i| labels[i]).count();
            if pos == 0 || pos == idx.len() || idx.is_empty() {
                continue;
            }
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            total += brute_force_auc(&s, &l, TieHandling::Strict);
            retained += 1;
        }
        assert!((fast.value - total / retained as f64).abs() <= 1e-12);
        assert_eq!(fast.retained_groups, retained);
    }

    #[test]
    fn topk_perfect_when_cutoff_covers_exactly_the_positives() {
        let s = set(
            vec![0.9, 0.8, 0.3, 0.2, 0.1],
            vec![true, true, false, false, false],
        );
        let m = f1_at_topk(&s, 40.0).unwrap();
        assert_eq!(m.cutoff, 2);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn topk_worked_counts() {
        // Top 4 of 6: two positives and two negatives in; two positives out.
        let s = set(
            vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
            vec![true, false, true, false, true, true],
        );
        let m = f1_at_topk(&s, 66.7).unwrap();
        assert_eq!(m.cutoff, 5);
        // cutoff 5: TP=3, FP=2, FN=1.
        assert!((m.precision - 0.6).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);

        let s2 = set(
            vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
            vec![true, false, true, false, true, true],
        );
        let m2 = f1_at_topk(&s2, 60.0).unwrap();
        assert_eq!(m2.cutoff, 4);
        // TP=2, FP=2, FN=2 -> P = R = F1 = 0.5.
        assert_eq!((m2.precision, m2.recall, m2.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn topk_ties_break_by_original_order() {
        let s = set(vec![0.5, 0.5, 0.5], vec![false, true, false]);
        let m = f1_at_topk(&s, 34.0).unwrap();
        assert_eq!(m.cutoff, 2);
        // Stable order keeps record 0 then 1 in the cutoff.
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn topk_matches_recount_oracle() {
        let mut rng = stream_rng(31, 503);
        let n = 1_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.05).collect();
        let s = ScoredSet::new(scores.clone(), labels.clone(), None).unwrap();
        let m = f1_at_topk(&s, 1.0).unwrap();

        // Recount oracle: independent sort and tally.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let cutoff = ((1.0 / 100.0) * n as f64).ceil() as usize;
        let tp = order[..cutoff].iter().filter(|&&i| labels[i]).count() as f64;
        let total_pos = labels.iter().filter(|&&l| l).count() as f64;
        let precision = tp / cutoff as f64;
        let recall = tp / total_pos;
        assert_eq!(m.precision, precision);
        assert_eq!(m.recall, recall);
        let expect_f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        assert_eq!(m.f1, expect_f1);
    }

    #[test]
    fn topk_rejects_bad_inputs() {
        let s = set(vec![0.5], vec![true]);
        assert!(f1_at_topk(&s, 0.0).is_err());
        assert!(f1_at_topk(&s, 101.0).is_err());
        let empty = ScoredSet::new(vec![], vec![], None).unwrap();
        assert!(f1_at_topk(&empty, 1.0).is_err());
    }

    #[test]
    fn purchase_bins_have_inclusive_upper_edges() {
        assert_eq!(PURCHASE_BINS[purchase_bin(0)].0, "[0,10]");
        assert_eq!(PURCHASE_BINS[purchase_bin(10)].0, "[0,10]");
        assert_eq!(PURCHASE_BINS[purchase_bin(11)].0, "[11,20]");
        assert_eq!(PURCHASE_BINS[purchase_bin(20)].0, "[11,20]");
        assert_eq!(PURCHASE_BINS[purchase_bin(50)].0, "[21,50]");
        assert_eq!(PURCHASE_BINS[purchase_bin(51)].0, "[50,+)");
    }

    #[test]
    fn zero_purchases_populate_single_bin() {
        let scored = ScoredSet::new(
            vec![0.9, 0.1, 0.6, 0.2],
            vec![true, false, false, true],
            Some(vec![1, 1, 2, 2]),
        )
        .unwrap();
        let counts = BTreeMap::from([(1, 0), (2, 0)]);
        let rows = grouped_auc_by_purchase_count(&scored, &counts, TieHandling::Strict).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].bin, "[0,10]");
        assert_eq!(rows[0].users, 2);
        assert_eq!(rows[0].records, 4);
    }

    #[test]
    fn bin_membership_matches_rebinning_oracle() {
        let mut rng = stream_rng(41, 504);
        let users: Vec<u64> = (0..1000).collect();
        let counts: BTreeMap<u64, u64> = users
            .iter()
            .map(|&u| (u, rng.random_range(0..80)))
            .collect();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut keys = Vec::new();
        for &u in &users {
            for _ in 0..3 {
                scores.push(rng.random());
                labels.push(rng.random::<f64>() < 0.3);
                keys.push(u);
            }
        }
        let scored = ScoredSet::new(scores, labels, Some(keys.clone())).unwrap();
        let rows = grouped_auc_by_purchase_count(&scored, &counts, TieHandling::Strict).unwrap();

        // Oracle: recount membership per bin.
        for row in &rows {
            let expect_users = users
                .iter()
                .filter(|&&u| PURCHASE_BINS[purchase_bin(counts[&u])].0 == row.bin)
                .count();
            assert_eq!(row.users, expect_users, "bin {}", row.bin);
            let expect_records = keys
                .iter()
                .filter(|&&u| PURCHASE_BINS[purchase_bin(counts[&u])].0 == row.bin)
                .count();
            assert_eq!(row.records, expect_records, "bin {}", row.bin);
        }
        let total: usize = rows.iter().map(|r| r.records).sum();
        assert_eq!(total, keys.len());
    }

    #[test]
    fn csv_quoting_handles_bin_labels() {
        let report = MetricsReport {
            model_label: "m".into(),
            notes: vec![],
            tasks: vec![TaskMetrics {
                task: "ctcvr".into(),
                population: "all impressions".into(),
                records: 4,
                auc: 0.75,
                gauc: None,
                f1_table: vec![],
                grouped_auc: Some(vec![PurchaseBinRow {
                    bin: "[0,10]",
                    users: 2,
                    records: 4,
                    auc: Some(0.5),
                }]),
            }],
        };
        let csv = report.to_csv();
        assert!(csv.contains("\"[0,10]\""));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// AUC is invariant under strictly monotone score transforms.
            #[test]
            fn monotone_transform_invariance(
                raw in proptest::collection::vec((0.0..1.0f64, any::<bool>()), 2..200)
            ) {
                let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
                let mut labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
                labels[0] = true;
                labels[1] = false;
                let base = auc(&ScoredSet::new(scores.clone(), labels.clone(), None).unwrap(),
                               TieHandling::Strict).unwrap();
                let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 2.0).collect();
                let squash: Vec<f64> = scores.iter().map(|s| s / (1.0 + s.abs())).collect();
                for transformed in [affine, squash] {
                    let t = auc(&ScoredSet::new(transformed, labels.clone(), None).unwrap(),
                                TieHandling::Strict).unwrap();
                    prop_assert_eq!(base, t);
                }
            }

            /// Complement symmetry when no ties exist: reversing scores flips
            /// every pair.
            #[test]
            fn complement_symmetry(seed in 0u64..5000) {
                let mut rng = crate::seeding::stream_rng(seed, 505);
                let n = 2 + (seed as usize % 64);
                let mut scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                scores.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                scores.dedup();
                let m = scores.len();
                if m < 2 { return Ok(()); }
                let mut labels: Vec<bool> = (0..m).map(|_| rng.random()).collect();
                labels[0] = true;
                labels[1] = false;
                let fwd = auc(&ScoredSet::new(scores.clone(), labels.clone(), None).unwrap(),
                              TieHandling::Strict).unwrap();
                let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
                let rev = auc(&ScoredSet::new(flipped, labels, None).unwrap(),
                              TieHandling::Strict).unwrap();
                prop_assert!((fwd + rev - 1.0).abs() <= 1e-12);
            }
        }
    }
}
