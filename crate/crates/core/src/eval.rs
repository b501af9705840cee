//! Ranking metrics and the split evaluation harness.
//!
//! For every user the last basket is the truth and the preceding baskets
//! are history. Metrics are averaged uniformly over evaluated users; users
//! with a single basket cannot be evaluated and are counted as skipped.

use std::collections::BTreeSet;

use serde::Serialize;
use std::collections::BTreeMap;

use crate::config::HrVariant;
use crate::corpus::{Basket, BasketDataset, UserSequence};
use crate::error::{Error, Result};

fn check_inputs(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty truth set".into()));
    }
    if k == 0 || k > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} outside 1..={}",
            ranked.len()
        )));
    }
    Ok(())
}

fn hits(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> usize {
    ranked[..k].iter().filter(|i| truth.contains(i)).count()
}

/// Harmonic mean of precision (hits/k) and recall (hits/|truth|).
pub fn f1_at_k(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> Result<f64> {
    check_inputs(ranked, truth, k)?;
    let h = hits(ranked, truth, k) as f64;
    let p = h / k as f64;
    let r = h / truth.len() as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

/// Recall-style hit rate: fraction of truth items retrieved in the top k.
/// The `AnyHit` variant scores 1 when at least one truth item appears.
pub fn hr_at_k(
    ranked: &[usize],
    truth: &BTreeSet<usize>,
    k: usize,
    variant: HrVariant,
) -> Result<f64> {
    check_inputs(ranked, truth, k)?;
    let h = hits(ranked, truth, k);
    Ok(match variant {
        HrVariant::Recall => h as f64 / truth.len() as f64,
        HrVariant::AnyHit => {
            if h > 0 {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Binary-relevance NDCG with the ideal DCG truncated at `min(k, |truth|)`
/// so a perfect ranking scores exactly 1.
pub fn ndcg_at_k(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> Result<f64> {
    check_inputs(ranked, truth, k)?;
    let mut dcg = 0.0;
    for (j, item) in ranked[..k].iter().enumerate() {
        if truth.contains(item) {
            dcg += 1.0 / ((j + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..k.min(truth.len()))
        .map(|j| 1.0 / ((j + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

/// Metric triple at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub f1: f64,
    pub hr: f64,
    pub ndcg: f64,
}

/// Evaluation output: per-k metrics plus bookkeeping and the config echo.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_k: BTreeMap<usize, MetricRow>,
    pub n_users: usize,
    pub n_skipped: usize,
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&MetricRow> {
        self.per_k.get(&k)
    }
}

/// Evaluate a split with a caller-supplied ranker. The ranker receives the
/// user, their history and the cutoff, and returns the ranked top-k items.
pub fn evaluate_rankings<F>(
    split: &BasketDataset,
    ks: &[usize],
    variant: HrVariant,
    cold_only: bool,
    config_echo: &str,
    mut rank_for: F,
) -> Result<MetricsReport>
where
    F: FnMut(&UserSequence, &[Basket], usize) -> Result<Vec<usize>>,
{
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no cutoffs requested".into()));
    }
    let mut sums: BTreeMap<usize, (f64, f64, f64)> =
        ks.iter().map(|&k| (k, (0.0, 0.0, 0.0))).collect();
    let mut n_users = 0usize;
    let mut n_skipped = 0usize;

    for seq in &split.sequences {
        if seq.baskets.len() < 2 {
            n_skipped += 1;
            continue;
        }
        let history = &seq.baskets[..seq.baskets.len() - 1];
        let truth: BTreeSet<usize> = seq.baskets.last().unwrap().items.iter().copied().collect();
        if cold_only {
            let seen: BTreeSet<usize> = history
                .iter()
                .flat_map(|b| b.items.iter().copied())
                .collect();
            if truth.iter().any(|i| seen.contains(i)) {
                continue;
            }
        }
        n_users += 1;
        for &k in ks {
            let ranked = rank_for(seq, history, k)?;
            let entry = sums.get_mut(&k).unwrap();
            entry.0 += f1_at_k(&ranked, &truth, k)?;
            entry.1 += hr_at_k(&ranked, &truth, k, variant)?;
            entry.2 += ndcg_at_k(&ranked, &truth, k)?;
        }
    }

    let denom = n_users.max(1) as f64;
    let per_k = sums
        .into_iter()
        .map(|(k, (f1, hr, ndcg))| {
            (
                k,
                MetricRow {
                    f1: f1 / denom,
                    hr: hr / denom,
                    ndcg: ndcg / denom,
                },
            )
        })
        .collect();

    let config = config_echo
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();

    Ok(MetricsReport {
        per_k,
        n_users,
        n_skipped,
        config,
    })
}
