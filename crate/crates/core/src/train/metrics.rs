//! Classification and ranking metrics.
//!
//! Ranking metrics order each group's candidates by descending score; equal
//! scores keep their original order. Groups without a relevant candidate
//! are skipped and counted in `excluded`.

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// F1 of `positive` against every other class. Zero when there are no
/// true positives, including the case with no positive predictions and no
/// positive labels.
///
/// # Panics
///
/// If `preds` and `labels` differ in length.
pub fn f1_binary(preds: &[usize], labels: &[usize], positive: usize) -> f64 {
    assert_eq!(preds.len(), labels.len(), "f1_binary: length mismatch");
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    // 2PR / (P + R) with the fractions cleared
    (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
}

/// Candidates of one query with their scores and relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl ScoredGroup {
    /// Relevance flags in ranked order.
    pub fn ranked(&self) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&i, &j| self.scores[j].total_cmp(&self.scores[i]));
        order.into_iter().map(|i| self.relevant[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapMrr {
    pub map: f64,
    pub mrr: f64,
    pub groups: usize,
    pub excluded: usize,
}

fn check_groups(groups: &[ScoredGroup]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Data("no ranking groups".into()));
    }
    for g in groups {
        if g.scores.is_empty() || g.scores.len() != g.relevant.len() {
            return Err(Error::Data(format!(
                "group with {} scores and {} relevance flags",
                g.scores.len(),
                g.relevant.len()
            )));
        }
    }
    Ok(())
}

/// MAP and MRR are summed as exact fractions and rounded once, so e.g. an
/// AP of 5/6 is the `f64` nearest 5/6.
pub fn map_mrr(groups: &[ScoredGroup]) -> Result<MapMrr> {
    check_groups(groups)?;
    let (mut ap_sum, mut rr_sum, mut used) = (BigRational::zero(), BigRational::zero(), 0usize);
    for g in groups {
        let ranked = g.ranked();
        let mut hits = 0usize;
        let mut precision_sum = BigRational::zero();
        let mut first = None;
        for (r, &rel) in ranked.iter().enumerate() {
            if rel {
                hits += 1;
                precision_sum += ratio(hits, r + 1);
                first.get_or_insert(r + 1);
            }
        }
        let Some(first) = first else { continue };
        ap_sum += precision_sum / ratio(hits, 1);
        rr_sum += ratio(1, first);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Data("no group has a relevant candidate".into()));
    }
    let mean = |sum: BigRational| (sum / ratio(used, 1)).to_f64().unwrap_or(f64::NAN);
    Ok(MapMrr {
        map: mean(ap_sum),
        mrr: mean(rr_sum),
        groups: used,
        excluded: groups.len() - used,
    })
}

fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new(n.into(), d.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallAtK {
    /// `(k, recall)` in the order requested.
    pub values: Vec<(usize, f64)>,
    pub groups: usize,
    pub excluded: usize,
}

impl RecallAtK {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.values.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Fraction of groups with a relevant candidate among the top `k`. With
/// several relevant candidates the best-ranked one counts.
pub fn recall_at_k(groups: &[ScoredGroup], ks: &[usize]) -> Result<RecallAtK> {
    check_groups(groups)?;
    let firsts: Vec<usize> = groups
        .iter()
        .filter_map(|g| g.ranked().iter().position(|&r| r).map(|p| p + 1))
        .collect();
    if firsts.is_empty() {
        return Err(Error::Data("no group has a relevant candidate".into()));
    }
    let n = firsts.len() as f64;
    Ok(RecallAtK {
        values: ks
            .iter()
            .map(|&k| (k, firsts.iter().filter(|&&f| f <= k).count() as f64 / n))
            .collect(),
        groups: firsts.len(),
        excluded: groups.len() - firsts.len(),
    })
}
