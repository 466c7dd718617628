//! Retrieval and recognition metrics: AP@K, mAP@K, mP@K under the medium
//! and hard protocols, and GAP.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drops junk and keeps the first `k` remaining entries.
fn filtered_top_k<'a, T: Ord>(ranked: &'a [T], junk: &'a BTreeSet<T>, k: usize) -> impl Iterator<Item = &'a T> {
    ranked.iter().filter(move |r| !junk.contains(*r)).take(k)
}

/// AP over the junk-free top `k`, normalised by `min(|positives|, k)`.
/// `None` when there are no positives (the query is skipped).
pub fn average_precision_at_k<T: Ord>(
    ranked: &[T],
    positives: &BTreeSet<T>,
    junk: &BTreeSet<T>,
    k: usize,
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if positives.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, r) in filtered_top_k(ranked, junk, k).enumerate() {
        if positives.contains(r) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(Some(sum / positives.len().min(k) as f64))
}

/// Positives among the junk-free top `k`, divided by `k`.
pub fn precision_at_k<T: Ord>(ranked: &[T], positives: &BTreeSet<T>, junk: &BTreeSet<T>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let hits = filtered_top_k(ranked, junk, k).filter(|r| positives.contains(*r)).count();
    Ok(hits as f64 / k as f64)
}

/// Ground truth of one query. The flat positive/junk form is stored with
/// every positive in `easy`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryTruth {
    pub easy: BTreeSet<String>,
    pub hard: BTreeSet<String>,
    pub junk: BTreeSet<String>,
}

impl QueryTruth {
    pub fn flat(positive: BTreeSet<String>, junk: BTreeSet<String>) -> Self {
        QueryTruth {
            easy: positive,
            hard: BTreeSet::new(),
            junk,
        }
    }

    pub fn validate(&self, query: &str) -> Result<()> {
        let overlap = self
            .easy
            .intersection(&self.hard)
            .chain(self.easy.intersection(&self.junk))
            .chain(self.hard.intersection(&self.junk))
            .next();
        match overlap {
            Some(id) => Err(Error::Invalid(format!(
                "query `{query}`: `{id}` appears in more than one of easy/hard/junk"
            ))),
            None => Ok(()),
        }
    }

    /// `(positives, junk)` under `protocol`.
    pub fn resolve(&self, protocol: Protocol) -> (BTreeSet<String>, BTreeSet<String>) {
        match protocol {
            Protocol::Medium => (self.easy.union(&self.hard).cloned().collect(), self.junk.clone()),
            Protocol::Hard => (self.hard.clone(), self.junk.union(&self.easy).cloned().collect()),
        }
    }
}

pub type GroundTruth = BTreeMap<String, QueryTruth>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Positives are easy and hard; junk stays junk.
    Medium,
    /// Positives are hard only; easy images become junk.
    Hard,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Medium => "medium",
            Protocol::Hard => "hard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    /// `None` when the query had no positives under the protocol.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub k: usize,
    pub map: f64,
    /// `(K, mP@K)` pairs.
    pub mp: Vec<(usize, f64)>,
    pub gap: Option<f64>,
    pub per_query: Vec<QueryResult>,
    pub skipped: Vec<String>,
}

/// mAP@`k` and mP@K over `rankings` (query id, ranked gallery ids).
/// Queries without positives are listed in `skipped` and left out of both
/// means.
pub fn evaluate(
    rankings: &[(String, Vec<String>)],
    gt: &GroundTruth,
    protocol: Protocol,
    k: usize,
    mp_ks: &[usize],
) -> Result<EvalReport> {
    let mut per_query = Vec::with_capacity(rankings.len());
    let mut skipped = Vec::new();
    let mut ap_sum = 0.0;
    let mut mp_sums = alloc::vec![0.0; mp_ks.len()];
    let mut counted = 0usize;
    let mut seen = BTreeSet::new();
    for (query, ranked) in rankings {
        if !seen.insert(query.as_str()) {
            return Err(Error::Duplicate(query.clone()));
        }
        let truth = gt
            .get(query)
            .ok_or_else(|| Error::Invalid(format!("no ground truth for query `{query}`")))?;
        truth.validate(query)?;
        let (pos, junk) = truth.resolve(protocol);
        let ap = average_precision_at_k(ranked, &pos, &junk, k)?;
        if let Some(ap) = ap {
            counted += 1;
            ap_sum += ap;
            for (s, &kk) in mp_sums.iter_mut().zip(mp_ks) {
                *s += precision_at_k(ranked, &pos, &junk, kk)?;
            }
        } else {
            skipped.push(query.clone());
        }
        per_query.push(QueryResult {
            query: query.clone(),
            ap,
        });
    }
    if counted == 0 {
        return Err(Error::Empty("evaluate: no query has positives"));
    }
    let n = counted as f64;
    Ok(EvalReport {
        protocol: String::from(protocol.name()),
        k,
        map: ap_sum / n,
        mp: mp_ks.iter().zip(mp_sums).map(|(&kk, s)| (kk, s / n)).collect(),
        gap: None,
        per_query,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query: String,
    pub label: String,
    pub confidence: f64,
}

/// Global average precision with at most one prediction per query.
/// `labels` holds the queries that have a ground-truth label; predictions
/// for other queries count as wrong. Equal confidences are ordered by
/// ascending query id.
pub fn gap(predictions: &[Prediction], labels: &BTreeMap<String, String>) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("gap: no labelled queries"));
    }
    let mut seen = BTreeSet::new();
    for p in predictions {
        if !seen.insert(p.query.as_str()) {
            return Err(Error::Duplicate(p.query.clone()));
        }
        if !p.confidence.is_finite() {
            return Err(Error::Invalid(format!("confidence for `{}` is not finite", p.query)));
        }
    }
    let mut order: Vec<&Prediction> = predictions.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.query.cmp(&b.query)));
    let mut correct = 0usize;
    let mut sum = 0.0;
    for (i, p) in order.iter().enumerate() {
        if labels.get(&p.query) == Some(&p.label) {
            correct += 1;
            sum += correct as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / labels.len() as f64)
}
