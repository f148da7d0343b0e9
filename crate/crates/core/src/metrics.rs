//! Ranking and retrieval metrics.
//!
//! Gallery items are ordered by descending score; equal scores fall back to
//! ascending gallery id so every ranking is deterministic.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingResult {
    pub query_id: String,
    pub target_id: String,
    pub ordered_ids: Vec<String>,
    /// 1-based position of the target in `ordered_ids`.
    pub rank_of_target: usize,
}

/// Orders `gallery_ids` by `scores` and locates `target_id`.
pub fn rank_gallery(
    query_id: &str,
    target_id: &str,
    gallery_ids: &[String],
    scores: &[f64],
) -> Result<RankingResult> {
    if gallery_ids.len() != scores.len() {
        return Err(Error::Input(format!(
            "{} gallery ids vs {} scores",
            gallery_ids.len(),
            scores.len()
        )));
    }
    if gallery_ids.is_empty() {
        return Err(Error::Input("empty gallery".into()));
    }
    let mut order: Vec<usize> = (0..gallery_ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| gallery_ids[a].cmp(&gallery_ids[b]))
    });
    let ordered_ids: Vec<String> = order.iter().map(|&i| gallery_ids[i].clone()).collect();
    let rank_of_target = ordered_ids
        .iter()
        .position(|id| id == target_id)
        .ok_or_else(|| Error::Data(format!("target {target_id} of {query_id} not in gallery")))?
        + 1;
    Ok(RankingResult {
        query_id: query_id.to_string(),
        target_id: target_id.to_string(),
        ordered_ids,
        rank_of_target,
    })
}

/// The same ranking with every id outside `subset` removed.
pub fn restrict_to_subset(result: &RankingResult, subset: &[String]) -> Result<RankingResult> {
    let keep: HashSet<&str> = subset.iter().map(String::as_str).collect();
    if !keep.contains(result.target_id.as_str()) {
        return Err(Error::Data(format!(
            "subset of {} does not contain its target {}",
            result.query_id, result.target_id
        )));
    }
    let ordered_ids: Vec<String> = result
        .ordered_ids
        .iter()
        .filter(|id| keep.contains(id.as_str()))
        .cloned()
        .collect();
    let rank_of_target = ordered_ids
        .iter()
        .position(|id| *id == result.target_id)
        .expect("target kept")
        + 1;
    Ok(RankingResult {
        ordered_ids,
        rank_of_target,
        ..result.clone()
    })
}

/// Fraction of queries whose target is ranked within the top `k`.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Input("no ranking results".into()));
    }
    let hits = results.iter().filter(|r| r.rank_of_target <= k).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Recall@k after re-ranking each query among its own candidate subset.
pub fn recall_subset_at_k(
    results: &[RankingResult],
    subsets: &[Vec<String>],
    k: usize,
) -> Result<f64> {
    if results.len() != subsets.len() {
        return Err(Error::Input(format!(
            "{} results vs {} subsets",
            results.len(),
            subsets.len()
        )));
    }
    let restricted = results
        .iter()
        .zip(subsets)
        .map(|(r, s)| restrict_to_subset(r, s))
        .collect::<Result<Vec<_>>>()?;
    recall_at_k(&restricted, k)
}

/// `(R@10 + R@50) / 2`.
pub fn challenge_metric(r10: f64, r50: f64) -> f64 {
    (r10 + r50) / 2.0
}

/// `(R@5 + R_subset@1) / 2`.
pub fn avg_metric(r5: f64, rsub1: f64) -> f64 {
    (r5 + rsub1) / 2.0
}

/// Named metric values, stored as fractions.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub queries: usize,
    pub gallery: usize,
}

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];

impl MetricReport {
    pub fn from_rankings(
        results: &[RankingResult],
        subsets: &[Vec<String>],
        gallery: usize,
    ) -> Result<Self> {
        let mut values = BTreeMap::new();
        for k in RECALL_KS {
            values.insert(format!("recall@{k}"), recall_at_k(results, k)?);
        }
        for k in SUBSET_KS {
            values.insert(
                format!("recall_subset@{k}"),
                recall_subset_at_k(results, subsets, k)?,
            );
        }
        let avg = avg_metric(values["recall@5"], values["recall_subset@1"]);
        values.insert("avg(recall@5,recall_subset@1)".into(), avg);
        Ok(Self {
            values,
            queries: results.len(),
            gallery,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    /// JSON document mapping metric name to percentage.
    pub fn to_json(&self) -> String {
        let pct: BTreeMap<&str, f64> = self
            .values
            .iter()
            .map(|(k, v)| (k.as_str(), round_pct(*v)))
            .collect();
        let doc = serde_json::json!({
            "metrics": pct,
            "queries": self.queries,
            "gallery": self.gallery,
        });
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }

    /// Aligned text table in percentages.
    pub fn render(&self) -> String {
        let width = self.values.keys().map(String::len).max().unwrap_or(0);
        let mut out = format!(
            "{:<width$}  {:>7}\n",
            format!(
                "metric ({} queries, gallery {})",
                self.queries, self.gallery
            ),
            "%",
            width = width
        );
        for (k, v) in &self.values {
            out.push_str(&format!("{k:<width$}  {:>7.2}\n", v * 100.0));
        }
        out
    }
}

fn round_pct(v: f64) -> f64 {
    (v * 100.0 * 1e4).round() / 1e4
}
