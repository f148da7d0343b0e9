//! Retrieval evaluation over the validation split.

use crate::data::TripletRecord;
use crate::error::{Error, Result};
use crate::metrics::{rank_gallery, MetricReport, RankingResult};
use crate::model::CirModel;
use crate::objective::score_query_against_gallery;
use crate::tensor::Tensor;

/// Gallery of every validation target, identified by record id.
pub struct Gallery {
    pub ids: Vec<String>,
    pub embeddings: Tensor,
}

impl Gallery {
    pub fn build(model: &CirModel, records: &[TripletRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("empty gallery".into()));
        }
        let rows = records
            .iter()
            .map(|r| {
                model
                    .target_embedding(&r.target_tokens)
                    .map(|t| t.row(0).to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            embeddings: Tensor::from_rows(&rows)?,
        })
    }
}

pub struct Evaluation {
    pub report: MetricReport,
    pub rankings: Vec<RankingResult>,
}

/// Ranks the whole gallery for every query and computes the metric report.
/// Each record's target is its own gallery entry.
pub fn evaluate(model: &CirModel, records: &[TripletRecord]) -> Result<Evaluation> {
    let gallery = Gallery::build(model, records)?;
    let mut rankings = Vec::with_capacity(records.len());
    let mut subsets = Vec::with_capacity(records.len());
    for r in records {
        let q = model.query_embedding(r)?;
        let scores = score_query_against_gallery(&q, &gallery.embeddings)?;
        rankings.push(rank_gallery(&r.id, &r.id, &gallery.ids, &scores)?);
        subsets.push(
            r.subset_ids
                .clone()
                .ok_or_else(|| Error::Data(format!("{} has no candidate subset", r.id)))?,
        );
    }
    let report = MetricReport::from_rankings(&rankings, &subsets, gallery.ids.len())?;
    Ok(Evaluation { report, rankings })
}
