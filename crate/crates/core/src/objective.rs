//! Query-target matching, the joint objective, and inference scoring.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    /// Weight of the text-bridged image alignment term.
    pub alpha: f64,
    /// Weight of the complementary text reasoning term.
    pub beta: f64,
    /// Temperature shared by all three contrastive terms.
    pub tau: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            alpha: 0.45,
            beta: 0.1,
            tau: 0.1,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the diagonal under a row-wise softmax of
/// `similarities / tau`. Row `i` holds query `i` against every candidate.
pub fn in_batch_nll(g: &mut Graph, similarities: Var, tau: f64) -> Result<Var> {
    let (b, cols) = g.shape(similarities);
    if b != cols {
        return Err(Error::dim(
            "in_batch_nll",
            format!("{b}x{cols} is not square"),
        ));
    }
    let logits = g.scale(similarities, 1.0 / tau)?;
    let log_p = g.log_softmax_rows(logits)?;
    let eye = g.constant(Tensor::eye(b))?;
    let diag = g.mul(log_p, eye)?;
    let total = g.sum(diag)?;
    g.scale(total, -1.0 / b as f64)
}

/// Builds a `B×B` matrix from `B` single-row (`1×B`) similarity vectors.
pub(crate) fn stack_rows(g: &mut Graph, rows: &[Var]) -> Result<Var> {
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    g.concat(rows, Axis::Rows)
}

/// In-batch contrastive loss between L2-normalized query embeddings and
/// L2-normalized pooled target features (`1×d` each).
pub fn qtm_loss(g: &mut Graph, queries: &[Var], targets: &[Var], tau: f64) -> Result<Var> {
    if queries.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if queries.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} queries vs {} targets",
            queries.len(),
            targets.len()
        )));
    }
    let q = stack_rows(g, queries)?;
    let t = stack_rows(g, targets)?;
    if g.shape(q).1 != g.shape(t).1 {
        return Err(Error::dim("qtm_loss", "query and target widths differ"));
    }
    let tt = g.transpose(t)?;
    let sims = g.matmul(q, tt)?;
    in_batch_nll(g, sims, tau)
}

/// `L_QTM + α·L_TBIA + β·L_CTR`. Terms with zero weight or absent are not
/// added, so the result is `l_qtm` itself when both weights are zero.
pub fn total_loss(
    g: &mut Graph,
    l_qtm: Var,
    l_tbia: Option<Var>,
    l_ctr: Option<Var>,
    w: &ObjectiveWeights,
) -> Result<Var> {
    let mut total = l_qtm;
    for (term, weight) in [(l_tbia, w.alpha), (l_ctr, w.beta)] {
        if let Some(term) = term {
            if weight != 0.0 {
                let scaled = g.scale(term, weight)?;
                total = g.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}

/// Cosine score of one query against every gallery row. Inputs are expected
/// to be L2-normalized already, so this is a plain dot product per row.
pub fn score_query_against_gallery(query: &Tensor, gallery: &Tensor) -> Result<Vec<f64>> {
    if query.rows() != 1 {
        return Err(Error::dim(
            "score",
            format!("query has {} rows", query.rows()),
        ));
    }
    if gallery.is_empty() {
        return Err(Error::Input("empty gallery".into()));
    }
    if query.cols() != gallery.cols() {
        return Err(Error::dim(
            "score",
            format!(
                "query width {} vs gallery width {}",
                query.cols(),
                gallery.cols()
            ),
        ));
    }
    Ok((0..gallery.rows())
        .map(|r| {
            query
                .row(0)
                .iter()
                .zip(gallery.row(r))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(g: &mut Graph, data: &[&[f64]]) -> Vec<Var> {
        data.iter()
            .map(|r| g.constant(Tensor::row_vector(r.to_vec()).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn single_item_batch_is_zero() {
        let mut g = Graph::new();
        let q = rows(&mut g, &[&[0.6, 0.8]]);
        let t = rows(&mut g, &[&[1.0, 0.0]]);
        let l = qtm_loss(&mut g, &q, &t, 0.1).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn orthogonal_pairs_closed_form() {
        let mut g = Graph::new();
        let q = rows(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = rows(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = qtm_loss(&mut g, &q, &t, 0.1).unwrap();
        let expected = (-10f64).exp().ln_1p();
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        assert!((expected - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn empty_batch_is_input_error() {
        let mut g = Graph::new();
        assert!(matches!(
            qtm_loss(&mut g, &[], &[], 0.1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(1.0)).unwrap();
        let b = g.variable(Tensor::scalar(2.0)).unwrap();
        let c = g.variable(Tensor::scalar(3.0)).unwrap();
        let w = ObjectiveWeights::default();
        let t = total_loss(&mut g, a, Some(b), Some(c), &w).unwrap();
        assert!((g.value(t).item() - 2.2).abs() < 1e-12);

        let zero = ObjectiveWeights {
            alpha: 0.0,
            beta: 0.0,
            ..w
        };
        let t = total_loss(&mut g, a, Some(b), Some(c), &zero).unwrap();
        assert_eq!(t, a);
    }

    #[test]
    fn weight_validation() {
        assert!(ObjectiveWeights::default().validate().is_ok());
        let bad = ObjectiveWeights {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ObjectiveWeights {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gallery_scoring() {
        let gallery = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let q = Tensor::row_vector(vec![0.6, 0.8]).unwrap();
        let s = score_query_against_gallery(&q, &gallery).unwrap();
        assert!((s[2] - 1.0).abs() < 1e-15);
        let q = Tensor::row_vector(vec![1.0, 0.0]).unwrap();
        assert_eq!(score_query_against_gallery(&q, &gallery).unwrap()[1], 0.0);
        let empty_width = Tensor::row_vector(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(score_query_against_gallery(&empty_width, &gallery).is_err());
    }
}
