//! Twin attention-based vision compositor and the complementary text
//! reasoning loss.
//!
//! Two attention branches fuse the reference and target images. In each
//! branch one image is the fixed query for every layer while the other image's
//! evolving state supplies keys and values. Layers within a branch share one
//! set of projections. The CLS rows of both branch outputs are averaged into
//! the composite visual vector, which is matched against the batch's texts.

use log::warn;
use rand::Rng;

use crate::attention::AttentionParams;
use crate::autodiff::{Axis, Graph, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::objective::{in_batch_nll, stack_rows};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Reference image anchors, target image evolves.
    TargetOriented,
    /// Target image anchors, reference image evolves.
    ReferenceOriented,
}

#[derive(Clone, Debug)]
pub struct TacParams {
    pub target_branch: AttentionParams,
    pub reference_branch: AttentionParams,
    pub layers: usize,
    pub heads: usize,
}

impl TacParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        layers: usize,
        heads: usize,
        share_across_branches: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("compositor needs at least one layer".into()));
        }
        let target_branch =
            AttentionParams::init(store, &format!("{prefix}.target"), d, false, rng)?;
        let reference_branch = if share_across_branches {
            target_branch.clone()
        } else {
            AttentionParams::init(store, &format!("{prefix}.reference"), d, false, rng)?
        };
        Ok(Self {
            target_branch,
            reference_branch,
            layers,
            heads,
        })
    }

    pub fn branch(&self, which: Branch) -> &AttentionParams {
        match which {
            Branch::TargetOriented => &self.target_branch,
            Branch::ReferenceOriented => &self.reference_branch,
        }
    }

    /// The same parameters with the two branch roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            target_branch: self.reference_branch.clone(),
            reference_branch: self.target_branch.clone(),
            ..self.clone()
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.target_branch.ids().to_vec();
        for id in self.reference_branch.ids() {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        ids
    }
}

/// `H_0 = other`, `H_m = Attention(anchor, H_{m-1}, H_{m-1})`; returns `H_M`,
/// which has the anchor's row count.
pub fn fuse_branch(
    g: &mut Graph,
    store: &ParamStore,
    p: &TacParams,
    anchor: Var,
    other: Var,
    branch: Branch,
) -> Result<Var> {
    if p.layers == 0 {
        return Err(Error::Config("compositor needs at least one layer".into()));
    }
    if g.shape(anchor).1 != g.shape(other).1 {
        return Err(Error::dim(
            "fuse_branch",
            format!("widths {} vs {}", g.shape(anchor).1, g.shape(other).1),
        ));
    }
    let attn = p.branch(branch);
    let mut state = other;
    for _ in 0..p.layers {
        state = attn.forward(g, store, anchor, state, p.heads)?;
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug)]
pub struct Composite {
    /// `1×d` composite visual vector, unit norm unless degenerate.
    pub f_v: Var,
    /// Set when the two branch CLS outputs cancel and no direction remains.
    pub degenerate: bool,
}

/// Runs both branches and averages their CLS rows into `F_v`.
pub fn compose(
    g: &mut Graph,
    store: &ParamStore,
    p: &TacParams,
    f_r_prime: Var,
    f_t: Var,
) -> Result<Composite> {
    let h_t = fuse_branch(g, store, p, f_r_prime, f_t, Branch::TargetOriented)?;
    let h_r = fuse_branch(g, store, p, f_t, f_r_prime, Branch::ReferenceOriented)?;
    let cls_t = g.slice_rows(h_t, 0, 1)?;
    let cls_r = g.slice_rows(h_r, 0, 1)?;
    let sum = g.add(cls_t, cls_r)?;
    let mean = g.scale(sum, 0.5)?;
    composite_from_mean(g, mean)
}

pub(crate) fn composite_from_mean(g: &mut Graph, mean: Var) -> Result<Composite> {
    let norm = g
        .value(mean)
        .data()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let degenerate = norm < NORM_EPS;
    if degenerate {
        warn!("composite visual vector is degenerate (norm {norm:e})");
    }
    Ok(Composite {
        f_v: g.l2_normalize_rows(mean)?,
        degenerate,
    })
}

/// Per-triplet inputs to [`ctr_loss`].
#[derive(Clone, Copy, Debug)]
pub struct CtrInputs {
    pub f_r_prime: Var,
    pub f_t: Var,
    pub f_c: Var,
}

/// Contrastive match of each triplet's composite visual vector against every
/// text in the batch (mean-pooled, L2-normalized).
pub fn ctr_loss(
    g: &mut Graph,
    store: &ParamStore,
    p: &TacParams,
    batch: &[CtrInputs],
    tau: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut visual = Vec::with_capacity(batch.len());
    let mut text = Vec::with_capacity(batch.len());
    for item in batch {
        visual.push(compose(g, store, p, item.f_r_prime, item.f_t)?.f_v);
        let mean = g.mean_rows(item.f_c)?;
        text.push(g.l2_normalize_rows(mean)?);
    }
    let v = stack_rows(g, &visual)?;
    let t = stack_rows(g, &text)?;
    let tt = g.transpose(t)?;
    let sims = g.matmul(v, tt)?;
    in_batch_nll(g, sims, tau)
}

/// Composite vectors for a batch, stacked `B×d`. Used by tests and tooling.
pub fn compose_batch(
    g: &mut Graph,
    store: &ParamStore,
    p: &TacParams,
    batch: &[CtrInputs],
) -> Result<Var> {
    let rows = batch
        .iter()
        .map(|item| compose(g, store, p, item.f_r_prime, item.f_t).map(|c| c.f_v))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&rows, Axis::Rows)
}
