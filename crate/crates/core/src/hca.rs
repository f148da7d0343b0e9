//! Hinge-based cross attention and the text-bridged image alignment loss.
//!
//! The reference image attends to the text, the text attends to the target,
//! and the product of the two cosine association maps routes reference
//! patches to target patches. The resulting attentive target features are
//! matched against the reference features contrastively over the batch.

use rand::Rng;

use crate::autodiff::{Axis, Graph, Var};
use crate::error::{Error, Result};
use crate::objective::{in_batch_nll, stack_rows};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct HcaParams {
    pub w_r: ParamId,
    pub w_c: ParamId,
    /// Same id as `w_c` when the text projection is shared.
    pub w_c_prime: ParamId,
    pub w_t: ParamId,
    pub w_v: ParamId,
}

impl HcaParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        share_text_projection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let mut mk = |name: &str, rng: &mut R| {
            store.add(
                format!("{prefix}.{name}"),
                Tensor::randn(d, d, std, rng),
                false,
            )
        };
        let w_r = mk("w_r", rng)?;
        let w_c = mk("w_c", rng)?;
        let w_c_prime = if share_text_projection {
            w_c
        } else {
            mk("w_c_prime", rng)?
        };
        let w_t = mk("w_t", rng)?;
        let w_v = mk("w_v", rng)?;
        Ok(Self {
            w_r,
            w_c,
            w_c_prime,
            w_t,
            w_v,
        })
    }

    pub fn is_shared(&self) -> bool {
        self.w_c == self.w_c_prime
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_r, self.w_c, self.w_t, self.w_v];
        if !self.is_shared() {
            ids.push(self.w_c_prime);
        }
        ids
    }
}

/// Row-normalized projection `normalize(x · w)`.
fn project_normalized(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
    let w = g.param(store, w)?;
    let p = g.matmul(x, w)?;
    g.l2_normalize_rows(p)
}

fn cosine_map(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let kt = g.transpose(k)?;
    g.matmul(q, kt)
}

/// `N×L` cosine association of projected reference rows with projected text rows.
pub fn attend_ref_to_text(
    g: &mut Graph,
    store: &ParamStore,
    p: &HcaParams,
    f_r_bar: Var,
    f_c: Var,
) -> Result<Var> {
    let q_r = project_normalized(g, store, f_r_bar, p.w_r)?;
    let k_c = project_normalized(g, store, f_c, p.w_c)?;
    cosine_map(g, q_r, k_c)
}

/// `L×N` cosine association of projected text rows with projected target rows.
pub fn attend_text_to_target(
    g: &mut Graph,
    store: &ParamStore,
    p: &HcaParams,
    f_c: Var,
    f_t: Var,
) -> Result<Var> {
    let q_c = project_normalized(g, store, f_c, p.w_c_prime)?;
    let k_t = project_normalized(g, store, f_t, p.w_t)?;
    cosine_map(g, q_c, k_t)
}

/// `softmax(a_r2c · a_c2t / √d)` with the softmax over target positions.
pub fn hinge_attention(g: &mut Graph, a_r2c: Var, a_c2t: Var, d: usize) -> Result<Var> {
    if g.shape(a_r2c).1 != g.shape(a_c2t).0 {
        return Err(Error::dim(
            "hinge_attention",
            format!("{:?} times {:?}", g.shape(a_r2c), g.shape(a_c2t)),
        ));
    }
    let prod = g.matmul(a_r2c, a_c2t)?;
    let scaled = g.scale(prod, 1.0 / (d as f64).sqrt())?;
    g.softmax_rows(scaled)
}

/// `F_r2t = A_r2t · (F_t · W_v)`.
pub fn query_target(
    g: &mut Graph,
    store: &ParamStore,
    p: &HcaParams,
    a_r2t: Var,
    f_t: Var,
) -> Result<Var> {
    let w_v = g.param(store, p.w_v)?;
    let v_t = g.matmul(f_t, w_v)?;
    g.matmul(a_r2t, v_t)
}

/// Per-triplet inputs to [`tbia_loss`].
#[derive(Clone, Copy, Debug)]
pub struct TbiaInputs {
    /// Reference features (cross-encoded, or plain in the ablation).
    pub f_r_bar: Var,
    pub f_c: Var,
    pub f_t: Var,
}

/// Contrastive alignment of each reference with the text-bridged attentive
/// features of every target in the batch. The full chain is recomputed per
/// query-target pair; sequences are mean-pooled before the cosine.
pub fn tbia_loss(
    g: &mut Graph,
    store: &ParamStore,
    p: &HcaParams,
    batch: &[TbiaInputs],
    tau: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let d = g.shape(batch[0].f_t).1;

    // Pieces that depend on one side only are shared across pairs.
    let mut a_r2c = Vec::with_capacity(batch.len());
    let mut ref_pooled = Vec::with_capacity(batch.len());
    let mut q_c = Vec::with_capacity(batch.len());
    for item in batch {
        a_r2c.push(attend_ref_to_text(g, store, p, item.f_r_bar, item.f_c)?);
        let mean = g.mean_rows(item.f_r_bar)?;
        ref_pooled.push(g.l2_normalize_rows(mean)?);
        q_c.push(project_normalized(g, store, item.f_c, p.w_c_prime)?);
    }
    let w_v = g.param(store, p.w_v)?;
    let mut k_t = Vec::with_capacity(batch.len());
    let mut v_t = Vec::with_capacity(batch.len());
    for item in batch {
        k_t.push(project_normalized(g, store, item.f_t, p.w_t)?);
        v_t.push(g.matmul(item.f_t, w_v)?);
    }

    let mut sim_rows = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let mut sims = Vec::with_capacity(batch.len());
        for j in 0..batch.len() {
            let a_c2t = cosine_map(g, q_c[i], k_t[j])?;
            let a_r2t = hinge_attention(g, a_r2c[i], a_c2t, d)?;
            // mean_rows(A · V) == mean_rows(A) · V
            let weights = g.mean_rows(a_r2t)?;
            let pooled = g.matmul(weights, v_t[j])?;
            let pooled = g.l2_normalize_rows(pooled)?;
            let pt = g.transpose(pooled)?;
            sims.push(g.matmul(ref_pooled[i], pt)?);
        }
        let row = if sims.len() == 1 {
            sims[0]
        } else {
            g.concat(&sims, Axis::Cols)?
        };
        sim_rows.push(row);
    }
    let sims = stack_rows(g, &sim_rows)?;
    in_batch_nll(g, sims, tau)
}
