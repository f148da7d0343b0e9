//! Scaled dot-product attention with learned query/key/value projections.

use rand::Rng;

use crate::autodiff::{Axis, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `softmax(q kᵀ / √d_head) v`, split into `heads` column groups.
pub fn scaled_dot_product(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.shape(q).1;
    if g.shape(k).1 != d || g.shape(v).1 != d {
        return Err(Error::dim(
            "attention",
            format!("q/k/v widths {} {} {}", d, g.shape(k).1, g.shape(v).1),
        ));
    }
    if g.shape(k).0 != g.shape(v).0 {
        return Err(Error::dim("attention", "keys and values differ in length"));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax_rows(scores)?;
        outs.push(g.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, Axis::Cols)
    }
}

/// Query and key projections start this much smaller than the value
/// projection, so fresh attention blocks are close to uniform averaging.
pub const QK_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let qk = if frozen { QK_INIT_SCALE * std } else { std };
        Ok(Self {
            wq: store.add(format!("{prefix}.wq"), Tensor::randn(d, d, qk, rng), frozen)?,
            wk: store.add(format!("{prefix}.wk"), Tensor::randn(d, d, qk, rng), frozen)?,
            wv: store.add(
                format!("{prefix}.wv"),
                Tensor::randn(d, d, std, rng),
                frozen,
            )?,
        })
    }

    /// Rows of `queries` attend over rows of `context`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        context: Var,
        heads: usize,
    ) -> Result<Var> {
        let wq = g.param(store, self.wq)?;
        let wk = g.param(store, self.wk)?;
        let wv = g.param(store, self.wv)?;
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(context, wk)?;
        let v = g.matmul(context, wv)?;
        scaled_dot_product(g, q, k, v, heads)
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.wq, self.wk, self.wv]
    }
}
