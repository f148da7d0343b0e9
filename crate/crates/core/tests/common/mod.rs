//! Plain nested-`Vec` linear algebra for oracle computations. Nothing here
//! goes through the autodiff graph.

#![allow(dead_code)]

use cir_core::tensor::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|c| {
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += row[k] * b[k][c];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|c| a.iter().map(|row| row[c]).collect())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n < 1e-12 {
        a.to_vec()
    } else {
        a.iter().map(|x| x / n).collect()
    }
}

pub fn normalize_rows(a: &Mat) -> Mat {
    a.iter().map(|r| normalize(r)).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter().map(|r| softmax(r)).collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len())
        .map(|c| a.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// `-(1/B) Σ_i log softmax(sims[i] / tau)[i]`.
pub fn info_nce(sims: &Mat, tau: f64) -> f64 {
    let b = sims.len();
    let mut total = 0.0;
    for (i, row) in sims.iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|s| s / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / b as f64
}

/// Single-head `softmax((x Wq)(ctx Wk)ᵀ / √d) (ctx Wv)`.
pub fn attention(x: &Mat, ctx: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let d = wq[0].len() as f64;
    let q = matmul(x, wq);
    let k = matmul(ctx, wk);
    let v = matmul(ctx, wv);
    let scores: Mat = matmul(&q, &transpose(&k))
        .into_iter()
        .map(|r| r.into_iter().map(|s| s / d.sqrt()).collect())
        .collect();
    matmul(&softmax_rows(&scores), &v)
}

/// Declares a suite's checks: a `CHECKS` table for the acceptance runner and
/// one `#[test]` per check for the regular harness.
macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const CHECKS: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        #[cfg(test)]
        mod generated {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}
