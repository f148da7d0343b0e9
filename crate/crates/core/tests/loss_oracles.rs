//! The three contrastive losses against straight-line reimplementations on
//! random batches.

#[macro_use]
mod common;

use cir_core::autodiff::Graph;
use cir_core::hca::{tbia_loss, HcaParams, TbiaInputs};
use cir_core::objective::qtm_loss;
use cir_core::params::ParamStore;
use cir_core::tac::{ctr_loss, CtrInputs, TacParams};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BATCHES: u64 = 20;
const TOL: f64 = 1e-9;
const TAU: f64 = 0.1;

struct Shape {
    b: usize,
    d: usize,
}

fn shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape {
        b: rng.random_range(1..=4),
        d: [2, 4, 6, 8][rng.random_range(0..4)],
    }
}

fn tbia_oracle(store: &ParamStore, p: &HcaParams, items: &[(Mat, Mat, Mat)], d: usize) -> f64 {
    let w = |id| mat(&store.get(id).value);
    let (w_r, w_c, w_c2, w_t, w_v) = (w(p.w_r), w(p.w_c), w(p.w_c_prime), w(p.w_t), w(p.w_v));
    let b = items.len();
    let mut sims = vec![vec![0.0; b]; b];
    for (i, (f_r_bar, f_c, _)) in items.iter().enumerate() {
        let q_r = normalize_rows(&matmul(f_r_bar, &w_r));
        let k_c = normalize_rows(&matmul(f_c, &w_c));
        let a_r2c = matmul(&q_r, &transpose(&k_c));
        let q_c = normalize_rows(&matmul(f_c, &w_c2));
        for (j, (_, _, f_t)) in items.iter().enumerate() {
            let k_t = normalize_rows(&matmul(f_t, &w_t));
            let a_c2t = matmul(&q_c, &transpose(&k_t));
            let logits: Mat = matmul(&a_r2c, &a_c2t)
                .into_iter()
                .map(|r| r.into_iter().map(|x| x / (d as f64).sqrt()).collect())
                .collect();
            let a_r2t = softmax_rows(&logits);
            let f_r2t = matmul(&a_r2t, &matmul(f_t, &w_v));
            sims[i][j] = cosine(&mean_rows(f_r_bar), &mean_rows(&f_r2t));
        }
    }
    info_nce(&sims, TAU)
}

pub fn tbia_matches_brute_force() {
    let mut worst = 0.0f64;
    for seed in 0..BATCHES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Shape { b, d } = shape(&mut rng);
        let mut store = ParamStore::new();
        let p = HcaParams::init(&mut store, "hca", d, seed % 2 == 0, &mut rng).unwrap();
        let items: Vec<(Mat, Mat, Mat)> = (0..b)
            .map(|_| {
                let n = rng.random_range(2..=5);
                let l = rng.random_range(1..=4);
                (
                    random_mat(n, d, &mut rng),
                    random_mat(l, d, &mut rng),
                    random_mat(n, d, &mut rng),
                )
            })
            .collect();
        let mut g = Graph::new();
        let inputs: Vec<TbiaInputs> = items
            .iter()
            .map(|(r, c, t)| TbiaInputs {
                f_r_bar: g.constant(tensor(r)).unwrap(),
                f_c: g.constant(tensor(c)).unwrap(),
                f_t: g.constant(tensor(t)).unwrap(),
            })
            .collect();
        let l = tbia_loss(&mut g, &store, &p, &inputs, TAU).unwrap();
        let got = g.value(l).item();
        let want = tbia_oracle(&store, &p, &items, d);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < TOL, "max abs deviation {worst:e}");
}

fn ctr_oracle(store: &ParamStore, p: &TacParams, items: &[(Mat, Mat, Mat)]) -> f64 {
    let w = |id| mat(&store.get(id).value);
    let tb = &p.target_branch;
    let rb = &p.reference_branch;
    let (tq, tk, tv) = (w(tb.wq), w(tb.wk), w(tb.wv));
    let (rq, rk, rv) = (w(rb.wq), w(rb.wk), w(rb.wv));
    let mut visual = Vec::new();
    let mut text = Vec::new();
    for (f_r_prime, f_t, f_c) in items {
        let mut h_t = f_t.clone();
        let mut h_r = f_r_prime.clone();
        for _ in 0..p.layers {
            h_t = attention(f_r_prime, &h_t, &tq, &tk, &tv);
            h_r = attention(f_t, &h_r, &rq, &rk, &rv);
        }
        let avg: Vec<f64> = h_t[0]
            .iter()
            .zip(&h_r[0])
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        visual.push(normalize(&avg));
        text.push(normalize(&mean_rows(f_c)));
    }
    let sims: Mat = visual
        .iter()
        .map(|v| text.iter().map(|t| dot(v, t)).collect())
        .collect();
    info_nce(&sims, TAU)
}

pub fn ctr_matches_brute_force() {
    let mut worst = 0.0f64;
    for seed in 0..BATCHES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let Shape { b, d } = shape(&mut rng);
        let layers = rng.random_range(1..=3);
        let mut store = ParamStore::new();
        let p = TacParams::init(&mut store, "tac", d, layers, 1, seed % 3 == 0, &mut rng).unwrap();
        let items: Vec<(Mat, Mat, Mat)> = (0..b)
            .map(|_| {
                let n = rng.random_range(2..=5);
                let l = rng.random_range(1..=4);
                (
                    random_mat(n, d, &mut rng),
                    random_mat(n, d, &mut rng),
                    random_mat(l, d, &mut rng),
                )
            })
            .collect();
        let mut g = Graph::new();
        let inputs: Vec<CtrInputs> = items
            .iter()
            .map(|(r, t, c)| CtrInputs {
                f_r_prime: g.constant(tensor(r)).unwrap(),
                f_t: g.constant(tensor(t)).unwrap(),
                f_c: g.constant(tensor(c)).unwrap(),
            })
            .collect();
        let l = ctr_loss(&mut g, &store, &p, &inputs, TAU).unwrap();
        let got = g.value(l).item();
        let want = ctr_oracle(&store, &p, &items);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < TOL, "max abs deviation {worst:e}");
}

pub fn qtm_matches_brute_force() {
    let mut worst = 0.0f64;
    for seed in 0..BATCHES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let Shape { b, d } = shape(&mut rng);
        let queries: Vec<Vec<f64>> = (0..b)
            .map(|_| normalize(&random_mat(1, d, &mut rng)[0]))
            .collect();
        let targets: Vec<Vec<f64>> = (0..b)
            .map(|_| normalize(&random_mat(1, d, &mut rng)[0]))
            .collect();
        let mut g = Graph::new();
        let qv: Vec<_> = queries
            .iter()
            .map(|q| g.constant(tensor(&vec![q.clone()])).unwrap())
            .collect();
        let tv: Vec<_> = targets
            .iter()
            .map(|t| g.constant(tensor(&vec![t.clone()])).unwrap())
            .collect();
        let l = qtm_loss(&mut g, &qv, &tv, TAU).unwrap();
        let sims: Mat = queries
            .iter()
            .map(|q| targets.iter().map(|t| dot(q, t)).collect())
            .collect();
        worst = worst.max((g.value(l).item() - info_nce(&sims, TAU)).abs());
    }
    assert!(worst < TOL, "max abs deviation {worst:e}");
}

checks!(
    tbia_matches_brute_force,
    ctr_matches_brute_force,
    qtm_matches_brute_force,
);
