//! Toy trainable feature extractors.
//!
//! Each sequence encoder is an embedding table, optional learned positions,
//! and one single-block self-attention layer with a residual connection.
//! Image encoders prepend a learned CLS row. The cross encoder conditions
//! reference-image features on the text; the Q-former-lite fuses learnable
//! prompts and text with the reference image into one query embedding.

use rand::Rng;

use crate::attention::AttentionParams;
use crate::autodiff::{Axis, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Image,
    Text,
}

/// Which image encoder's parameters to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageBranch {
    Reference,
    Target,
}

/// A validated token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq<'a> {
    tokens: &'a [usize],
    kind: TokenKind,
}

impl<'a> TokenSeq<'a> {
    pub fn new(tokens: &'a [usize], kind: TokenKind, vocab: usize, max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > max_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds maximum {max_len}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!(
                "token {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(Self { tokens, kind })
    }

    pub fn tokens(&self) -> &'a [usize] {
        self.tokens
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Init scale of CLS and position vectors, kept small next to the unit-scale
/// token embeddings so the pooled CLS row is dominated by content.
const SMALL_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct SeqEncoder {
    pub embedding: ParamId,
    pub cls: Option<ParamId>,
    pub positions: Option<ParamId>,
    pub attn: AttentionParams,
    kind: TokenKind,
    vocab: usize,
    max_len: usize,
    heads: usize,
}

pub struct SeqEncoderSpec<'a> {
    pub prefix: &'a str,
    pub kind: TokenKind,
    pub vocab: usize,
    pub d: usize,
    pub max_len: usize,
    pub heads: usize,
    pub positional: bool,
    pub frozen: bool,
}

impl SeqEncoder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: SeqEncoderSpec<'_>,
        rng: &mut R,
    ) -> Result<Self> {
        let SeqEncoderSpec {
            prefix,
            kind,
            vocab,
            d,
            max_len,
            heads,
            positional,
            frozen,
        } = spec;
        let embedding = store.add(
            format!("{prefix}.embedding"),
            Tensor::randn(vocab, d, 1.0, rng),
            frozen,
        )?;
        let with_cls = kind == TokenKind::Image;
        let cls = if with_cls {
            Some(store.add(
                format!("{prefix}.cls"),
                Tensor::randn(1, d, SMALL_INIT_STD, rng),
                frozen,
            )?)
        } else {
            None
        };
        let positions = if positional {
            let rows = max_len + usize::from(with_cls);
            Some(store.add(
                format!("{prefix}.positions"),
                Tensor::randn(rows, d, SMALL_INIT_STD, rng),
                frozen,
            )?)
        } else {
            None
        };
        let attn = AttentionParams::init(store, &format!("{prefix}.attn"), d, frozen, rng)?;
        Ok(Self {
            embedding,
            cls,
            positions,
            attn,
            kind,
            vocab,
            max_len,
            heads,
        })
    }

    pub fn validate<'a>(&self, tokens: &'a [usize]) -> Result<TokenSeq<'a>> {
        TokenSeq::new(tokens, self.kind, self.vocab, self.max_len)
    }

    /// `(n + 1)×d` with a leading CLS row for image encoders, `n×d` for text.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seq: &TokenSeq<'_>) -> Result<Var> {
        if seq.kind() != self.kind {
            return Err(Error::Input(format!(
                "{:?} sequence passed to a {:?} encoder",
                seq.kind(),
                self.kind
            )));
        }
        let table = g.param(store, self.embedding)?;
        let mut x = g.gather_rows(table, seq.tokens())?;
        if let Some(cls) = self.cls {
            let cls = g.param(store, cls)?;
            x = g.concat(&[cls, x], Axis::Rows)?;
        }
        if let Some(pos) = self.positions {
            let pos = g.param(store, pos)?;
            let idx: Vec<usize> = (0..g.shape(x).0).collect();
            let p = g.gather_rows(pos, &idx)?;
            x = g.add(x, p)?;
        }
        let attended = self.attn.forward(g, store, x, x, self.heads)?;
        g.add(x, attended)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        ids.extend(self.cls);
        ids.extend(self.positions);
        ids.extend(self.attn.ids());
        ids
    }
}

/// Reference features refined by attending over the text.
#[derive(Clone, Debug)]
pub struct CrossEncoder {
    pub attn: AttentionParams,
    heads: usize,
}

impl CrossEncoder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), d, false, rng)?,
            heads,
        })
    }

    /// `F_r + Attention(F_r, F_c, F_c)`, same shape as `f_r`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_r: Var, f_c: Var) -> Result<Var> {
        if g.shape(f_r).1 != g.shape(f_c).1 {
            return Err(Error::dim(
                "cross_encode",
                format!("widths {} vs {}", g.shape(f_r).1, g.shape(f_c).1),
            ));
        }
        let attended = self.attn.forward(g, store, f_r, f_c, self.heads)?;
        g.add(f_r, attended)
    }
}

/// Output of [`QFormerLite::forward`].
#[derive(Clone, Copy, Debug)]
pub struct QueryFeatures {
    /// `(P + L)×d` fused rows.
    pub rows: Var,
    /// `1×d` L2-normalized mean of `rows`.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct QFormerLite {
    pub prompts: Option<ParamId>,
    pub attn: AttentionParams,
    heads: usize,
}

impl QFormerLite {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        n_prompts: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let prompts = if n_prompts > 0 {
            Some(store.add(
                format!("{prefix}.prompts"),
                Tensor::randn(n_prompts, d, 1.0, rng),
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            prompts,
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), d, false, rng)?,
            heads,
        })
    }

    /// Prompts and text rows query the reference image; mean-pooled text is
    /// then added to every output row.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_c: Var,
        f_r: Var,
    ) -> Result<QueryFeatures> {
        if g.shape(f_r).1 != g.shape(f_c).1 {
            return Err(Error::dim(
                "qformer",
                format!("widths {} vs {}", g.shape(f_c).1, g.shape(f_r).1),
            ));
        }
        let queries = match self.prompts {
            Some(p) => {
                let p = g.param(store, p)?;
                g.concat(&[p, f_c], Axis::Rows)?
            }
            None => f_c,
        };
        let attended = self.attn.forward(g, store, queries, f_r, self.heads)?;
        let text = g.mean_rows(f_c)?;
        let ones = g.constant(Tensor::filled(g.shape(attended).0, 1, 1.0))?;
        let text_rows = g.matmul(ones, text)?;
        let rows = g.add(attended, text_rows)?;
        let mean = g.mean_rows(rows)?;
        let pooled = g.l2_normalize_rows(mean)?;
        Ok(QueryFeatures { rows, pooled })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image_encoder(store: &mut ParamStore, positional: bool, rng: &mut ChaCha8Rng) -> SeqEncoder {
        SeqEncoder::init(
            store,
            SeqEncoderSpec {
                prefix: "img",
                kind: TokenKind::Image,
                vocab: 20,
                d: 16,
                max_len: 16,
                heads: 1,
                positional,
                frozen: true,
            },
            rng,
        )
        .unwrap()
    }

    fn text_encoder(store: &mut ParamStore, positional: bool, rng: &mut ChaCha8Rng) -> SeqEncoder {
        SeqEncoder::init(
            store,
            SeqEncoderSpec {
                prefix: "txt",
                kind: TokenKind::Text,
                vocab: 12,
                d: 16,
                max_len: 16,
                heads: 1,
                positional,
                frozen: false,
            },
            rng,
        )
        .unwrap()
    }

    fn run(enc: &SeqEncoder, store: &ParamStore, tokens: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let seq = enc.validate(tokens).unwrap();
        let v = enc.encode(&mut g, store, &seq).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn image_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = image_encoder(&mut store, true, &mut rng);
        let toks = [1, 2, 3, 4, 5, 6, 7, 8, 9];
        let a = run(&enc, &store, &toks);
        assert_eq!(a.shape(), (10, 16));
        assert_eq!(a, run(&enc, &store, &toks));
    }

    #[test]
    fn text_has_no_cls_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = text_encoder(&mut store, true, &mut rng);
        assert_eq!(run(&enc, &store, &[3, 1, 4, 1, 5, 9]).shape(), (6, 16));
        assert_eq!(run(&enc, &store, &[3, 1]), run(&enc, &store, &[3, 1]));
    }

    fn assert_rows_permuted(a: &Tensor, b: &Tensor, offset: usize, perm: &[usize]) {
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..a.cols() {
                let (x, y) = (a.get(offset + p, c), b.get(offset + i, c));
                assert!((x - y).abs() < 1e-12, "row {i} col {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let img = image_encoder(&mut store, false, &mut rng);
        let txt = text_encoder(&mut store, false, &mut rng);
        let toks = [4, 9, 1, 15, 2];
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<usize> = perm.iter().map(|&p| toks[p]).collect();

        let a = run(&img, &store, &toks);
        let b = run(&img, &store, &permuted);
        for c in 0..16 {
            assert!((a.get(0, c) - b.get(0, c)).abs() < 1e-12, "CLS row changed");
        }
        assert_rows_permuted(&a, &b, 1, &perm);

        let ttoks = [1, 7, 3, 0, 2];
        let tperm: Vec<usize> = perm.iter().map(|&p| ttoks[p]).collect();
        assert_rows_permuted(
            &run(&txt, &store, &ttoks),
            &run(&txt, &store, &tperm),
            0,
            &perm,
        );
    }

    #[test]
    fn sequence_validation() {
        assert!(matches!(
            TokenSeq::new(&[], TokenKind::Text, 10, 16),
            Err(Error::Input(_))
        ));
        assert!(TokenSeq::new(&[10], TokenKind::Text, 10, 16).is_err());
        assert!(TokenSeq::new(&[0; 17], TokenKind::Text, 10, 16).is_err());
        assert!(TokenSeq::new(&[9; 16], TokenKind::Text, 10, 16).is_ok());
    }

    #[test]
    fn wrong_kind_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let img = image_encoder(&mut store, true, &mut rng);
        let seq = TokenSeq::new(&[1, 2], TokenKind::Text, 20, 16).unwrap();
        let mut g = Graph::new();
        assert!(img.encode(&mut g, &store, &seq).is_err());
    }

    #[test]
    fn cross_encoder_is_identity_with_zero_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cross = CrossEncoder::init(&mut store, "cross", 8, 1, &mut rng).unwrap();
        store.get_mut(cross.attn.wv).value.fill(0.0);
        let f_r = Tensor::randn(5, 8, 1.0, &mut rng);
        let f_c = Tensor::randn(3, 8, 1.0, &mut rng);
        let mut g = Graph::new();
        let (r, c) = (g.constant(f_r.clone()).unwrap(), g.constant(f_c).unwrap());
        let out = cross.forward(&mut g, &store, r, c).unwrap();
        assert_eq!(g.value(out), &f_r);
    }

    #[test]
    fn cross_encoder_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cross = CrossEncoder::init(&mut store, "cross", 8, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let r = g.constant(Tensor::zeros(5, 8)).unwrap();
        let c = g.constant(Tensor::zeros(3, 4)).unwrap();
        assert!(matches!(
            cross.forward(&mut g, &store, r, c),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn qformer_shapes_and_degenerate_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let qf = QFormerLite::init(&mut store, "qf", 16, 8, 1, &mut rng).unwrap();
        let f_c = Tensor::randn(6, 16, 1.0, &mut rng);
        let f_r = Tensor::randn(10, 16, 1.0, &mut rng);
        let mut g = Graph::new();
        let (c, r) = (g.constant(f_c.clone()).unwrap(), g.constant(f_r).unwrap());
        let out = qf.forward(&mut g, &store, c, r).unwrap();
        assert_eq!(g.shape(out.rows), (14, 16));
        assert_eq!(g.shape(out.pooled), (1, 16));

        let qf0 = QFormerLite::init(&mut store, "qf0", 16, 0, 1, &mut rng).unwrap();
        store.get_mut(qf0.attn.wv).value.fill(0.0);
        let out = qf0.forward(&mut g, &store, c, r).unwrap();
        let mean: Vec<f64> = (0..16)
            .map(|col| (0..6).map(|row| f_c.get(row, col)).sum::<f64>() / 6.0)
            .collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (col, m) in mean.iter().enumerate() {
            assert!((g.value(out.pooled).get(0, col) - m / norm).abs() < 1e-12);
        }
    }
}
