//! The full model: frozen image encoders, trainable text side, and the two
//! training-only association heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::TripletRecord;
use crate::encoders::{
    CrossEncoder, ImageBranch, QFormerLite, SeqEncoder, SeqEncoderSpec, TokenKind,
};
use crate::error::{Error, Result};
use crate::hca::{tbia_loss, HcaParams, TbiaInputs};
use crate::objective::{qtm_loss, total_loss, ObjectiveWeights};
use crate::params::{ParamId, ParamStore};
use crate::tac::{ctr_loss, CtrInputs, TacParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub image_vocab: usize,
    pub text_vocab: usize,
    pub max_len: usize,
    /// Learnable prompt rows in the query fusion block.
    pub prompts: usize,
    pub tac_layers: usize,
    /// Heads in the encoder, cross-encoder and compositor attention blocks.
    pub heads: usize,
    /// Width of each head in the query fusion block, which runs
    /// `d / qformer_head_dim` heads.
    pub qformer_head_dim: usize,
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            image_vocab: 32,
            text_vocab: 24,
            max_len: 16,
            prompts: 8,
            tac_layers: 4,
            heads: 1,
            qformer_head_dim: 1,
            positional: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("image_vocab", self.image_vocab),
            ("text_vocab", self.text_vocab),
            ("max_len", self.max_len),
            ("tac_layers", self.tac_layers),
            ("heads", self.heads),
            ("qformer_head_dim", self.qformer_head_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d = {}",
                self.heads, self.d
            )));
        }
        if !self.d.is_multiple_of(self.qformer_head_dim) {
            return Err(Error::Config(format!(
                "qformer head width {} does not divide d = {}",
                self.qformer_head_dim, self.d
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// One projection for the text in both hops of the hinge attention.
    pub share_text_projection: bool,
    pub share_tac_branches: bool,
    /// Use plain reference features instead of cross-encoded ones in the
    /// alignment term.
    pub pure_reference: bool,
    pub disable_tbia: bool,
    pub disable_ctr: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            share_text_projection: true,
            share_tac_branches: false,
            pure_reference: false,
            disable_tbia: false,
            disable_ctr: false,
        }
    }
}

/// Scalar values of the three terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub qtm: f64,
    pub tbia: Option<f64>,
    pub ctr: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub qtm: Var,
    pub tbia: Option<Var>,
    pub ctr: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            qtm: g.value(self.qtm).item(),
            tbia: self.tbia.map(|v| g.value(v).item()),
            ctr: self.ctr.map(|v| g.value(v).item()),
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: ObjectiveWeights,
    pub pure_reference: bool,
    pub tbia: bool,
    pub ctr: bool,
}

impl LossOptions {
    pub fn new(weights: ObjectiveWeights, flags: &AblationFlags) -> Self {
        Self {
            weights,
            pure_reference: flags.pure_reference,
            tbia: !flags.disable_tbia,
            ctr: !flags.disable_ctr,
        }
    }
}

impl Default for LossOptions {
    fn default() -> Self {
        Self::new(ObjectiveWeights::default(), &AblationFlags::default())
    }
}

/// Parameter-name prefixes, one per component.
pub const GROUPS: [&str; 7] = [
    "ref_encoder",
    "target_encoder",
    "text_encoder",
    "cross_encoder",
    "qformer",
    "hca",
    "tac",
];

#[derive(Debug)]
pub struct CirModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ref_encoder: SeqEncoder,
    pub target_encoder: SeqEncoder,
    pub text_encoder: SeqEncoder,
    pub cross_encoder: CrossEncoder,
    pub qformer: QFormerLite,
    pub hca: HcaParams,
    pub tac: TacParams,
}

impl CirModel {
    pub fn new(config: &ModelConfig, flags: &AblationFlags, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let image = |prefix| SeqEncoderSpec {
            prefix,
            kind: TokenKind::Image,
            vocab: config.image_vocab,
            d,
            max_len: config.max_len,
            heads: config.heads,
            positional: config.positional,
            frozen: true,
        };
        let ref_encoder = SeqEncoder::init(&mut store, image("ref_encoder"), &mut rng)?;
        let target_encoder = SeqEncoder::init(&mut store, image("target_encoder"), &mut rng)?;
        let text_encoder = SeqEncoder::init(
            &mut store,
            SeqEncoderSpec {
                prefix: "text_encoder",
                kind: TokenKind::Text,
                vocab: config.text_vocab,
                d,
                max_len: config.max_len,
                heads: config.heads,
                positional: config.positional,
                frozen: false,
            },
            &mut rng,
        )?;
        let cross_encoder =
            CrossEncoder::init(&mut store, "cross_encoder", d, config.heads, &mut rng)?;
        let qformer = QFormerLite::init(
            &mut store,
            "qformer",
            d,
            config.prompts,
            config.d / config.qformer_head_dim,
            &mut rng,
        )?;
        let hca = HcaParams::init(&mut store, "hca", d, flags.share_text_projection, &mut rng)?;
        let tac = TacParams::init(
            &mut store,
            "tac",
            d,
            config.tac_layers,
            config.heads,
            flags.share_tac_branches,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            ref_encoder,
            target_encoder,
            text_encoder,
            cross_encoder,
            qformer,
            hca,
            tac,
        })
    }

    fn image_encoder(&self, which: ImageBranch) -> &SeqEncoder {
        match which {
            ImageBranch::Reference => &self.ref_encoder,
            ImageBranch::Target => &self.target_encoder,
        }
    }

    /// `(N + 1)×d` image features with a leading CLS row.
    pub fn encode_image(&self, g: &mut Graph, tokens: &[usize], which: ImageBranch) -> Result<Var> {
        let enc = self.image_encoder(which);
        let seq = enc.validate(tokens)?;
        enc.encode(g, &self.store, &seq)
    }

    /// `L×d` text features.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let seq = self.text_encoder.validate(tokens)?;
        self.text_encoder.encode(g, &self.store, &seq)
    }

    pub fn cross_encode(&self, g: &mut Graph, f_r: Var, f_c: Var) -> Result<Var> {
        self.cross_encoder.forward(g, &self.store, f_r, f_c)
    }

    /// `1×d` L2-normalized query embedding from reference and text features.
    pub fn query_from_features(&self, g: &mut Graph, f_c: Var, f_r: Var) -> Result<Var> {
        Ok(self.qformer.forward(g, &self.store, f_c, f_r)?.pooled)
    }

    /// `1×d` L2-normalized CLS row of target features.
    pub fn pool_target(&self, g: &mut Graph, f_t: Var) -> Result<Var> {
        let cls = g.slice_rows(f_t, 0, 1)?;
        g.l2_normalize_rows(cls)
    }

    /// Records the joint objective for one batch.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[&TripletRecord],
        opts: &LossOptions,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        opts.weights.validate()?;
        let mut queries = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut tbia_items = Vec::new();
        let mut ctr_items = Vec::new();
        for r in batch {
            let f_r = self.encode_image(g, &r.ref_tokens, ImageBranch::Reference)?;
            let f_t = self.encode_image(g, &r.target_tokens, ImageBranch::Target)?;
            let f_c = self.encode_text(g, &r.text_tokens)?;
            queries.push(self.query_from_features(g, f_c, f_r)?);
            targets.push(self.pool_target(g, f_t)?);
            if opts.tbia {
                let f_r_bar = if opts.pure_reference {
                    f_r
                } else {
                    self.cross_encode(g, f_r, f_c)?
                };
                tbia_items.push(TbiaInputs { f_r_bar, f_c, f_t });
            }
            if opts.ctr {
                // the reference re-encoded through the target image branch
                let f_r_prime = self.encode_image(g, &r.ref_tokens, ImageBranch::Target)?;
                ctr_items.push(CtrInputs {
                    f_r_prime,
                    f_t,
                    f_c,
                });
            }
        }
        let tau = opts.weights.tau;
        let qtm = qtm_loss(g, &queries, &targets, tau)?;
        let tbia = if opts.tbia {
            Some(tbia_loss(g, &self.store, &self.hca, &tbia_items, tau)?)
        } else {
            None
        };
        let ctr = if opts.ctr {
            Some(ctr_loss(g, &self.store, &self.tac, &ctr_items, tau)?)
        } else {
            None
        };
        let total = total_loss(g, qtm, tbia, ctr, &opts.weights)?;
        Ok(LossVars {
            qtm,
            tbia,
            ctr,
            total,
        })
    }

    /// Forward, backward, and gradient harvest into the store for one batch.
    pub fn accumulate_gradients(
        &mut self,
        batch: &[&TripletRecord],
        opts: &LossOptions,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let loss = self.batch_loss(&mut g, batch, opts)?;
        g.backward(loss.total)?;
        g.accumulate_param_grads(&mut self.store);
        Ok(loss.breakdown(&g))
    }

    /// Inference-path query embedding. Only the reference encoder, text
    /// encoder, and query fusion block are read.
    pub fn query_embedding(&self, record: &TripletRecord) -> Result<Tensor> {
        let mut g = Graph::new();
        let f_r = self.encode_image(&mut g, &record.ref_tokens, ImageBranch::Reference)?;
        let f_c = self.encode_text(&mut g, &record.text_tokens)?;
        let q = self.query_from_features(&mut g, f_c, f_r)?;
        Ok(g.value(q).clone())
    }

    /// Inference-path gallery embedding of a target image.
    pub fn target_embedding(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let f_t = self.encode_image(&mut g, tokens, ImageBranch::Target)?;
        let t = self.pool_target(&mut g, f_t)?;
        Ok(g.value(t).clone())
    }

    /// Ids of every parameter whose name falls under `group`.
    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        let prefix = format!("{group}.");
        self.store
            .ids()
            .filter(|&id| self.store.name(id).starts_with(&prefix))
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.store.save_checkpoint(path)
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        self.store.load_checkpoint(path)
    }
}
