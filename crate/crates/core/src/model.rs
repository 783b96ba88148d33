//! The full network and its inference-time wrappers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{average_resample, gru_encode, Wsam};
use crate::causal::{argmax, debias_predict, make_counterfactual_text, ClassPriorTable, CounterfactualVocab, Mcm};
use crate::config::ModelConfig;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::Predictor;
use crate::fusion::{build_composite_masks, fuse_joint, JointHead, Mct, NaPool};
use crate::graph::{Mat, Var};
use crate::layers::{ConvProjection, Embedding, Gru, Linear, Session};
use crate::params::ParamStore;
use crate::training::ReconHeads;

/// Data-dependent sizes fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub cls: usize,
}

impl Dims {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            vocab: ds.vocab_size,
            d_a: ds.d_a,
            d_v: ds.d_v,
            cls: ds.cls,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    /// Backdoor-adjusted head; needs a class table.
    Causal(Mcm),
    Plain(Linear),
}

#[derive(Clone, Debug)]
pub struct CiderModel {
    pub cfg: ModelConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub proj: [ConvProjection; 3],
    pub wsam_a: Wsam,
    pub wsam_v: Wsam,
    pub gru: [Gru; 3],
    pub mct: Mct,
    pub pools: [NaPool; 3],
    pub joint: JointHead,
    pub head: Head,
    pub recon: ReconHeads,
}

/// Everything the losses need from one forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    /// Joint representation `h_m` (before output dropout).
    pub joint: Var,
    /// Pre-softmax trimodal attention of the last fusion layer, per head.
    pub attn_tri: Vec<Var>,
    /// Fusion output split back into language, audio and vision streams.
    pub streams: [Var; 3],
    /// Per-class branch logits when the causal head is used.
    pub branches: Option<Vec<Var>>,
}

impl CiderModel {
    pub fn new(cfg: ModelConfig, dims: Dims) -> Result<Self> {
        cfg.validate()?;
        if !(dims.cls == 2 || dims.cls == 7) {
            return Err(Error::Config(format!("unsupported class count {}", dims.cls)));
        }
        if dims.vocab == 0 || dims.d_a == 0 || dims.d_v == 0 {
            return Err(Error::Config("vocabulary and feature widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (d, k) = (cfg.d, cfg.conv_kernel);
        let embedding = Embedding::new(s, "embed", dims.vocab, cfg.d_l, rng);
        let proj = [
            ConvProjection::new(s, "proj_l", cfg.d_l, d, k, rng),
            ConvProjection::new(s, "proj_a", dims.d_a, d, k, rng),
            ConvProjection::new(s, "proj_v", dims.d_v, d, k, rng),
        ];
        let wsam_a = Wsam::new(s, "wsam_a", d, rng);
        let wsam_v = Wsam::new(s, "wsam_v", d, rng);
        let gru = [
            Gru::new(s, "gru_l", d, d, rng),
            Gru::new(s, "gru_a", d, d, rng),
            Gru::new(s, "gru_v", d, d, rng),
        ];
        let mct = Mct::new(s, "mct", d, cfg.n_layers, cfg.n_heads, cfg.attn_dropout, rng);
        let pools = [
            NaPool::new(s, "pool_l", d, rng),
            NaPool::new(s, "pool_a", d, rng),
            NaPool::new(s, "pool_v", d, rng),
        ];
        let joint = JointHead::new(s, "joint", d, rng);
        let head = if cfg.use_mcm {
            Head::Causal(Mcm::new(s, "mcm", (cfg.d_l, dims.d_a, dims.d_v), d, dims.cls, rng))
        } else {
            Head::Plain(Linear::new(s, "out", 3 * d, dims.cls, rng))
        };
        let recon = ReconHeads::new(s, "recon", d, (cfg.d_l, dims.d_a, dims.d_v), rng);
        Ok(Self {
            cfg,
            dims,
            store,
            embedding,
            proj,
            wsam_a,
            wsam_v,
            gru,
            mct,
            pools,
            joint,
            head,
            recon,
        })
    }

    pub fn uses_class_table(&self) -> bool {
        matches!(self.head, Head::Causal(_))
    }

    /// Current embedding matrix, used for text class means.
    pub fn embedding_table(&self) -> &Mat {
        self.store.get(self.embedding.table)
    }

    pub fn check_sample(&self, sample: &Sample) -> Result<()> {
        let (t_l, t_a, t_v) = sample.lengths();
        if t_l == 0 || t_a == 0 || t_v == 0 {
            return Err(Error::Shape(format!(
                "sample `{}` has an empty modality ({t_l}, {t_a}, {t_v})",
                sample.id
            )));
        }
        if sample.audio.ncols() != self.dims.d_a || sample.vision.ncols() != self.dims.d_v {
            return Err(Error::Shape(format!(
                "sample `{}` has feature widths ({}, {}), model expects ({}, {})",
                sample.id,
                sample.audio.ncols(),
                sample.vision.ncols(),
                self.dims.d_a,
                self.dims.d_v
            )));
        }
        self.embedding.check(&sample.tokens)
    }

    pub fn forward(
        &self,
        s: &mut Session,
        sample: &Sample,
        table: Option<&ClassPriorTable>,
    ) -> Result<ForwardOutput> {
        self.check_sample(sample)?;
        let t_l = sample.tokens.len();
        let l = self.embedding.forward(s, &sample.tokens)?;
        let l = s.dropout(l, self.cfg.embed_dropout);
        let a = s.g.constant(sample.audio.clone());
        let v = s.g.constant(sample.vision.clone());

        let x_l = self.proj[0].forward(s, l)?;
        let x_a = self.proj[1].forward(s, a)?;
        let x_v = self.proj[2].forward(s, v)?;
        let (x_a, x_v) = if self.cfg.use_wsam {
            (
                self.wsam_a.forward(s, x_l, x_a, None)?,
                self.wsam_v.forward(s, x_l, x_v, None)?,
            )
        } else {
            (average_resample(s, x_a, t_l), average_resample(s, x_v, t_l))
        };
        let h_l = gru_encode(s, x_l, &self.gru[0]);
        let h_a = gru_encode(s, x_a, &self.gru[1]);
        let h_v = gru_encode(s, x_v, &self.gru[2]);

        let h = s.g.concat_rows(&[h_l, h_a, h_v]);
        let fused = self.mct.forward(s, h, &build_composite_masks(t_l))?;
        let streams = [
            s.g.slice_rows(fused.h, 0, t_l),
            s.g.slice_rows(fused.h, t_l, t_l),
            s.g.slice_rows(fused.h, 2 * t_l, t_l),
        ];
        let pooled = [
            self.pools[0].forward(s, streams[0]),
            self.pools[1].forward(s, streams[1]),
            self.pools[2].forward(s, streams[2]),
        ];
        let joint = fuse_joint(s, pooled, &self.joint);
        let dropped = s.dropout(joint, self.cfg.out_dropout);
        let (logits, branches) = match &self.head {
            Head::Causal(mcm) => {
                let table = table.ok_or_else(|| {
                    Error::InvalidArgument("the causal head needs a class table".into())
                })?;
                let out = mcm.forward(s, dropped, table)?;
                (out.y, Some(out.branches))
            }
            Head::Plain(lin) => (lin.forward(s, dropped), None),
        };
        Ok(ForwardOutput {
            logits,
            joint,
            attn_tri: fused.attn_tri,
            streams,
            branches,
        })
    }

    /// Inference logits with dropout disabled.
    pub fn logits(&self, sample: &Sample, table: Option<&ClassPriorTable>) -> Result<Vec<f64>> {
        let mut s = Session::eval(&self.store);
        let out = self.forward(&mut s, sample, table)?;
        Ok(s.g.value(out.logits).row(0).to_vec())
    }

    /// The counterfactual input: class-indicative words only, other
    /// modalities silenced.
    pub fn counterfactual_sample(sample: &Sample, vocab: &CounterfactualVocab) -> Sample {
        Sample {
            tokens: make_counterfactual_text(&sample.tokens, vocab),
            audio: Mat::zeros(sample.audio.dim()),
            vision: Mat::zeros(sample.vision.dim()),
            ..sample.clone()
        }
    }

    /// `y_do - tau * y_cf`.
    pub fn debiased_logits(
        &self,
        sample: &Sample,
        table: Option<&ClassPriorTable>,
        vocab: &CounterfactualVocab,
        tau: f64,
    ) -> Result<Vec<f64>> {
        let y_do = self.logits(sample, table)?;
        let y_cf = self.logits(&Self::counterfactual_sample(sample, vocab), table)?;
        Ok(debias_predict(&y_do, &y_cf, tau))
    }
}

/// Inference wrapper: test-mode class table plus optional counterfactual
/// subtraction.
pub struct InferenceModel<'a> {
    pub model: &'a CiderModel,
    pub table: Option<ClassPriorTable>,
    pub vocab: Option<&'a CounterfactualVocab>,
    pub tau: f64,
}

impl<'a> InferenceModel<'a> {
    pub fn logits(&self, sample: &Sample) -> Result<Vec<f64>> {
        match self.vocab {
            Some(v) if self.tau != 0.0 => {
                self.model.debiased_logits(sample, self.table.as_ref(), v, self.tau)
            }
            _ => self.model.logits(sample, self.table.as_ref()),
        }
    }
}

impl Predictor for InferenceModel<'_> {
    fn cls(&self) -> usize {
        self.model.dims.cls
    }

    fn predict(&self, sample: &Sample) -> Result<usize> {
        Ok(argmax(&self.logits(sample)?))
    }
}
