//! The full retrieval model: both towers, scene fusion, captioning head,
//! textual decomposition, WTI gates and the logit scale, with module toggles.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{Batch, DataDims, EncodedText, ModelConfig, TextEncoder, VideoEncoder};
use crate::error::{Error, Result};
use crate::matching::{infonce_loss, total_loss, LossWeights, Wti};
use crate::nn::{key_padding_bias, Init, ParamStore};
use crate::scene_elements::ElementToggles;
use crate::textual_debias::{kl_loss, mix_bias, Noise, TextualDebias};
use crate::visual_debias::{Reduction, SceneFusion, TokenDecoder};

pub const LOG_TAU: &str = "log_tau";

/// Independent on/off switches for each module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub entities: bool,
    pub activities: bool,
    pub captioning_head: bool,
    pub textual_debias: bool,
    pub coefficient_g: bool,
    pub residual_fuse: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all_on()
    }
}

impl Toggles {
    pub fn all_on() -> Self {
        Self {
            entities: true,
            activities: true,
            captioning_head: true,
            textual_debias: true,
            coefficient_g: true,
            residual_fuse: true,
        }
    }

    /// Plain contrastive baseline.
    pub fn baseline() -> Self {
        Self {
            entities: false,
            activities: false,
            captioning_head: false,
            textual_debias: false,
            coefficient_g: true,
            residual_fuse: true,
        }
    }

    pub fn uses_elements(&self) -> bool {
        self.entities || self.activities
    }

    pub fn elements(&self) -> ElementToggles {
        ElementToggles {
            entities: self.entities,
            activities: self.activities,
            coefficient_g: self.coefficient_g,
        }
    }

    /// Ablation presets `exp1` … `exp7`: baseline, entities, activities, both,
    /// both + captioning head, textual debias alone, everything.
    pub fn preset(name: &str) -> Result<Self> {
        let b = Self::baseline();
        Ok(match name {
            "exp1" => b,
            "exp2" => Self { entities: true, ..b },
            "exp3" => Self { activities: true, ..b },
            "exp4" => Self { entities: true, activities: true, ..b },
            "exp5" => Self { entities: true, activities: true, captioning_head: true, ..b },
            "exp6" => Self { textual_debias: true, ..b },
            "exp7" => Self::all_on(),
            _ => return Err(Error::Config(format!("unknown module preset {name:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Content,
    Bias,
    Mixed,
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Self::Content),
            "bias" => Ok(Self::Bias),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::Config(format!("unknown feature source {s:?}"))),
        }
    }
}

/// Loss terms of one step; disabled terms are zero.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub infonce: Tensor,
    pub cap: Tensor,
    pub rec: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossValues {
    pub infonce: f64,
    pub cap: f64,
    pub rec: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.infonce, self.cap, self.rec, self.kl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "infonce={} cap={} rec={} kl={} total={}",
            self.infonce, self.cap, self.rec, self.kl, self.total
        )
    }
}

impl LossBundle {
    pub fn values(&self) -> Result<LossValues> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues {
            infonce: v(&self.infonce)?,
            cap: v(&self.cap)?,
            rec: v(&self.rec)?,
            kl: v(&self.kl)?,
            total: v(&self.total)?,
        })
    }
}

/// Per-step training knobs that are not parameters.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings {
    pub toggles: Toggles,
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub k_samples: usize,
}

#[derive(Debug, Clone)]
pub struct BimaModel {
    pub text: TextEncoder,
    pub video: VideoEncoder,
    pub fusion: SceneFusion,
    pub cap_head: TokenDecoder,
    pub textual: TextualDebias,
    pub rec_decoder: TokenDecoder,
    pub wti: Wti,
    pub log_tau: Tensor,
    pub dims: DataDims,
    pub config: ModelConfig,
}

impl BimaModel {
    /// Registers (or fetches) every tensor in `store`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, dims: &DataDims, tau_init: f64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let hidden = d * cfg.mlp_ratio;
        Ok(Self {
            text: TextEncoder::new(store, cfg, dims)?,
            video: VideoEncoder::new(store, cfg, dims)?,
            fusion: SceneFusion::new(store, "fuse", d, cfg.fuse_heads)?,
            cap_head: TokenDecoder::new(
                store,
                "cap",
                dims.vocab_size,
                dims.n_t,
                d,
                cfg.heads,
                cfg.cap_blocks,
                hidden,
                cfg.activation,
                cfg.init_std,
            )?,
            textual: TextualDebias::new(store, "bias", d)?,
            rec_decoder: TokenDecoder::new(
                store,
                "rec",
                dims.vocab_size,
                dims.n_t,
                d,
                cfg.heads,
                cfg.rec_blocks,
                hidden,
                cfg.activation,
                cfg.init_std,
            )?,
            wti: Wti::new(store, "wti", d, cfg.gate_activation)?,
            log_tau: store.get(LOG_TAU, &[], Init::Const(tau_init.ln()))?,
            dims: *dims,
            config: cfg.clone(),
        })
    }

    pub fn tau(&self) -> Result<Tensor> {
        Ok(self.log_tau.exp()?)
    }

    /// Frame embeddings, fused with the scene elements when given.
    pub fn visual(&self, frames: &Tensor, elements: Option<&Tensor>, residual: bool) -> Result<Tensor> {
        let ev = self.video.forward(frames)?;
        match elements {
            Some(c) => Ok(self.fusion.forward(&ev.frames, c, residual)?.v_hat),
            None => Ok(ev.frames),
        }
    }

    pub fn step_losses(
        &self,
        batch: &Batch,
        elements: Option<&Tensor>,
        noise: Noise<'_>,
        s: &StepSettings,
    ) -> Result<LossBundle> {
        let t = &s.toggles;
        if t.uses_elements() != elements.is_some() {
            return Err(Error::InvalidArgument(
                "scene elements must be given exactly when an element toggle is on".into(),
            ));
        }
        let et = self.text.forward(&batch.ids, &batch.mask)?;
        let v_hat = self.visual(&batch.frames, elements, t.residual_fuse)?;
        let zero = Tensor::zeros((), v_hat.dtype(), v_hat.device())?;

        let (text_feats, rec, kl) = if t.textual_debias {
            let dec = self.textual.decompose(&et, s.k_samples, noise)?;
            let bias = key_padding_bias(&batch.mask)?;
            let mut rec = zero.clone();
            for z in &dec.z {
                let l = self
                    .rec_decoder
                    .loss(&batch.ids, &batch.mask, z, Some(&bias), s.reduction)?;
                rec = (rec + l.loss)?;
            }
            let rec = (rec / dec.z.len() as f64)?;
            (dec.content, rec, kl_loss(&dec.posterior)?)
        } else {
            (et.tokens.clone(), zero.clone(), zero.clone())
        };

        let cap = if t.captioning_head {
            self.cap_head
                .loss(&batch.ids, &batch.mask, &v_hat, None, s.reduction)?
                .loss
        } else {
            zero
        };

        let sim = self.wti.similarity(&text_feats, &batch.mask, &v_hat)?;
        let infonce = infonce_loss(&sim, &self.tau()?)?;
        let total = total_loss(&infonce, &cap, &rec, &kl, &s.weights)?;
        Ok(LossBundle {
            infonce,
            cap,
            rec,
            kl,
            total,
        })
    }

    pub fn encode_text(&self, ids: &Tensor, mask: &Tensor) -> Result<EncodedText> {
        self.text.forward(ids, mask)
    }

    /// Text token features for retrieval. Bias sampling is never used here:
    /// the bias feature is the posterior mean μ broadcast over tokens.
    pub fn text_features(
        &self,
        ids: &Tensor,
        mask: &Tensor,
        toggles: &Toggles,
        source: FeatureSource,
        alpha: Option<f64>,
    ) -> Result<Tensor> {
        let et = self.text.forward(ids, mask)?;
        if !toggles.textual_debias {
            return match source {
                FeatureSource::Content => Ok(et.tokens),
                _ => Err(Error::InvalidArgument(
                    "bias features need the textual debias module".into(),
                )),
            };
        }
        let content = self.textual.content(&et)?;
        let mask3 = mask.unsqueeze(2)?;
        match source {
            FeatureSource::Content => Ok(content),
            FeatureSource::Bias => {
                let mu = self.textual.posterior(&et)?.mu;
                Ok(mu.unsqueeze(1)?.broadcast_mul(&mask3)?)
            }
            FeatureSource::Mixed => {
                let alpha = alpha.ok_or_else(|| {
                    Error::InvalidArgument("mixed features need an alpha".into())
                })?;
                let mu = self.textual.posterior(&et)?.mu;
                Ok(mix_bias(&content, &mu, alpha)?.broadcast_mul(&mask3)?)
            }
        }
    }
}
