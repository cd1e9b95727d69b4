//! Content/bias decomposition of encoded text: a token-level content head, a
//! diagonal Gaussian bias posterior on the CLS vector, reparameterized samples,
//! and the KL / reconstruction terms.

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoders::EncodedText;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};

/// Diagonal Gaussian, batched: `mu` and `log_var` are `(B, d)`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub log_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct ContentBiasDecomposition {
    /// `(B, N_t, d)`, zero on PAD positions.
    pub content: Tensor,
    /// Content head applied to t_CLS, `(B, d)`.
    pub content_cls: Tensor,
    pub posterior: GaussianPosterior,
    /// K samples, each `(B, d)`.
    pub samples: Vec<Tensor>,
    /// One `(B, N_t, d)` latent per sample.
    pub z: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TextualDebias {
    content: Linear,
    mu: Linear,
    log_var: Linear,
}

/// Source of ε for the reparameterization.
pub enum Noise<'a> {
    /// Fresh standard-normal draws.
    Rng(&'a mut ChaCha8Rng),
    /// Caller-provided ε per sample, each `(B, d)`.
    Fixed(&'a [Tensor]),
}

impl TextualDebias {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            content: Linear::with_init(store, &format!("{name}.content"), d, d, Init::Identity)?,
            mu: Linear::new(store, &format!("{name}.mu"), d, d)?,
            log_var: Linear::with_init(store, &format!("{name}.log_var"), d, d, Init::Zeros)?,
        })
    }

    /// Content tokens `(B, N_t, d)`, masked.
    pub fn content(&self, et: &EncodedText) -> Result<Tensor> {
        Ok(self
            .content
            .forward(&et.tokens)?
            .broadcast_mul(&et.mask.unsqueeze(2)?)?)
    }

    /// Content head applied to t_CLS, `(B, d)`.
    pub fn content_cls(&self, et: &EncodedText) -> Result<Tensor> {
        self.content.forward(&et.cls)
    }

    pub fn posterior(&self, et: &EncodedText) -> Result<GaussianPosterior> {
        Ok(GaussianPosterior {
            mu: self.mu.forward(&et.cls)?,
            log_var: self.log_var.forward(&et.cls)?,
        })
    }

    pub fn decompose(&self, et: &EncodedText, k: usize, noise: Noise<'_>) -> Result<ContentBiasDecomposition> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let content = self.content(et)?;
        let content_cls = self.content_cls(et)?;
        let posterior = self.posterior(et)?;
        let eps: Vec<Tensor> = match noise {
            Noise::Fixed(e) => {
                if e.len() != k {
                    return Err(Error::InvalidArgument(format!(
                        "{} noise tensors for K = {k}",
                        e.len()
                    )));
                }
                e.to_vec()
            }
            Noise::Rng(rng) => (0..k)
                .map(|_| standard_normal_like(&posterior.mu, rng))
                .collect::<Result<_>>()?,
        };
        let samples = eps
            .iter()
            .map(|e| reparameterize(&posterior, e))
            .collect::<Result<Vec<_>>>()?;
        let z = samples
            .iter()
            .map(|s| latent(&content, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(ContentBiasDecomposition {
            content,
            content_cls,
            posterior,
            samples,
            z,
        })
    }
}

/// Draws a tensor of standard-normal values shaped like `like`.
pub fn standard_normal_like(like: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = like.elem_count();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, like.dims(), like.device())?.to_dtype(like.dtype())?)
}

/// Per-pair noise stream derived from (seed, epoch, pair index).
pub fn noise_rng(seed: u64, epoch: u64, pair: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5_0000_0000_0000);
    r.set_stream(epoch.wrapping_mul(1 << 32) ^ pair);
    r
}

/// t̃ = μ + exp(½ log σ²) ⊙ ε.
pub fn reparameterize(post: &GaussianPosterior, eps: &Tensor) -> Result<Tensor> {
    let sigma = (&post.log_var * 0.5)?.exp()?;
    Ok((&post.mu + (sigma * eps)?)?)
}

/// z = t̂ + broadcast(t̃) over every token position.
pub fn latent(content: &Tensor, sample: &Tensor) -> Result<Tensor> {
    Ok(content.broadcast_add(&sample.unsqueeze(1)?)?)
}

/// ½ Σ (μ² + σ² − 1 − log σ²), averaged over the batch.
pub fn kl_loss(post: &GaussianPosterior) -> Result<Tensor> {
    let b = post.mu.dim(0)?;
    let terms = ((post.mu.sqr()? + post.log_var.exp()?)? - 1.0)?;
    let terms = (terms - &post.log_var)?;
    Ok(((terms.sum(D::Minus1)? * 0.5)?.sum_all()? / b as f64)?)
}

pub fn vae_loss(rec: &Tensor, kl: &Tensor) -> Result<Tensor> {
    Ok((rec + kl)?)
}

/// t̂ + α·broadcast(bias); α outside [0, 1] is allowed but logged.
pub fn mix_bias(content: &Tensor, bias: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        log::warn!("mixing weight alpha = {alpha} is outside [0, 1]");
    }
    Ok(content.broadcast_add(&(bias * alpha)?.unsqueeze(1)?)?)
}
