//! Cross-attention fusion of scene elements into frame embeddings, and the
//! causal token decoder used by both the captioning head and the text decoder.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attend, causal_bias, log_softmax_last, Activation, DecoderBlock, Init, LayerNorm, Linear,
    ParamStore,
};

#[derive(Debug, Clone)]
pub struct FusedVisual {
    /// `(B, N_f, d)`.
    pub v_hat: Tensor,
    /// `(B, heads, N_f, κ)`.
    pub attention: Tensor,
}

/// softmax(q kᵀ / √d_h) v over the scene elements; queries are the frames.
#[derive(Debug, Clone)]
pub struct SceneFusion {
    q: Linear,
    k: Linear,
    v: Linear,
    heads: usize,
}

impl SceneFusion {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d = {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, &format!("{name}.v"), d, d)?,
            heads,
        })
    }

    /// Builds the layer from explicit projection weights (tests and diagnostics).
    pub fn from_linears(q: Linear, k: Linear, v: Linear, heads: usize) -> Self {
        Self { q, k, v, heads }
    }

    /// `frames (B, N_f, d)`, `elements (B, κ, d)`; with `residual` the frames are kept.
    pub fn forward(&self, frames: &Tensor, elements: &Tensor, residual: bool) -> Result<FusedVisual> {
        let (b, _, d) = frames.dims3()?;
        let (be, kappa, de) = elements.dims3()?;
        if kappa == 0 {
            return Err(Error::InvalidArgument("no scene elements to fuse".into()));
        }
        if be != b || de != d {
            return Err(Error::DimensionMismatch(format!(
                "frames {:?} vs elements {:?}",
                frames.dims(),
                elements.dims()
            )));
        }
        let (ctx, attention) = attend(&self.q, &self.k, &self.v, self.heads, frames, elements, None)?;
        let v_hat = if residual { (frames + ctx)? } else { ctx };
        Ok(FusedVisual { v_hat, attention })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over non-PAD targets of each caption, then over the batch.
    #[default]
    Mean,
    /// Sum over non-PAD targets of each caption, then mean over the batch.
    Sum,
}

#[derive(Debug, Clone)]
pub struct TokenLoss {
    pub loss: Tensor,
    /// `(B, N_t − 1)` log-probability of every target token (PAD positions included).
    pub token_log_probs: Tensor,
}

/// Teacher-forced causal decoder cross-attending to a memory sequence.
#[derive(Debug, Clone)]
pub struct TokenDecoder {
    embed: Tensor,
    pos: Tensor,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    lm_head: Linear,
}

impl TokenDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        d: usize,
        heads: usize,
        n_blocks: usize,
        hidden: usize,
        act: Activation,
        init_std: f64,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one block".into()));
        }
        Ok(Self {
            embed: store.get(&format!("{name}.embed"), &[vocab_size, d], Init::Normal(1.0))?,
            pos: store.get(&format!("{name}.pos"), &[1, max_len, d], Init::Normal(init_std))?,
            blocks: (0..n_blocks)
                .map(|i| DecoderBlock::new(store, &format!("{name}.block{i}"), d, heads, hidden, act))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d)?,
            lm_head: Linear::new(store, &format!("{name}.lm_head"), d, vocab_size)?,
        })
    }

    /// Next-token logits `(B, L, V)` for input ids `(B, L)`.
    pub fn logits(&self, input: &Tensor, memory: &Tensor, memory_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, l) = input.dims2()?;
        let d = self.embed.dim(1)?;
        if l > self.pos.dim(1)? {
            return Err(Error::DimensionMismatch(format!(
                "decoder input of length {l} exceeds {}",
                self.pos.dim(1)?
            )));
        }
        let x = self
            .embed
            .index_select(&input.flatten_all()?, 0)?
            .reshape((b, l, d))?
            .broadcast_add(&self.pos.narrow(1, 0, l)?)?;
        let causal = causal_bias(l, x.dtype(), x.device())?;
        let mut h = x;
        for blk in &self.blocks {
            h = blk.forward(&h, &causal, memory, memory_bias)?;
        }
        self.lm_head.forward(&self.ln_f.forward(&h)?)
    }

    /// Negative log-likelihood of `ids[:, 1:]` given `ids[:, :-1]` and the memory.
    pub fn loss(
        &self,
        ids: &Tensor,
        mask: &Tensor,
        memory: &Tensor,
        memory_bias: Option<&Tensor>,
        reduction: Reduction,
    ) -> Result<TokenLoss> {
        let (b, n_t) = ids.dims2()?;
        if n_t < 2 {
            return Err(Error::InvalidArgument("captions need at least two positions".into()));
        }
        let input = ids.narrow(1, 0, n_t - 1)?.contiguous()?;
        let target = ids.narrow(1, 1, n_t - 1)?.contiguous()?;
        let tmask = mask.narrow(1, 1, n_t - 1)?;
        let counts = tmask.sum(D::Minus1)?;
        let min_count = counts.to_dtype(candle_core::DType::F64)?.min(0)?.to_scalar::<f64>()?;
        if min_count < 1.0 {
            return Err(Error::InvalidArgument("caption without any target token".into()));
        }
        let logp = log_softmax_last(&self.logits(&input, memory, memory_bias)?)?;
        let token_log_probs = logp.gather(&target.unsqueeze(2)?, 2)?.squeeze(2)?;
        let per_caption = (token_log_probs.clone() * &tmask)?.sum(D::Minus1)?.neg()?;
        let per_caption = match reduction {
            Reduction::Mean => (per_caption / counts)?,
            Reduction::Sum => per_caption,
        };
        Ok(TokenLoss {
            loss: (per_caption.sum_all()? / b as f64)?,
            token_log_probs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn lin(w: &[[f64; 2]; 2]) -> Linear {
        Linear {
            weight: Tensor::new(w, &Device::Cpu).unwrap(),
            bias: None,
        }
    }

    #[test]
    fn single_element_gets_full_weight() {
        let mut s = ParamStore::new(DType::F64, 3);
        let f = SceneFusion::new(&mut s, "fuse", 4, 1).unwrap();
        let frames = Tensor::randn(0f64, 1.0, (2, 3, 4), &Device::Cpu).unwrap();
        let c = Tensor::randn(0f64, 1.0, (2, 1, 4), &Device::Cpu).unwrap();
        let out = f.forward(&frames, &c, false).unwrap();
        let att = out.attention.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(att.iter().all(|&a| a == 1.0));
        let rows = out.v_hat.to_vec3::<f64>().unwrap();
        for batch in &rows {
            for r in batch {
                assert_eq!(r, &batch[0]);
            }
        }
        let empty = Tensor::zeros((2, 0, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(f.forward(&frames, &empty, true).is_err());
    }

    #[test]
    fn hand_computed_fusion() {
        let id = [[1.0, 0.0], [0.0, 1.0]];
        let f = SceneFusion::from_linears(lin(&id), lin(&id), lin(&id), 1);
        let frames = Tensor::new(&[[[1.0f64, 0.0], [0.0, 2.0]]], &Device::Cpu).unwrap();
        let c = Tensor::new(&[[[1.0f64, 1.0], [-1.0, 0.5]]], &Device::Cpu).unwrap();
        let out = f.forward(&frames, &c, false).unwrap();
        let s = 2f64.sqrt();
        // frame 0 scores: [1, -1] / √2; frame 1 scores: [2, 1] / √2
        let w = |a: f64, b: f64| {
            let (ea, eb) = ((a / s).exp(), (b / s).exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let v = out.v_hat.to_vec3::<f64>().unwrap();
        for (row, (p, q)) in [w(1.0, -1.0), w(2.0, 1.0)].into_iter().enumerate() {
            let expect = [p * 1.0 + q * -1.0, p * 1.0 + q * 0.5];
            assert!((v[0][row][0] - expect[0]).abs() < 1e-12);
            assert!((v[0][row][1] - expect[1]).abs() < 1e-12);
        }
        let res = f.forward(&frames, &c, true).unwrap().v_hat.to_vec3::<f64>().unwrap();
        assert!((res[0][1][1] - (2.0 + v[0][1][1])).abs() < 1e-12);
    }
}
