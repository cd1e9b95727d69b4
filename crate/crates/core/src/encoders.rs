//! Toy text and video towers, mean pooling, and the phrase encoder used to
//! embed the taxonomy dictionary.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Caption, VideoClip, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{key_padding_bias, Activation, EncoderBlock, Init, LayerNorm, Linear, ParamStore};
use crate::taxonomy::PhraseEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    /// Heads of the scene-element fusion attention.
    pub fuse_heads: usize,
    /// Depth M of the captioning head.
    pub cap_blocks: usize,
    pub rec_blocks: usize,
    pub gate_activation: Activation,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            fuse_heads: 1,
            cap_blocks: 2,
            rec_blocks: 1,
            gate_activation: Activation::Gelu,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.fuse_heads == 0 || self.d % self.fuse_heads != 0 {
            return bad(format!("d = {} is not divisible by fuse_heads = {}", self.d, self.fuse_heads));
        }
        if self.cap_blocks == 0 || self.rec_blocks == 0 || self.blocks == 0 {
            return bad("block counts must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1".into());
        }
        Ok(())
    }
}

/// Dimensions fixed by the data rather than by the model config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataDims {
    pub vocab_size: usize,
    pub n_t: usize,
    pub n_f: usize,
    pub d_raw: usize,
}

/// Host-side batch tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, N_t)` u32 token ids.
    pub ids: Tensor,
    /// `(B, N_t)` 1.0 on non-PAD positions.
    pub mask: Tensor,
    /// `(B, N_f, d_raw)`.
    pub frames: Tensor,
}

pub fn caption_tensors(
    captions: &[&Caption],
    vocab_size: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let b = captions.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty caption batch".into()));
    }
    let n_t = captions[0].len();
    let mut ids = Vec::with_capacity(b * n_t);
    let mut mask = Vec::with_capacity(b * n_t);
    for c in captions {
        if c.len() != n_t {
            return Err(Error::DimensionMismatch(format!(
                "caption of length {} in a batch of length {n_t}",
                c.len()
            )));
        }
        for (&id, &m) in c.token_ids.iter().zip(&c.attention_mask) {
            if id as usize >= vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary of size {vocab_size}"
                )));
            }
            ids.push(id);
            mask.push(if m { 1.0f32 } else { 0.0 });
        }
    }
    Ok((
        Tensor::from_vec(ids, (b, n_t), device)?,
        Tensor::from_vec(mask, (b, n_t), device)?.to_dtype(dtype)?,
    ))
}

pub fn clip_tensor(clips: &[&VideoClip], dtype: DType, device: &Device) -> Result<Tensor> {
    let b = clips.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty clip batch".into()));
    }
    let (n_f, d_raw) = (clips[0].n_f, clips[0].d_raw);
    let mut data = Vec::with_capacity(b * n_f * d_raw);
    for c in clips {
        if c.n_f != n_f || c.d_raw != d_raw {
            return Err(Error::DimensionMismatch(format!(
                "clip {}x{} in a batch of {n_f}x{d_raw}",
                c.n_f, c.d_raw
            )));
        }
        data.extend_from_slice(&c.frames);
    }
    Ok(Tensor::from_vec(data, (b, n_f, d_raw), device)?.to_dtype(dtype)?)
}

impl Batch {
    pub fn new(
        captions: &[&Caption],
        clips: &[&VideoClip],
        vocab_size: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let (ids, mask) = caption_tensors(captions, vocab_size, dtype, device)?;
        Ok(Self {
            ids,
            mask,
            frames: clip_tensor(clips, dtype, device)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncodedText {
    /// `(B, N_t, d)`, zero on PAD positions.
    pub tokens: Tensor,
    /// `(B, d)`.
    pub cls: Tensor,
    /// `(B, N_t)`.
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncodedVideo {
    /// `(B, N_f, d)`.
    pub frames: Tensor,
}

/// Learned CLS token prepended to the word embeddings, pre-norm transformer blocks.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    embed: Tensor,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
    vocab_size: usize,
    n_t: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, dims: &DataDims) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            embed: store.get("text.embed", &[dims.vocab_size, d], Init::Normal(1.0))?,
            cls: store.get("text.cls", &[1, 1, d], Init::Normal(1.0))?,
            pos: store.get("text.pos", &[1, dims.n_t + 1, d], Init::Normal(cfg.init_std))?,
            blocks: (0..cfg.blocks)
                .map(|i| {
                    EncoderBlock::new(
                        store,
                        &format!("text.block{i}"),
                        d,
                        cfg.heads,
                        d * cfg.mlp_ratio,
                        cfg.activation,
                    )
                })
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(store, "text.ln_f", d)?,
            vocab_size: dims.vocab_size,
            n_t: dims.n_t,
        })
    }

    pub fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<EncodedText> {
        let (b, n_t) = ids.dims2()?;
        if n_t > self.n_t {
            return Err(Error::DimensionMismatch(format!(
                "caption length {n_t} exceeds N_t = {}",
                self.n_t
            )));
        }
        let max_id = ids.flatten_all()?.max(0)?.to_scalar::<u32>()?;
        if max_id as usize >= self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {max_id} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        let d = self.embed.dim(1)?;
        let words = self
            .embed
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, n_t, d))?;
        let cls = self.cls.broadcast_as((b, 1, d))?;
        let x = Tensor::cat(&[&cls, &words], 1)?;
        let x = x.broadcast_add(&self.pos.narrow(1, 0, n_t + 1)?)?;
        let ones = Tensor::ones((b, 1), mask.dtype(), mask.device())?;
        let bias = key_padding_bias(&Tensor::cat(&[&ones, mask], 1)?)?;
        let mut h = x;
        for blk in &self.blocks {
            h = blk.forward(&h, Some(&bias))?;
        }
        let h = self.ln_f.forward(&h)?;
        let cls = h.narrow(1, 0, 1)?.squeeze(1)?;
        let tokens = h.narrow(1, 1, n_t)?.broadcast_mul(&mask.unsqueeze(2)?)?;
        Ok(EncodedText {
            tokens,
            cls,
            mask: mask.clone(),
        })
    }
}

/// Linear frame projection plus learned positions, then transformer blocks.
#[derive(Debug, Clone)]
pub struct VideoEncoder {
    proj: Linear,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
    n_f: usize,
    d_raw: usize,
}

impl VideoEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, dims: &DataDims) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            proj: Linear::new(store, "video.proj", dims.d_raw, d)?,
            pos: store.get("video.pos", &[1, dims.n_f, d], Init::Normal(cfg.init_std))?,
            blocks: (0..cfg.blocks)
                .map(|i| {
                    EncoderBlock::new(
                        store,
                        &format!("video.block{i}"),
                        d,
                        cfg.heads,
                        d * cfg.mlp_ratio,
                        cfg.activation,
                    )
                })
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(store, "video.ln_f", d)?,
            n_f: dims.n_f,
            d_raw: dims.d_raw,
        })
    }

    pub fn forward(&self, frames: &Tensor) -> Result<EncodedVideo> {
        let (_, n_f, d_raw) = frames.dims3()?;
        if n_f != self.n_f || d_raw != self.d_raw {
            return Err(Error::DimensionMismatch(format!(
                "clip is {n_f}x{d_raw}, encoder expects {}x{}",
                self.n_f, self.d_raw
            )));
        }
        let mut h = self.proj.forward(frames)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            h = blk.forward(&h, None)?;
        }
        Ok(EncodedVideo {
            frames: self.ln_f.forward(&h)?,
        })
    }
}

/// Mean over the frame axis: `(B, N_f, d) -> (B, d)`.
pub fn mean_pool(ev: &EncodedVideo) -> Result<Tensor> {
    if ev.frames.dim(1)? == 0 {
        return Err(Error::InvalidArgument("cannot pool zero frames".into()));
    }
    Ok(ev.frames.mean(1)?)
}

/// Mean of the non-PAD token embeddings: `(B, d)`.
pub fn masked_token_mean(et: &EncodedText) -> Result<Tensor> {
    let n = et.mask.sum_keepdim(D::Minus1)?;
    Ok(et.tokens.sum(1)?.broadcast_div(&n)?)
}

/// Embeds phrases with a text tower; a phrase's global vector is the mean of
/// its non-PAD token embeddings.
pub struct TextPhraseEncoder<'a> {
    pub encoder: &'a TextEncoder,
    pub vocab: &'a Vocabulary,
    pub n_t: usize,
    pub d: usize,
    pub dtype: DType,
}

impl PhraseEncoder for TextPhraseEncoder<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn encode_phrases(&self, phrases: &[&str]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(phrases.len());
        for chunk in phrases.chunks(256) {
            let caps = chunk
                .iter()
                .map(|p| tokenize(p, self.vocab, self.n_t))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Caption> = caps.iter().collect();
            let (ids, mask) =
                caption_tensors(&refs, self.vocab.len(), self.dtype, &Device::Cpu)?;
            let et = self.encoder.forward(&ids, &mask)?;
            let pooled = masked_token_mean(&et)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            out.extend(pooled);
        }
        Ok(out)
    }
}
