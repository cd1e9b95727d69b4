//! Weighted token interaction (WTI) similarity, symmetric InfoNCE and the total objective.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, log_softmax_last, softmax_last, Activation, Mlp, ParamStore, MASK_NEG};

/// Offset applied to cosines at masked text positions so they never win a max.
const MASKED_COS_SHIFT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cap: f64,
    pub rec: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cap: 0.3,
            rec: 0.5,
            kl: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("cap", self.cap), ("rec", self.rec), ("kl", self.kl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {n} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Learned per-token gates for the text and video sides.
#[derive(Debug, Clone)]
pub struct Wti {
    text_gate: Mlp,
    video_gate: Mlp,
}

impl Wti {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            text_gate: Mlp::new(store, &format!("{name}.text_gate"), d, d, 1, act)?,
            video_gate: Mlp::new(store, &format!("{name}.video_gate"), d, d, 1, act)?,
        })
    }

    /// Softmax of the text gate over non-masked tokens: `(Bt, N_t)`.
    pub fn text_weights(&self, text: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let logits = self.text_gate.forward(text)?.squeeze(D::Minus1)?;
        let logits = (logits + ((mask - 1.0)? * -MASK_NEG)?)?;
        softmax_last(&logits)
    }

    /// Softmax of the video gate over frames: `(Bv, N_f)`.
    pub fn video_weights(&self, video: &Tensor) -> Result<Tensor> {
        softmax_last(&self.video_gate.forward(video)?.squeeze(D::Minus1)?)
    }

    /// S with rows = texts `(Bt, N_t, d)` and columns = videos `(Bv, N_f, d)`.
    pub fn similarity(&self, text: &Tensor, mask: &Tensor, video: &Tensor) -> Result<Tensor> {
        let wt = self.text_weights(text, mask)?;
        let wv = self.video_weights(video)?;
        wti_with_weights(text, mask, video, &wt, &wv)
    }
}

/// WTI given explicit gate weights.
pub fn wti_with_weights(text: &Tensor, mask: &Tensor, video: &Tensor, wt: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let (bt, nt, d) = text.dims3()?;
    let (bv, nf, dv) = video.dims3()?;
    if d != dv {
        return Err(Error::DimensionMismatch(format!("text d = {d}, video d = {dv}")));
    }
    let counts = mask.sum(D::Minus1)?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if counts.iter().any(|&c| c < 1.0) {
        return Err(Error::InvalidArgument("text with every token masked".into()));
    }
    let tn = l2_normalize(text)?.reshape((bt * nt, d))?;
    let vn = l2_normalize(video)?.reshape((bv * nf, d))?;
    let cos = tn
        .matmul(&vn.t()?)?
        .reshape((bt, nt, bv, nf))?
        .transpose(1, 2)?
        .contiguous()?;
    // text side: each token's best frame
    let t_best = cos.max(D::Minus1)?;
    let t_side = t_best.broadcast_mul(&wt.unsqueeze(1)?)?.sum(D::Minus1)?;
    // video side: each frame's best unmasked token
    let shift = ((mask - 1.0)? * MASKED_COS_SHIFT)?.reshape((bt, 1, nt, 1))?;
    let v_best = cos.broadcast_add(&shift)?.max(2)?;
    let v_side = v_best.broadcast_mul(&wv.unsqueeze(0)?)?.sum(D::Minus1)?;
    Ok(((t_side + v_side)? * 0.5)?)
}

/// Symmetric InfoNCE of `S·τ`; the diagonal holds the positives.
pub fn infonce_loss(sim: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let (b, b2) = sim.dims2()?;
    if b != b2 || b == 0 {
        return Err(Error::InvalidArgument(format!("similarity matrix is {b}x{b2}")));
    }
    let finite = sim
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::InvalidArgument("similarity matrix has non-finite entries".into()));
    }
    let logits = sim.broadcast_mul(tau)?;
    let eye = Tensor::eye(b, sim.dtype(), sim.device())?;
    let t2v = (log_softmax_last(&logits)? * &eye)?.sum_all()?;
    let v2t = (log_softmax_last(&logits.t()?)? * &eye)?.sum_all()?;
    Ok(((t2v + v2t)? * (-0.5 / b as f64))?)
}

/// L = L_InfoNCE + λ_Cap·L_Cap + λ_Rec·L_Rec + λ_KL·L_KL.
pub fn total_loss(infonce: &Tensor, cap: &Tensor, rec: &Tensor, kl: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((((infonce + (cap * w.cap)?)? + (rec * w.rec)?)? + (kl * w.kl)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t2(v: &[&[f64]]) -> Tensor {
        let rows: Vec<Vec<f64>> = v.iter().map(|r| r.to_vec()).collect();
        Tensor::new(rows, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn infonce_cases() {
        let one = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        assert!(scalar(&infonce_loss(&t2(&[&[0.7]]), &one).unwrap()).abs() < 1e-12);
        let c = Tensor::full(0.3f64, (4, 4), &Device::Cpu).unwrap();
        assert!((scalar(&infonce_loss(&c, &one).unwrap()) - 4f64.ln()).abs() < 1e-12);
        let s = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((scalar(&infonce_loss(&s, &one).unwrap()) - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
        let bad = t2(&[&[f64::NAN, 0.0], &[0.0, 1.0]]);
        assert!(infonce_loss(&bad, &one).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let w = LossWeights::default();
        let l = total_loss(&s(1.0), &s(2.0), &s(3.0), &s(4.0), &w).unwrap();
        assert!((scalar(&l) - 3.1004).abs() < 1e-12);
        let zero = LossWeights { cap: 0.0, rec: 0.0, kl: 0.0 };
        assert_eq!(scalar(&total_loss(&s(1.5), &s(2.0), &s(3.0), &s(4.0), &zero).unwrap()), 1.5);
    }

    #[test]
    fn wti_single_token_single_frame_is_cosine() {
        let text = Tensor::new(&[[[1.0f64, 2.0, 0.0]]], &Device::Cpu).unwrap();
        let video = Tensor::new(&[[[2.0f64, 1.0, 2.0]]], &Device::Cpu).unwrap();
        let mask = Tensor::ones((1, 1), DType::F64, &Device::Cpu).unwrap();
        let mut store = ParamStore::new(DType::F64, 0);
        let wti = Wti::new(&mut store, "wti", 3, Activation::Gelu).unwrap();
        let s = wti.similarity(&text, &mask, &video).unwrap().to_vec2::<f64>().unwrap();
        let cos = 4.0 / (5f64.sqrt() * 3.0);
        assert!((s[0][0] - cos).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_rejected() {
        let text = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let video = Tensor::ones((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let mask = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let w = Tensor::full(0.5f64, (1, 2), &Device::Cpu).unwrap();
        assert!(wti_with_weights(&text, &mask, &video, &w, &w).is_err());
    }
}
