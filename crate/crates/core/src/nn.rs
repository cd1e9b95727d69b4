//! Small transformer toolkit on top of candle: a seeded parameter store,
//! linear/norm layers, multi-head attention and pre-norm blocks.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{NamedTensor, StoredDType};
use crate::error::{Error, Result};

/// Additive bias used for masked attention logits.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
    /// Square identity matrix.
    Identity,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the store seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Named trainable tensors. Initial values depend only on (seed, name), so the
/// order in which modules register parameters does not matter.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
    frozen: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("n_tensors", &self.vars.len())
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
            frozen: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// A view sharing storage whose tensors are detached from the autograd graph.
    pub fn frozen_view(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    fn init_values(&self, name: &str, shape: &[usize], init: Init) -> Result<Vec<f64>> {
        let n: usize = shape.iter().product();
        Ok(match init {
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Identity => {
                if shape.len() != 2 || shape[0] != shape[1] {
                    return Err(Error::InvalidArgument(format!(
                        "identity init needs a square matrix, got {shape:?}"
                    )));
                }
                let mut v = vec![0.0; n];
                for i in 0..shape[0] {
                    v[i * shape[0] + i] = 1.0;
                }
                v
            }
        })
    }

    /// Returns the tensor named `name`, creating it on first use.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(self.expose(v));
        }
        let values = self.init_values(name, shape, init)?;
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = self.expose(&var);
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn expose(&self, v: &Var) -> Tensor {
        if self.frozen {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Overwrites (or creates) a tensor from raw values.
    pub fn set_values(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        match self.vars.get(name) {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::DimensionMismatch(format!(
                        "parameter {name} has shape {:?}, got {shape:?}",
                        v.dims()
                    )));
                }
                v.set(&t)?;
            }
            None => {
                self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
            }
        }
        Ok(())
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        Ok(v.as_tensor()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    /// Independent copy (new storage) in the requested dtype.
    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, v) in &self.vars {
            let t = v.as_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        Ok(Self {
            vars,
            dtype,
            device: self.device.clone(),
            seed: self.seed,
            frozen: false,
        })
    }

    /// Copies values of every tensor of `other` that also exists here.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, src) in &other.vars {
            if let Some(dst) = self.vars.get(name) {
                if dst.dims() != src.dims() {
                    return Err(Error::DimensionMismatch(format!(
                        "parameter {name}: {:?} vs {:?}",
                        dst.dims(),
                        src.dims()
                    )));
                }
                dst.set(&src.as_tensor().to_dtype(self.dtype)?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_named_tensors(&self) -> Result<Vec<NamedTensor>> {
        let stored = match self.dtype {
            DType::F64 => StoredDType::F64,
            _ => StoredDType::F32,
        };
        self.vars
            .iter()
            .map(|(name, v)| {
                Ok(NamedTensor {
                    name: name.clone(),
                    dtype: stored,
                    shape: v.dims().to_vec(),
                    values: v
                        .as_tensor()
                        .to_dtype(DType::F64)?
                        .flatten_all()?
                        .to_vec1::<f64>()?,
                })
            })
            .collect()
    }

    pub fn from_named_tensors(tensors: &[NamedTensor], dtype: DType, seed: u64) -> Result<Self> {
        let mut store = Self::new(dtype, seed);
        for t in tensors {
            store.set_values(&t.name, &t.shape, &t.values)?;
        }
        Ok(store)
    }

    /// Largest absolute difference between the tensors of two stores with identical names.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, v) in &self.vars {
            let o = other
                .vars
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing {name}")))?;
            let d = (v.as_tensor().to_dtype(DType::F64)? - o.as_tensor().to_dtype(DType::F64)?)?
                .abs()?
                .flatten_all()?
                .max(0)?
                .to_scalar::<f64>()?;
            worst = worst.max(d);
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.contiguous()?.apply_op1(Gelu)?,
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
        })
    }
}

const SQRT_TWO_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

/// tanh-approximation GELU with a single-pass derivative. Candle's built-in
/// backward chains a dozen tensor ops with rounded constants.
struct Gelu;

/// Elementwise derivative of [`Gelu`], no backward of its own.
struct GeluGrad;

fn gelu_f64(v: f64) -> f64 {
    0.5 * v * (1.0 + (SQRT_TWO_OVER_PI * v * (1.0 + GELU_C * v * v)).tanh())
}

fn gelu_grad_f64(v: f64) -> f64 {
    let t = (SQRT_TWO_OVER_PI * v * (1.0 + GELU_C * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * SQRT_TWO_OVER_PI * (1.0 + 3.0 * GELU_C * v * v)
}

/// tanh through one `exp`, about four times cheaper than `f32::tanh`. Absolute
/// error stays within 2e-7; only `1 ± t` is used, so the cancellation near 0 is harmless.
fn tanh_f32(y: f32) -> f32 {
    1.0 - 2.0 / ((2.0 * y).exp() + 1.0)
}

fn gelu_f32(v: f32) -> f32 {
    let (s, c) = (SQRT_TWO_OVER_PI as f32, GELU_C as f32);
    0.5 * v * (1.0 + tanh_f32(s * v * (1.0 + c * v * v)))
}

fn gelu_grad_f32(v: f32) -> f32 {
    let (s, c) = (SQRT_TWO_OVER_PI as f32, GELU_C as f32);
    let t = tanh_f32(s * v * (1.0 + c * v * v));
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * s * (1.0 + 3.0 * c * v * v)
}

fn map_contiguous(
    name: &'static str,
    storage: &CpuStorage,
    layout: &Layout,
    f32_fn: fn(f32) -> f32,
    f64_fn: fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let Some((start, end)) = layout.contiguous_offsets() else {
        candle_core::bail!("{name} expects a contiguous input")
    };
    let out = match storage {
        CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| f32_fn(x)).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| f64_fn(x)).collect()),
        _ => candle_core::bail!("{name}: only f32 and f64 are supported"),
    };
    Ok((out, layout.shape().clone()))
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-fused"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_contiguous(self.name(), storage, layout, gelu_f32, gelu_f64)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = arg.contiguous()?.apply_op1_no_bwd(&GeluGrad)?;
        Ok(Some(grad_res.mul(&d)?))
    }
}

impl CustomOp1 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-grad"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_contiguous(self.name(), storage, layout, gelu_grad_f32, gelu_grad_f64)
    }
}

/// Sums a contiguous `(.., d)` tensor over every axis but the last. Candle
/// reduces leading axes with a divmod per element.
struct SumRows;

impl CustomOp1 for SumRows {
    fn name(&self) -> &'static str {
        "sum-rows"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("sum-rows expects a contiguous input")
        };
        let d = *layout.shape().dims().last().unwrap_or(&1);
        fn fold<T: Copy + std::ops::AddAssign + Default>(v: &[T], d: usize) -> Vec<T> {
            let mut acc = vec![T::default(); d];
            for row in v.chunks_exact(d) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            acc
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(&v[start..end], d)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(&v[start..end], d)),
            _ => candle_core::bail!("sum-rows: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from(d)))
    }
}

fn sum_rows(t: &Tensor) -> candle_core::Result<Tensor> {
    t.contiguous()?.apply_op1_no_bwd(&SumRows)
}

/// `x ∘ v` for a `(.., d)` tensor and a `(d)` vector, where `∘` is `+` or `×`.
#[derive(Clone, Copy)]
enum RowOp {
    Add,
    Mul,
}

impl CustomOp2 for RowOp {
    fn name(&self) -> &'static str {
        match self {
            RowOp::Add => "row-add",
            RowOp::Mul => "row-mul",
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (Some((a0, a1)), Some((b0, b1))) = (l1.contiguous_offsets(), l2.contiguous_offsets()) else {
            candle_core::bail!("{} expects contiguous inputs", self.name())
        };
        let d = b1 - b0;
        if l1.shape().dims().last() != Some(&d) {
            candle_core::bail!("{}: {:?} against a vector of {d}", self.name(), l1.shape())
        }
        fn apply<T: Copy + std::ops::Add<Output = T> + std::ops::Mul<Output = T>>(
            op: RowOp,
            x: &[T],
            v: &[T],
        ) -> Vec<T> {
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(v.len()) {
                match op {
                    RowOp::Add => out.extend(row.iter().zip(v).map(|(&a, &b)| a + b)),
                    RowOp::Mul => out.extend(row.iter().zip(v).map(|(&a, &b)| a * b)),
                }
            }
            out
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(v)) => CpuStorage::F32(apply(*self, &x[a0..a1], &v[b0..b1])),
            (CpuStorage::F64(x), CpuStorage::F64(v)) => CpuStorage::F64(apply(*self, &x[a0..a1], &v[b0..b1])),
            _ => candle_core::bail!("{}: only matching f32 or f64 inputs are supported", self.name()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok(match self {
            RowOp::Add => (Some(grad.clone()), Some(sum_rows(grad)?)),
            RowOp::Mul => (Some(grad.broadcast_mul(v)?), Some(sum_rows(&(grad * x)?)?)),
        })
    }
}

/// `x + b` with `b` broadcast over the leading axes.
pub fn add_row(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, RowOp::Add)?)
}

/// `x * g` with `g` broadcast over the leading axes.
pub fn mul_row(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&g.contiguous()?, RowOp::Mul)?)
}

/// Softmax over the last axis; the max shift is detached since it cancels exactly.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise L2 normalization over the last axis. All-zero rows stay zero.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.get(
            &format!("{name}.weight"),
            &[d_out, d_in],
            Init::Normal(1.0 / (d_in as f64).sqrt()),
        )?;
        let bias = store.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight_init: Init,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[d_out, d_in], weight_init)?;
        let bias = store.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// Applies the map to the last axis of `x` (any rank).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => add_row(&y, b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[d], Init::Ones)?,
            bias: store.get(&format!("{name}.bias"), &[d], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        add_row(&mul_row(&normed, &self.weight)?, &self.bias)
    }
}

/// `(B, L)` 0/1 key mask to an additive `(B, 1, 1, L)` attention bias.
pub fn key_padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, l) = mask.dims2()?;
    Ok(((mask - 1.0)? * -MASK_NEG)?.reshape((b, 1, 1, l))?)
}

/// `(1, 1, L, L)` bias blocking attention to later positions.
pub fn causal_bias(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { MASK_NEG } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (1, 1, len, len), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
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
            o: Linear::new(store, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    /// `query (B, Lq, d)` attends over `memory (B, Lk, d)`; `bias` broadcasts to `(B, H, Lq, Lk)`.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let ctx = attend(&self.q, &self.k, &self.v, self.heads, query, memory, bias)?.0;
        self.o.forward(&ctx)
    }
}

/// Scaled dot-product attention with separate projections; returns the
/// concatenated head outputs and the attention weights `(B, H, Lq, Lk)`.
pub fn attend(
    q: &Linear,
    k: &Linear,
    v: &Linear,
    heads: usize,
    query: &Tensor,
    memory: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, lq, d) = query.dims3()?;
    let lk = memory.dim(1)?;
    let dh = d / heads;
    let split = |t: Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = split(q.forward(query)?, lq)?;
    let kh = split(k.forward(memory)?, lk)?;
    let vh = split(v.forward(memory)?, lk)?;
    let mut scores = (qh.matmul(&kh.t()?)? / (dh as f64).sqrt())?;
    if let Some(bias) = bias {
        scores = scores.broadcast_add(bias)?;
    }
    let weights = softmax_last(&scores)?;
    let ctx = weights
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, lq, d))?;
    Ok((ctx, weights))
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply(&self.fc1.forward(x)?)?)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden, d, act)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention, MLP.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden, d, act)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        self_bias: &Tensor,
        memory: &Tensor,
        memory_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(self_bias))?)?;
        let h = self.ln_cross.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory, memory_bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}
