#![allow(dead_code)]

use bima_core::config::RunConfig;
use bima_core::nn::ParamStore;
use candle_core::{Device, Tensor};

pub fn t1(v: &[f64]) -> Tensor {
    Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
}

pub fn t2(rows: &[Vec<f64>]) -> Tensor {
    let c = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), c), &Device::Cpu).unwrap()
}

pub fn t3(v: &[Vec<Vec<f64>>]) -> Tensor {
    let (a, b, c) = (v.len(), v[0].len(), v[0][0].len());
    let flat: Vec<f64> = v.iter().flatten().flatten().copied().collect();
    Tensor::from_vec(flat, (a, b, c), &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Small but complete run config for end-to-end tests.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.corpus.n_pairs = 120;
    c.corpus.eval_size = 16;
    c.model.d = 16;
    c.model.heads = 2;
    c.model.blocks = 1;
    c.model.cap_blocks = 1;
    c.train.batch_size = 8;
    c.train.epochs = 2;
    c.train.pretrain_epochs = 1;
    c.train.kappa = 3;
    c
}

// Plain f64 reference implementations of the layers.

pub struct Lin {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Lin {
    pub fn from_store(s: &ParamStore, name: &str) -> Self {
        let w = s.values(&format!("{name}.weight")).unwrap();
        let b = s.values(&format!("{name}.bias")).unwrap();
        let d_out = b.len();
        let d_in = w.len() / d_out;
        Self {
            w: w.chunks(d_in).map(<[f64]>::to_vec).collect(),
            b,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

pub fn layer_norm(s: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let g = s.values(&format!("{name}.weight")).unwrap();
    let b = s.values(&format!("{name}.bias")).unwrap();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Single-head attention of one query over `keys`.
pub fn attend_one(s: &ParamStore, name: &str, query: &[f64], memory: &[Vec<f64>]) -> Vec<f64> {
    let q = Lin::from_store(s, &format!("{name}.q")).apply(query);
    let k = Lin::from_store(s, &format!("{name}.k"));
    let v = Lin::from_store(s, &format!("{name}.v"));
    let scale = (q.len() as f64).sqrt();
    let scores: Vec<f64> = memory.iter().map(|m| dot(&q, &k.apply(m)) / scale).collect();
    let w = softmax(&scores);
    let mut ctx = vec![0.0; q.len()];
    for (wi, m) in w.iter().zip(memory) {
        for (c, vv) in ctx.iter_mut().zip(v.apply(m)) {
            *c += wi * vv;
        }
    }
    Lin::from_store(s, &format!("{name}.o")).apply(&ctx)
}

/// Teacher-forced loss of a one-block, one-head decoder, rolled out position
/// by position with only the prefix visible at each step.
pub fn decoder_rollout_loss(s: &ParamStore, name: &str, ids: &[u32], memory: &[Vec<f64>]) -> f64 {
    let emb = s.values(&format!("{name}.embed")).unwrap();
    let pos = s.values(&format!("{name}.pos")).unwrap();
    let d = memory[0].len();
    let embed = |t: u32, p: usize| -> Vec<f64> {
        (0..d).map(|k| emb[t as usize * d + k] + pos[p * d + k]).collect()
    };
    let blk = format!("{name}.block0");
    let fc1 = Lin::from_store(s, &format!("{blk}.mlp.fc1"));
    let fc2 = Lin::from_store(s, &format!("{blk}.mlp.fc2"));
    let head = Lin::from_store(s, &format!("{name}.lm_head"));
    let mut nll = 0.0;
    let n_targets = ids.len() - 1;
    for step in 0..n_targets {
        let xs: Vec<Vec<f64>> = (0..=step).map(|p| embed(ids[p], p)).collect();
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm(s, &format!("{blk}.ln1"), x)).collect();
        let x = &xs[step];
        let x = add(x, &attend_one(s, &format!("{blk}.self_attn"), &normed[step], &normed));
        let h = layer_norm(s, &format!("{blk}.ln_cross"), &x);
        let x = add(&x, &attend_one(s, &format!("{blk}.cross_attn"), &h, memory));
        let h = layer_norm(s, &format!("{blk}.ln2"), &x);
        let hidden: Vec<f64> = fc1.apply(&h).into_iter().map(gelu).collect();
        let x = add(&x, &fc2.apply(&hidden));
        let logits = head.apply(&layer_norm(s, &format!("{name}.ln_f"), &x));
        let p = softmax(&logits);
        nll -= p[ids[step + 1] as usize].ln();
    }
    nll / n_targets as f64
}

/// Pessimistic 1-based ranks by sorting every row in full.
pub fn brute_force_ranks(s: &[Vec<f64>]) -> Vec<usize> {
    s.iter()
        .enumerate()
        .map(|(i, row)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            // descending score; the ground truth goes last among equals
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap()
                    .then_with(|| (a == i).cmp(&(b == i)))
            });
            order.iter().position(|&j| j == i).unwrap() + 1
        })
        .collect()
}

pub fn brute_force_recall(s: &[Vec<f64>], k: usize) -> f64 {
    let ranks = brute_force_ranks(s);
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn transpose(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..s[0].len()).map(|j| s.iter().map(|r| r[j]).collect()).collect()
}

/// InfoNCE straight from the definition with a stable log-sum-exp.
pub fn infonce_oracle(s: &[Vec<f64>], tau: f64) -> f64 {
    let b = s.len();
    let lse = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = s[i].iter().map(|x| x * tau).collect();
        let col: Vec<f64> = s.iter().map(|r| r[i] * tau).collect();
        total += (lse(&row) - row[i]) + (lse(&col) - col[i]);
    }
    total / (2.0 * b as f64)
}

/// WTI from explicit max-over-pairs loops.
pub fn wti_oracle(text: &[Vec<f64>], video: &[Vec<f64>], wt: &[f64], wv: &[f64]) -> f64 {
    let t_side: f64 = text
        .iter()
        .zip(wt)
        .map(|(t, w)| w * video.iter().map(|v| cos(t, v)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    let v_side: f64 = video
        .iter()
        .zip(wv)
        .map(|(v, w)| w * text.iter().map(|t| cos(t, v)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    0.5 * (t_side + v_side)
}
