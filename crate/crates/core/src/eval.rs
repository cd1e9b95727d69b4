//! Retrieval metrics, evaluation of trained models under the different text
//! feature sources, transfer evaluation, sweep reports and embedding dumps.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::save_matrix;
use crate::corpus::{Caption, Corpus, VideoClip};
use crate::encoders::{caption_tensors, clip_tensor};
use crate::error::{Error, Result};
use crate::config::RunConfig;
use crate::model::{BimaModel, FeatureSource, Toggles};
use crate::nn::ParamStore;
use crate::train::{
    prepare_data, pretrain, train_from_pretrained, Matcher, SceneContext, Trained, TRAIN_DTYPE,
};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub rsum: f64,
}

/// 1-based rank of the diagonal entry of every row; tied candidates count as ahead.
pub fn diagonal_ranks(s: &Array2<f64>) -> Vec<usize> {
    s.outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let gt = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v >= gt)
                .count()
        })
        .collect()
}

fn metrics_from_ranks(ranks: &[usize]) -> RetrievalMetrics {
    let n = ranks.len().max(1) as f64;
    let r = |k: usize| 100.0 * ranks.iter().filter(|&&x| x <= k).count() as f64 / n;
    let (r1, r5, r10) = (r(RECALL_KS[0]), r(RECALL_KS[1]), r(RECALL_KS[2]));
    RetrievalMetrics {
        r1,
        r5,
        r10,
        rsum: r1 + r5 + r10,
    }
}

/// Text-to-video metrics from the rows of `s`, video-to-text from its columns.
pub fn recall_at_k(s: &Array2<f64>) -> Result<(RetrievalMetrics, RetrievalMetrics)> {
    if s.nrows() != s.ncols() {
        return Err(Error::InvalidArgument(format!(
            "similarity matrix is {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let t2v = metrics_from_ranks(&diagonal_ranks(s));
    let v2t = metrics_from_ranks(&diagonal_ranks(&s.t().to_owned()));
    Ok((t2v, v2t))
}

/// Feature source as recorded in reports: `content`, `bias` or `mixed(α)`.
pub fn source_label(source: FeatureSource, alpha: Option<f64>) -> String {
    match source {
        FeatureSource::Content => "content".into(),
        FeatureSource::Bias => "bias".into(),
        FeatureSource::Mixed => format!("mixed({})", alpha.unwrap_or(f64::NAN)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t2v: RetrievalMetrics,
    pub v2t: RetrievalMetrics,
    pub config_hash: String,
    pub corpus_id: String,
    pub feature_source: String,
    pub ood: bool,
    pub n_queries: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Content hash of a corpus (header, ids, tokens and frames).
pub fn corpus_id(corpus: &Corpus) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&corpus.header)?);
    for p in &corpus.pairs {
        h.update(p.id.as_bytes());
        for t in &p.caption.token_ids {
            h.update(t.to_le_bytes());
        }
        for f in &p.clip.frames {
            h.update(f.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize())[..16].to_string())
}

/// A trained model loaded for inference (no gradients, no bias sampling).
pub struct Evaluator {
    pub model: BimaModel,
    pub matcher: Matcher,
    pub trained: Trained,
    _store: ParamStore,
}

const CHUNK: usize = 256;

impl Evaluator {
    pub fn new(trained: &Trained) -> Result<Self> {
        let mut store = trained.store.frozen_view();
        let model = BimaModel::new(
            &mut store,
            &trained.config.model,
            &trained.dims,
            trained.config.train.tau_init,
        )?;
        let matcher = Matcher::new(&trained.matcher, &trained.config, &trained.dims)?;
        Ok(Self {
            model,
            matcher,
            trained: trained.clone(),
            _store: store,
        })
    }

    pub fn toggles(&self) -> &Toggles {
        &self.trained.config.toggles
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let d = &self.trained.dims;
        let h = &corpus.header;
        if h.n_f != d.n_f || h.d_raw != d.d_raw || h.n_t != d.n_t {
            return Err(Error::DimensionMismatch(format!(
                "corpus is n_f={} d_raw={} n_t={}, model expects n_f={} d_raw={} n_t={}",
                h.n_f, h.d_raw, h.n_t, d.n_f, d.d_raw, d.n_t
            )));
        }
        if h.vocab_sha256 != self.trained.vocab.sha256() {
            return Err(Error::InvalidArgument(
                "corpus uses a different vocabulary; re-tokenize it first".into(),
            ));
        }
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty evaluation corpus".into()));
        }
        Ok(())
    }

    pub fn scene_context(&self, corpus: &Corpus) -> Result<Option<SceneContext>> {
        if !self.toggles().uses_elements() {
            return Ok(None);
        }
        Ok(Some(self.matcher.scene_context(
            corpus,
            &self.trained.dictionary,
            self.trained.config.train.kappa,
        )?))
    }

    /// Fused frame embeddings `(N, N_f, d)` for every clip.
    pub fn video_features(&self, corpus: &Corpus, scene: Option<&SceneContext>) -> Result<Tensor> {
        let t = *self.toggles();
        let mut parts = Vec::new();
        let rows: Vec<usize> = (0..corpus.len()).collect();
        for chunk in rows.chunks(CHUNK) {
            let clips: Vec<&VideoClip> = chunk.iter().map(|&r| &corpus.pairs[r].clip).collect();
            let frames = clip_tensor(&clips, TRAIN_DTYPE, &Device::Cpu)?;
            let elements = match scene {
                Some(s) => s.elements(chunk, &t, TRAIN_DTYPE)?,
                None => None,
            };
            parts.push(self.model.visual(&frames, elements.as_ref(), t.residual_fuse)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Text token features `(N, N_t, d)` and masks `(N, N_t)`.
    pub fn text_features(&self, corpus: &Corpus, source: FeatureSource, alpha: Option<f64>) -> Result<(Tensor, Tensor)> {
        let mut feats = Vec::new();
        let mut masks = Vec::new();
        for chunk in corpus.pairs.chunks(CHUNK) {
            let caps: Vec<&Caption> = chunk.iter().map(|p| &p.caption).collect();
            let (ids, mask) = caption_tensors(&caps, self.trained.dims.vocab_size, TRAIN_DTYPE, &Device::Cpu)?;
            feats.push(self.model.text_features(&ids, &mask, self.toggles(), source, alpha)?);
            masks.push(mask);
        }
        Ok((Tensor::cat(&feats, 0)?, Tensor::cat(&masks, 0)?))
    }

    /// Full text × video similarity matrix over `corpus`.
    pub fn similarity(&self, corpus: &Corpus, source: FeatureSource, alpha: Option<f64>) -> Result<Array2<f64>> {
        if source == FeatureSource::Mixed && alpha.is_none() {
            return Err(Error::InvalidArgument("mixed features need an alpha".into()));
        }
        self.check_corpus(corpus)?;
        let scene = self.scene_context(corpus)?;
        let video = self.video_features(corpus, scene.as_ref())?;
        self.similarity_with_video(corpus, &video, source, alpha)
    }

    pub fn similarity_with_video(
        &self,
        corpus: &Corpus,
        video: &Tensor,
        source: FeatureSource,
        alpha: Option<f64>,
    ) -> Result<Array2<f64>> {
        let (text, mask) = self.text_features(corpus, source, alpha)?;
        let n = corpus.len();
        let mut out = Array2::zeros((n, n));
        for start in (0..n).step_by(CHUNK) {
            let len = CHUNK.min(n - start);
            let s = self.model.wti.similarity(
                &text.narrow(0, start, len)?,
                &mask.narrow(0, start, len)?,
                video,
            )?;
            for (i, row) in s.to_dtype(DType::F64)?.to_vec2::<f64>()?.into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    out[(start + i, j)] = v;
                }
            }
        }
        Ok(out)
    }

    pub fn report(&self, corpus: &Corpus, s: &Array2<f64>, source: FeatureSource, alpha: Option<f64>, ood: bool) -> Result<EvalReport> {
        let (t2v, v2t) = recall_at_k(s)?;
        Ok(EvalReport {
            t2v,
            v2t,
            config_hash: self.trained.config.hash()?,
            corpus_id: corpus_id(corpus)?,
            feature_source: source_label(source, alpha),
            ood,
            n_queries: corpus.len(),
        })
    }

    pub fn evaluate(&self, corpus: &Corpus, source: FeatureSource, alpha: Option<f64>) -> Result<EvalReport> {
        let s = self.similarity(corpus, source, alpha)?;
        self.report(corpus, &s, source, alpha, false)
    }

    /// Evaluation on a corpus unseen in training; the report is tagged OOD.
    pub fn ood_evaluate(&self, corpus: &Corpus) -> Result<EvalReport> {
        let s = self.similarity(corpus, FeatureSource::Content, None)?;
        self.report(corpus, &s, FeatureSource::Content, None, true)
    }

    /// Reports for several mixing weights sharing one pass over the videos.
    pub fn alpha_sweep(&self, corpus: &Corpus, alphas: &[f64]) -> Result<Vec<EvalReport>> {
        if alphas.is_empty() {
            return Err(Error::InvalidArgument("empty alpha list".into()));
        }
        self.check_corpus(corpus)?;
        let scene = self.scene_context(corpus)?;
        let video = self.video_features(corpus, scene.as_ref())?;
        alphas
            .iter()
            .map(|&a| {
                let s = self.similarity_with_video(corpus, &video, FeatureSource::Mixed, Some(a))?;
                self.report(corpus, &s, FeatureSource::Mixed, Some(a), false)
            })
            .collect()
    }

    /// Per-pair pooled content (content head on t_CLS) and bias mean μ.
    pub fn embeddings(&self, corpus: &Corpus) -> Result<(Array2<f32>, Array2<f32>)> {
        if !self.toggles().textual_debias {
            return Err(Error::InvalidArgument("embedding dump needs the textual debias module".into()));
        }
        let d = self.trained.config.model.d;
        let mut content = Array2::zeros((corpus.len(), d));
        let mut bias = Array2::zeros((corpus.len(), d));
        for (ci, chunk) in corpus.pairs.chunks(CHUNK).enumerate() {
            let caps: Vec<&Caption> = chunk.iter().map(|p| &p.caption).collect();
            let (ids, mask) = caption_tensors(&caps, self.trained.dims.vocab_size, TRAIN_DTYPE, &Device::Cpu)?;
            let et = self.model.encode_text(&ids, &mask)?;
            let cls = self.model.textual.content_cls(&et)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            let mu = self.model.textual.posterior(&et)?.mu.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            for (i, (c, m)) in cls.into_iter().zip(mu).enumerate() {
                for k in 0..d {
                    content[(ci * CHUNK + i, k)] = c[k];
                    bias[(ci * CHUNK + i, k)] = m[k];
                }
            }
        }
        Ok((content, bias))
    }

    /// Fusion attention weights per video and frame, as CSV.
    pub fn attention_csv(&self, corpus: &Corpus) -> Result<String> {
        let scene = self
            .scene_context(corpus)?
            .ok_or_else(|| Error::InvalidArgument("attention dump needs scene elements".into()))?;
        let t = *self.toggles();
        let mut out = String::from("id,head,frame,weights\n");
        let rows: Vec<usize> = (0..corpus.len()).collect();
        for chunk in rows.chunks(CHUNK) {
            let clips: Vec<&VideoClip> = chunk.iter().map(|&r| &corpus.pairs[r].clip).collect();
            let frames = clip_tensor(&clips, TRAIN_DTYPE, &Device::Cpu)?;
            let ev = self.model.video.forward(&frames)?;
            let c = scene.elements(chunk, &t, TRAIN_DTYPE)?.expect("elements are on");
            let att = self
                .model
                .fusion
                .forward(&ev.frames, &c, t.residual_fuse)?
                .attention
                .to_dtype(DType::F64)?;
            let (b, h, nf, _) = att.dims4()?;
            for bi in 0..b {
                for hi in 0..h {
                    let m = att.get(bi)?.get(hi)?.to_vec2::<f64>()?;
                    for (fi, row) in m.iter().enumerate().take(nf) {
                        let w: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                        writeln!(out, "{},{hi},{fi},{}", corpus.pairs[chunk[bi]].id, w.join(" ")).ok();
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One line of a sweep report.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub report: EvalReport,
}

pub const SWEEP_HEADER: &str = "axis,value,direction,r1,r5,r10,rsum,config_hash";

/// CSV with one row per (value, direction).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        for (dir, m) in [("t2v", &r.report.t2v), ("v2t", &r.report.v2t)] {
            writeln!(
                s,
                "{},{},{dir},{:.4},{:.4},{:.4},{:.4},{}",
                r.axis, r.value, m.r1, m.r5, m.r10, m.rsum, r.report.config_hash
            )
            .ok();
        }
    }
    s
}

/// What a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Evaluation-only: text features mixed with the bias mean.
    Alpha,
    /// Number of scene elements per kind; retrains per value.
    Kappa,
    /// Balance coefficient on/off; retrains per value.
    GToggle,
    /// Module presets `exp1` … `exp7`; retrains per value.
    ModuleToggles,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Kappa => "kappa",
            Self::GToggle => "g_toggle",
            Self::ModuleToggles => "module_toggles",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "kappa" => Ok(Self::Kappa),
            "g_toggle" | "g" => Ok(Self::GToggle),
            "module_toggles" | "modules" => Ok(Self::ModuleToggles),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

fn parse_on_off(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected on/off, got {v:?}"))),
    }
}

/// Evaluation split of the configured corpus, or of the shifted profile when `ood`.
pub fn eval_corpus(cfg: &RunConfig, ood: bool) -> Result<Corpus> {
    let profile = if ood { &cfg.corpus.ood_profile } else { &cfg.corpus.profile };
    Ok(prepare_data(cfg, profile)?.eval())
}

/// α sweep over an existing model.
pub fn alpha_sweep_rows(trained: &Trained, corpus: &Corpus, values: &[String]) -> Result<Vec<SweepRow>> {
    let alphas = values
        .iter()
        .map(|v| v.parse::<f64>().map_err(|e| Error::Config(format!("alpha {v:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let ev = Evaluator::new(trained)?;
    Ok(ev
        .alpha_sweep(corpus, &alphas)?
        .into_iter()
        .zip(values)
        .map(|(report, v)| SweepRow {
            axis: SweepAxis::Alpha.name().into(),
            value: v.clone(),
            report,
        })
        .collect())
}

/// Config sweep: one fresh training per value from a shared pre-trained stage,
/// each evaluated with content features on the evaluation split.
pub fn config_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("empty sweep value list".into()));
    }
    let mut cfgs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::Alpha => {
                return Err(Error::Config("the alpha axis sweeps a trained checkpoint".into()))
            }
            SweepAxis::Kappa => {
                c.train.kappa = v.parse().map_err(|e| Error::Config(format!("kappa {v:?}: {e}")))?
            }
            SweepAxis::GToggle => c.toggles.coefficient_g = parse_on_off(v)?,
            SweepAxis::ModuleToggles => c.toggles = Toggles::preset(v)?,
        }
        c.validate()?;
        cfgs.push(c);
    }
    let data = prepare_data(cfg, &cfg.corpus.profile)?;
    let pre = pretrain(cfg, &data)?;
    let eval = data.eval();
    let mut rows = Vec::with_capacity(values.len());
    for (c, v) in cfgs.iter().zip(values) {
        let trained = train_from_pretrained(c, &data, &pre)?;
        let report = Evaluator::new(&trained)?.evaluate(&eval, FeatureSource::Content, None)?;
        rows.push(SweepRow {
            axis: axis.name().into(),
            value: v.clone(),
            report,
        });
    }
    Ok(rows)
}

/// Writes pooled content and bias vectors plus the id list.
pub fn dump_embeddings(dir: &Path, corpus: &Corpus, content: &Array2<f32>, bias: &Array2<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_matrix(&dir.join("content.mat"), content)?;
    save_matrix(&dir.join("bias.mat"), bias)?;
    let ids: Vec<&str> = corpus.pairs.iter().map(|p| p.id.as_str()).collect();
    std::fs::write(dir.join("ids.txt"), ids.join("\n") + "\n")?;
    Ok(())
}
