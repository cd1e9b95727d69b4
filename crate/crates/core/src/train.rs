//! Data preparation, the contrastive pre-training stage, scene-element
//! context, and the optimization loop.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{
    detokenize, generate_synthetic_corpus, load_corpus, load_vocabulary, split_corpus, BiasProfile, Caption, Corpus,
    Split, VideoClip, Vocabulary,
};
use crate::encoders::{clip_tensor, mean_pool, Batch, DataDims, TextPhraseEncoder};
use crate::error::{Error, Result};
use crate::model::{BimaModel, LossValues, StepSettings, Toggles, LOG_TAU};
use crate::nn::ParamStore;
use crate::scene_elements::{elements_for, select_top_k_rows, CachedSelection, SceneSelection};
use crate::taxonomy::{build_dictionary, Lexicon, TaxonomyDictionary};
use crate::textual_debias::{noise_rng, Noise};

pub const TRAIN_DTYPE: DType = DType::F32;

/// A corpus with its vocabulary, lexicon and split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub lexicon: Lexicon,
    pub split: Split,
}

impl PreparedData {
    pub fn dims(&self) -> DataDims {
        DataDims {
            vocab_size: self.vocab.len(),
            n_t: self.corpus.header.n_t,
            n_f: self.corpus.header.n_f,
            d_raw: self.corpus.header.d_raw,
        }
    }

    pub fn train(&self) -> Corpus {
        self.corpus.subset(&self.split.train)
    }

    pub fn eval(&self) -> Corpus {
        self.corpus.subset(&self.split.eval)
    }
}

/// Generates the synthetic corpus for `profile` (world fixed by the run seed)
/// or loads the configured one.
pub fn prepare_data(cfg: &RunConfig, profile: &BiasProfile) -> Result<PreparedData> {
    let c = &cfg.corpus;
    let (corpus, vocab, lexicon) = match &c.path {
        Some(path) => {
            let corpus = load_corpus(path)?;
            let vocab_path = c
                .vocab
                .as_ref()
                .ok_or_else(|| Error::Config("corpus.vocab is required with corpus.path".into()))?;
            let vocab = load_vocabulary(vocab_path)?;
            if vocab.sha256() != corpus.header.vocab_sha256 {
                return Err(Error::Config(format!(
                    "vocabulary {} does not match the corpus header",
                    vocab_path.display()
                )));
            }
            let lexicon = match &c.lexicon {
                Some(p) => Lexicon::load(p)?,
                None => c.synth.lexicon(),
            };
            (corpus, vocab, lexicon)
        }
        None => {
            let s = generate_synthetic_corpus(c.n_pairs, profile, &c.synth, cfg.seed)?;
            (s.corpus, s.vocab, s.lexicon)
        }
    };
    let split = split_corpus(&corpus, c.eval_size);
    if split.train.len() < cfg.train.batch_size {
        return Err(Error::Config(format!(
            "only {} training pairs for batch size {}",
            split.train.len(),
            cfg.train.batch_size
        )));
    }
    Ok(PreparedData {
        corpus,
        vocab,
        lexicon,
        split,
    })
}

/// Linear warmup then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Mean of every loss term over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub infonce: f64,
    pub cap: f64,
    pub rec: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,lr,infonce,cap,rec,kl,total\n");
    for e in curve {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.infonce, e.cap, e.rec, e.kl, e.total
        ));
    }
    s
}

/// Per-video scene selections computed once with the frozen matcher.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub selections: Vec<SceneSelection>,
    pub ids: Vec<String>,
}

impl SceneContext {
    /// Stacked `(B, κ, d)` element tensor for the given rows, or `None` when
    /// both element kinds are off.
    pub fn elements(&self, rows: &[usize], toggles: &Toggles, dtype: DType) -> Result<Option<Tensor>> {
        if !toggles.uses_elements() {
            return Ok(None);
        }
        let mut data = Vec::new();
        let mut shape = (0, 0);
        for &r in rows {
            let e = elements_for(&self.selections[r], toggles.elements())?
                .expect("element toggles checked above");
            shape = e.c.dim();
            data.extend(e.c.iter().map(|&v| v as f32));
        }
        Ok(Some(
            Tensor::from_vec(data, (rows.len(), shape.0, shape.1), &Device::Cpu)?.to_dtype(dtype)?,
        ))
    }

    pub fn cache_entries(&self, toggles: &Toggles) -> Result<Vec<CachedSelection>> {
        self.selections
            .iter()
            .zip(&self.ids)
            .map(|(s, id)| {
                let g = match elements_for(s, toggles.elements())? {
                    Some(e) => e.g,
                    None => 0.0,
                };
                Ok(CachedSelection {
                    id: id.clone(),
                    entity_ids: s.entity_ids.clone(),
                    activity_ids: s.activity_ids.clone(),
                    g,
                })
            })
            .collect()
    }
}

/// Frozen pre-trained tower pair used for dictionary embedding and scene selection.
#[derive(Debug, Clone)]
pub struct Matcher {
    pub store: ParamStore,
    pub model: BimaModel,
}

impl Matcher {
    pub fn new(store: &ParamStore, cfg: &RunConfig, dims: &DataDims) -> Result<Self> {
        let mut frozen = store.deep_copy(TRAIN_DTYPE)?.frozen_view();
        let model = BimaModel::new(&mut frozen, &cfg.model, dims, cfg.train.tau_init)?;
        Ok(Self { store: frozen, model })
    }

    /// Mean-pooled frame embeddings `(N, d)` of the clips.
    pub fn pooled_videos(&self, clips: &[&VideoClip]) -> Result<Array2<f64>> {
        let d = self.model.config.d;
        let mut out = Array2::zeros((clips.len(), d));
        for (ci, chunk) in clips.chunks(256).enumerate() {
            let frames = clip_tensor(chunk, TRAIN_DTYPE, &Device::Cpu)?;
            let pooled = mean_pool(&self.model.video.forward(&frames)?)?
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?;
            for (i, row) in pooled.into_iter().enumerate() {
                out.row_mut(ci * 256 + i).assign(&Array1::from(row));
            }
        }
        Ok(out)
    }

    pub fn embed_dictionary(&self, dict: &TaxonomyDictionary, vocab: &Vocabulary) -> Result<TaxonomyDictionary> {
        let enc = TextPhraseEncoder {
            encoder: &self.model.text,
            vocab,
            n_t: self.model.dims.n_t,
            d: self.model.config.d,
            dtype: TRAIN_DTYPE,
        };
        dict.embed(&enc, self.model.config.d)
    }

    pub fn scene_context(&self, corpus: &Corpus, dict: &TaxonomyDictionary, kappa: usize) -> Result<SceneContext> {
        let emb = dict
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dictionary has no embeddings".into()))?;
        let ent = emb.entities.mapv(f64::from);
        let act = emb.activities.mapv(f64::from);
        let clips: Vec<&VideoClip> = corpus.pairs.iter().map(|p| &p.clip).collect();
        let pooled = self.pooled_videos(&clips)?;
        let selections = pooled
            .outer_iter()
            .map(|v| select_top_k_rows(v, ent.view(), act.view(), kappa))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneContext {
            selections,
            ids: corpus.pairs.iter().map(|p| p.id.clone()).collect(),
        })
    }
}

/// Builds the taxonomy dictionary from the training captions.
pub fn dictionary_from_corpus(corpus: &Corpus, vocab: &Vocabulary, lexicon: &Lexicon) -> Result<TaxonomyDictionary> {
    let texts: Vec<String> = corpus.pairs.iter().map(|p| detokenize(&p.caption, vocab)).collect();
    build_dictionary(
        texts.iter().map(String::as_str),
        lexicon,
        vec![format!("corpus:{}", corpus.header.vocab_sha256)],
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub curve: Vec<EpochLoss>,
}

/// Everything a training run needs besides the config.
pub struct TrainInputs<'a> {
    pub corpus: &'a Corpus,
    pub dims: DataDims,
    /// Scene context aligned with `corpus.pairs`; required when elements are on.
    pub scene: Option<&'a SceneContext>,
    /// Initial values for matching tensors (the pre-trained stage).
    pub init: Option<&'a ParamStore>,
}

fn batch_eps(seed: u64, epoch: usize, rows: &[usize], k: usize, d: usize, dtype: DType) -> Result<Vec<Tensor>> {
    let mut per_sample = vec![Vec::with_capacity(rows.len() * d); k];
    for &r in rows {
        let mut rng = noise_rng(seed, epoch as u64, r as u64);
        for s in per_sample.iter_mut() {
            s.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
    }
    per_sample
        .into_iter()
        .map(|v| Ok(Tensor::from_vec(v, (rows.len(), d), &Device::Cpu)?.to_dtype(dtype)?))
        .collect()
}

/// Runs `epochs` epochs of the total objective under `toggles`.
pub fn train_model(cfg: &RunConfig, toggles: &Toggles, epochs: usize, inputs: &TrainInputs<'_>) -> Result<TrainOutcome> {
    let t = &cfg.train;
    let mut store = ParamStore::new(TRAIN_DTYPE, cfg.seed);
    let model = BimaModel::new(&mut store, &cfg.model, &inputs.dims, t.tau_init)?;
    if let Some(init) = inputs.init {
        store.copy_from(init)?;
    }
    if toggles.uses_elements() && inputs.scene.is_none() {
        return Err(Error::InvalidArgument("scene elements enabled without a scene context".into()));
    }
    let n = inputs.corpus.len();
    let b = t.batch_size;
    let steps_per_epoch = n / b;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!("{n} pairs for batch size {b}")));
    }
    let schedule = LrSchedule {
        base: t.lr,
        min: t.min_lr,
        warmup_steps: (t.warmup_epochs * steps_per_epoch as f64).round() as usize,
        total_steps: epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: 1e-8,
            weight_decay: t.weight_decay,
        },
    )?;
    let settings = StepSettings {
        toggles: *toggles,
        weights: t.weights,
        reduction: t.cap_loss_reduction,
        k_samples: t.k_samples,
    };
    let log_tau = store.var(LOG_TAU).expect("registered by the model").clone();
    let (lt_min, lt_max) = (t.tau_min.ln(), t.tau_max.ln());

    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        let mut lr = t.lr;
        for rows in order.chunks_exact(b) {
            lr = schedule.at(step);
            opt.set_learning_rate(lr);
            let caps: Vec<&Caption> = rows.iter().map(|&r| &inputs.corpus.pairs[r].caption).collect();
            let clips: Vec<&VideoClip> = rows.iter().map(|&r| &inputs.corpus.pairs[r].clip).collect();
            let batch = Batch::new(&caps, &clips, inputs.dims.vocab_size, TRAIN_DTYPE, &Device::Cpu)?;
            let elements = match inputs.scene {
                Some(sc) => sc.elements(rows, toggles, TRAIN_DTYPE)?,
                None => None,
            };
            let eps = batch_eps(cfg.seed, epoch, rows, t.k_samples, cfg.model.d, TRAIN_DTYPE)?;
            let losses = model.step_losses(&batch, elements.as_ref(), Noise::Fixed(&eps), &settings)?;
            let values = losses.values()?;
            if !values.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    breakdown: values.to_string(),
                });
            }
            opt.backward_step(&losses.total)?;
            log_tau.set(&log_tau.as_tensor().clamp(lt_min, lt_max)?)?;
            sums.infonce += values.infonce;
            sums.cap += values.cap;
            sums.rec += values.rec;
            sums.kl += values.kl;
            sums.total += values.total;
            step += 1;
        }
        let k = steps_per_epoch as f64;
        let e = EpochLoss {
            epoch,
            lr,
            infonce: sums.infonce / k,
            cap: sums.cap / k,
            rec: sums.rec / k,
            kl: sums.kl / k,
            total: sums.total / k,
        };
        log::info!(
            "epoch {epoch}: total={:.4} infonce={:.4} cap={:.4} rec={:.4} kl={:.4}",
            e.total,
            e.infonce,
            e.cap,
            e.rec,
            e.kl
        );
        curve.push(e);
    }
    Ok(TrainOutcome { store, curve })
}

/// The contrastive stage shared by every model of a run.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub store: ParamStore,
    pub curve: Vec<EpochLoss>,
    pub dictionary: TaxonomyDictionary,
}

pub fn pretrain(cfg: &RunConfig, data: &PreparedData) -> Result<Pretrained> {
    let train = data.train();
    let dims = data.dims();
    let out = train_model(
        cfg,
        &Toggles::baseline(),
        cfg.train.pretrain_epochs,
        &TrainInputs {
            corpus: &train,
            dims,
            scene: None,
            init: None,
        },
    )?;
    let matcher = Matcher::new(&out.store, cfg, &dims)?;
    let dict = dictionary_from_corpus(&train, &data.vocab, &data.lexicon)?;
    let dictionary = matcher.embed_dictionary(&dict, &data.vocab)?;
    Ok(Pretrained {
        store: out.store,
        curve: out.curve,
        dictionary,
    })
}

/// A trained model together with what evaluation needs.
#[derive(Debug, Clone)]
pub struct Trained {
    pub store: ParamStore,
    pub matcher: ParamStore,
    pub dictionary: TaxonomyDictionary,
    pub vocab: Vocabulary,
    pub config: RunConfig,
    pub dims: DataDims,
    pub curve: Vec<EpochLoss>,
    pub scene_cache: Vec<CachedSelection>,
}

/// Trains `cfg.toggles` for `cfg.train.epochs`, starting from the pre-trained stage.
pub fn train_from_pretrained(cfg: &RunConfig, data: &PreparedData, pre: &Pretrained) -> Result<Trained> {
    let train = data.train();
    let dims = data.dims();
    let matcher = Matcher::new(&pre.store, cfg, &dims)?;
    let scene = if cfg.toggles.uses_elements() {
        Some(matcher.scene_context(&train, &pre.dictionary, cfg.train.kappa)?)
    } else {
        None
    };
    let out = train_model(
        cfg,
        &cfg.toggles,
        cfg.train.epochs,
        &TrainInputs {
            corpus: &train,
            dims,
            scene: scene.as_ref(),
            init: Some(&pre.store),
        },
    )?;
    let scene_cache = match &scene {
        Some(s) => s.cache_entries(&cfg.toggles)?,
        None => Vec::new(),
    };
    Ok(Trained {
        store: out.store,
        matcher: pre.store.clone(),
        dictionary: pre.dictionary.clone(),
        vocab: data.vocab.clone(),
        config: cfg.clone(),
        dims,
        curve: out.curve,
        scene_cache,
    })
}

/// Pre-trains and trains in one go.
pub fn train(cfg: &RunConfig, data: &PreparedData) -> Result<Trained> {
    let pre = pretrain(cfg, data)?;
    train_from_pretrained(cfg, data, &pre)
}

pub fn write_loss_curve(path: &Path, curve: &[EpochLoss]) -> Result<()> {
    std::fs::write(path, loss_curve_csv(curve))?;
    Ok(())
}
