//! Text-video pairs, the word-level vocabulary, and the synthetic bias-injected generator.

mod io;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{load_corpus, load_vocabulary, save_corpus, save_vocabulary, split_corpus, Split};
pub use synth::{
    generate_synthetic_corpus, SynthSpec, SyntheticCorpus, ACTIVITY_WORDS, BIAS_WORDS,
    ENTITY_WORDS,
};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Ordered token list; a token's id is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from plain words. Reserved tokens are prepended and
    /// repeated words keep their first id.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len() as u32);
            tokens.push(w);
        }
        Self { tokens, index }
    }

    /// Rebuilds a vocabulary from its full token list (reserved tokens included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED.iter()).any(|(a, b)| a != b)
        {
            return Err(Error::Format(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabularyFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabularyFile = serde_json::from_str(s)?;
        Self::from_tokens(f.tokens)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Token ids padded to a fixed length, with a mask over the non-PAD positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

impl Caption {
    /// Wraps already padded ids; the mask is derived from PAD positions.
    pub fn from_ids(token_ids: Vec<u32>) -> Result<Self> {
        if token_ids.first() != Some(&BOS) {
            return Err(Error::InvalidArgument("caption must start with BOS".into()));
        }
        let n_real = token_ids.iter().take_while(|&&t| t != PAD).count();
        if token_ids[n_real..].iter().any(|&t| t != PAD) {
            return Err(Error::InvalidArgument(
                "caption has tokens after padding".into(),
            ));
        }
        if token_ids[n_real - 1] != EOS {
            return Err(Error::InvalidArgument(
                "last non-PAD token must be EOS".into(),
            ));
        }
        let attention_mask = token_ids.iter().map(|&t| t != PAD).collect();
        Ok(Self {
            token_ids,
            attention_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-PAD tokens, BOS and EOS included.
    pub fn n_real(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }
}

/// Lowercased, whitespace-normalized form of `text`.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace tokenizer: BOS, words (lowercased, UNK when unknown), EOS, then PAD up to `max_len`.
/// Long inputs are truncated so that the final real token is always EOS.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Caption> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(
        text.split_whitespace()
            .take(max_len - 2)
            .map(|w| vocab.lookup(&w.to_lowercase())),
    );
    ids.push(EOS);
    ids.resize(max_len, PAD);
    let attention_mask = ids.iter().map(|&t| t != PAD).collect();
    Ok(Caption {
        token_ids: ids,
        attention_mask,
    })
}

/// Inverse of [`tokenize`] for in-vocabulary text: the words between BOS and EOS.
pub fn detokenize(caption: &Caption, vocab: &Vocabulary) -> String {
    caption
        .token_ids
        .iter()
        .filter(|&&t| t != PAD && t != BOS && t != EOS)
        .map(|&t| vocab.token_of(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Raw per-frame features, row-major `n_f x d_raw`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub n_f: usize,
    pub d_raw: usize,
    pub frames: Vec<f32>,
}

impl VideoClip {
    pub fn new(n_f: usize, d_raw: usize, frames: Vec<f32>) -> Result<Self> {
        if frames.len() != n_f * d_raw {
            return Err(Error::DimensionMismatch(format!(
                "expected {n_f}x{d_raw} frame values, got {}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("frame features must be finite".into()));
        }
        Ok(Self { n_f, d_raw, frames })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.d_raw..(i + 1) * self.d_raw]
    }
}

/// Ground truth kept for synthetic pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub entity_ids: Vec<usize>,
    pub activity_ids: Vec<usize>,
    /// Positions in `token_ids` (BOS is position 0) holding bias tokens.
    pub bias_positions: Vec<usize>,
    pub background_id: usize,
    pub annotator_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub id: String,
    pub clip: VideoClip,
    pub caption: Caption,
    pub meta: Option<PairMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub n_f: usize,
    pub d_raw: usize,
    pub n_t: usize,
    pub vocab_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub pairs: Vec<CorpusPair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_synthetic(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.meta.is_some())
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            header: self.header.clone(),
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }

    /// Checks shapes against the header and the id/metadata invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let with_meta = self.pairs.iter().filter(|p| p.meta.is_some()).count();
        if with_meta != 0 && with_meta != self.pairs.len() {
            return Err(Error::Format(
                "metadata must be present on all pairs or none".into(),
            ));
        }
        for p in &self.pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Format(format!("duplicate pair id {:?}", p.id)));
            }
            if p.clip.n_f != self.header.n_f || p.clip.d_raw != self.header.d_raw {
                return Err(Error::DimensionMismatch(format!(
                    "pair {}: clip is {}x{}, header says {}x{}",
                    p.id, p.clip.n_f, p.clip.d_raw, self.header.n_f, self.header.d_raw
                )));
            }
            if p.caption.len() != self.header.n_t {
                return Err(Error::DimensionMismatch(format!(
                    "pair {}: caption has {} tokens, header says {}",
                    p.id,
                    p.caption.len(),
                    self.header.n_t
                )));
            }
        }
        Ok(())
    }

    /// Re-tokenizes every caption under another vocabulary (used for transfer evaluation).
    pub fn retokenize(&self, from: &Vocabulary, to: &Vocabulary) -> Result<Corpus> {
        let mut out = self.clone();
        out.header.vocab_sha256 = to.sha256();
        for p in &mut out.pairs {
            let text = detokenize(&p.caption, from);
            p.caption = tokenize(&text, to, self.header.n_t)?;
        }
        Ok(out)
    }
}

/// How strongly a synthetic corpus is biased.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasProfile {
    /// Fraction of frame-feature energy given to the distractor background.
    pub visual_dominance: f64,
    /// Probability that an optional caption slot holds a subjective/emotive token.
    pub textual_bias_rate: f64,
    pub seed: u64,
}

impl BiasProfile {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("visual_dominance", self.visual_dominance),
            ("textual_bias_rate", self.textual_bias_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidProfile(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl Default for BiasProfile {
    fn default() -> Self {
        Self {
            visual_dominance: 0.6,
            textual_bias_rate: 0.4,
            seed: 0,
        }
    }
}
