use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Caption, Corpus, CorpusHeader, CorpusPair, PairMeta, VideoClip, Vocabulary};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    header: CorpusHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    id: String,
    frames: Vec<f32>,
    tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<PairMeta>,
}

/// Writes the corpus as JSONL: a header record followed by one record per pair.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &HeaderRecord {
            header: corpus.header.clone(),
        },
    )?;
    w.write_all(b"\n")?;
    for p in &corpus.pairs {
        let rec = PairRecord {
            id: p.id.clone(),
            frames: p.clip.frames.clone(),
            tokens: p.caption.token_ids.clone(),
            meta: p.meta.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header: Option<CorpusHeader> = None;
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            let rec: HeaderRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
            header = Some(rec.header);
            continue;
        };
        let rec: PairRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if rec.frames.len() != h.n_f * h.d_raw {
            return Err(Error::DimensionMismatch(format!(
                "{}: line {line_no}: {} frame values, header implies {}x{}",
                path.display(),
                rec.frames.len(),
                h.n_f,
                h.d_raw
            )));
        }
        if rec.tokens.len() != h.n_t {
            return Err(Error::DimensionMismatch(format!(
                "{}: line {line_no}: {} tokens, header says n_t = {}",
                path.display(),
                rec.tokens.len(),
                h.n_t
            )));
        }
        let clip = VideoClip::new(h.n_f, h.d_raw, rec.frames)
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        let caption =
            Caption::from_ids(rec.tokens).map_err(|e| parse_err(line_no, e.to_string()))?;
        pairs.push(CorpusPair {
            id: rec.id,
            clip,
            caption,
            meta: rec.meta,
        });
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header record".into()))?;
    let corpus = Corpus { header, pairs };
    corpus.validate()?;
    Ok(corpus)
}

pub fn save_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<()> {
    std::fs::write(path, vocab.to_json())?;
    Ok(())
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    Vocabulary::from_json(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

fn id_bucket(id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap()) % 5
}

/// 80/20 split by id hash. The eval side is capped at `eval_size`
/// (corpus order); capped-out pairs are not used for training either, so
/// membership depends on the id alone.
pub fn split_corpus(corpus: &Corpus, eval_size: usize) -> Split {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, p) in corpus.pairs.iter().enumerate() {
        if id_bucket(&p.id) == 0 {
            if eval.len() < eval_size {
                eval.push(i);
            }
        } else {
            train.push(i);
        }
    }
    Split { train, eval }
}
