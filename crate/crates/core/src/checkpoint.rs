//! Checkpoint directory layout: tensor bundles for the model and the frozen
//! matcher, the embedded dictionary, the vocabulary, the resolved config and a
//! JSON manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_tensors, write_tensors};
use crate::config::RunConfig;
use crate::corpus::{load_vocabulary, save_vocabulary};
use crate::encoders::DataDims;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scene_elements::save_selection_cache;
use crate::taxonomy::TaxonomyDictionary;
use crate::train::{write_loss_curve, Trained, TRAIN_DTYPE};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub vocab_size: usize,
    pub n_t: usize,
    pub n_f: usize,
    pub d_raw: usize,
    pub tensors: Vec<TensorEntry>,
}

fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, &store.to_named_tensors()?)?;
    w.flush()?;
    Ok(())
}

fn load_store(path: &Path, seed: u64) -> Result<ParamStore> {
    let tensors = read_tensors(&mut BufReader::new(File::open(path)?))?;
    ParamStore::from_named_tensors(&tensors, TRAIN_DTYPE, seed)
}

pub fn write_version(dir: &Path) -> Result<()> {
    std::fs::write(dir.join("VERSION"), format!("{VERSION}\n"))?;
    Ok(())
}

/// Writes `resolved_config.toml` and `VERSION` into an output directory.
pub fn write_run_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml()?)?;
    write_version(dir)
}

pub fn save_checkpoint(dir: &Path, t: &Trained) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_store(&dir.join("model.bin"), &t.store)?;
    save_store(&dir.join("matcher.bin"), &t.matcher)?;
    t.dictionary.save(&dir.join("dictionary.json"))?;
    save_vocabulary(&t.vocab, &dir.join("vocab.json"))?;
    write_run_snapshot(dir, &t.config)?;
    write_loss_curve(&dir.join("loss_curve.csv"), &t.curve)?;
    if !t.scene_cache.is_empty() {
        save_selection_cache(&dir.join("scene_selection.jsonl"), &t.scene_cache)?;
    }
    let manifest = Manifest {
        version: VERSION.to_string(),
        config_hash: t.config.hash()?,
        vocab_size: t.dims.vocab_size,
        n_t: t.dims.n_t,
        n_f: t.dims.n_f,
        d_raw: t.dims.d_raw,
        tensors: t
            .store
            .to_named_tensors()?
            .into_iter()
            .map(|n| TensorEntry {
                name: n.name,
                shape: n.shape,
            })
            .collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Trained> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let config = RunConfig::from_toml_str(&std::fs::read_to_string(dir.join("resolved_config.toml"))?)?;
    if config.hash()? != manifest.config_hash {
        return Err(Error::Format(format!(
            "{}: config hash does not match the manifest",
            dir.display()
        )));
    }
    let store = load_store(&dir.join("model.bin"), config.seed)?;
    for t in &manifest.tensors {
        match store.var(&t.name) {
            Some(v) if v.dims() == t.shape.as_slice() => {}
            _ => {
                return Err(Error::Format(format!(
                    "tensor {} missing or misshaped in model.bin",
                    t.name
                )))
            }
        }
    }
    let matcher = load_store(&dir.join("matcher.bin"), config.seed)?;
    let dictionary = TaxonomyDictionary::load(&dir.join("dictionary.json"))?;
    let vocab = load_vocabulary(&dir.join("vocab.json"))?;
    if vocab.len() != manifest.vocab_size {
        return Err(Error::Format("vocabulary size differs from the manifest".into()));
    }
    Ok(Trained {
        store,
        matcher,
        dictionary,
        vocab,
        config,
        dims: DataDims {
            vocab_size: manifest.vocab_size,
            n_t: manifest.n_t,
            n_f: manifest.n_f,
            d_raw: manifest.d_raw,
        },
        curve: Vec::new(),
        scene_cache: Vec::new(),
    })
}
