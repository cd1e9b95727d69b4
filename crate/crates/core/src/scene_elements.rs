//! Top-κ scene element selection against the embedded dictionary, the
//! balancing coefficient g, and aggregation into per-video element embeddings.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::TaxonomyDictionary;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSelection {
    pub entity_ids: Vec<usize>,
    pub activity_ids: Vec<usize>,
    /// κ × d rows of the dictionary.
    pub entity_embeddings: Array2<f64>,
    pub activity_embeddings: Array2<f64>,
    pub entity_scores: Vec<f64>,
    pub activity_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneElementEmbedding {
    /// κ × d.
    pub c: Array2<f64>,
    pub g: f64,
}

fn cosine_scores(v: ArrayView1<f64>, rows: ArrayView2<f64>) -> Vec<f64> {
    let vn = v.dot(&v).sqrt();
    rows.outer_iter()
        .map(|r| {
            let rn = r.dot(&r).sqrt();
            let denom = vn * rn;
            if denom > 0.0 {
                r.dot(&v) / denom
            } else {
                0.0
            }
        })
        .collect()
}

/// Indices of the κ largest scores, ties broken by ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn dict_rows(dict: &TaxonomyDictionary) -> Result<(Array2<f64>, Array2<f64>)> {
    let emb = dict
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dictionary has no embeddings".into()))?;
    Ok((
        emb.entities.mapv(f64::from),
        emb.activities.mapv(f64::from),
    ))
}

/// Selects, for each kind independently, the κ phrases most cosine-similar to `v_bar`.
pub fn select_top_k(v_bar: ArrayView1<f64>, dict: &TaxonomyDictionary, kappa: usize) -> Result<SceneSelection> {
    let (ent, act) = dict_rows(dict)?;
    select_top_k_rows(v_bar, ent.view(), act.view(), kappa)
}

pub fn select_top_k_rows(
    v_bar: ArrayView1<f64>,
    entities: ArrayView2<f64>,
    activities: ArrayView2<f64>,
    kappa: usize,
) -> Result<SceneSelection> {
    if kappa == 0 || kappa > entities.nrows() || kappa > activities.nrows() {
        return Err(Error::InvalidArgument(format!(
            "kappa = {kappa} with {} entities and {} activities",
            entities.nrows(),
            activities.nrows()
        )));
    }
    if v_bar.len() != entities.ncols() || v_bar.len() != activities.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "video vector has {} dims, dictionary rows have {}",
            v_bar.len(),
            entities.ncols()
        )));
    }
    let es = cosine_scores(v_bar, entities);
    let as_ = cosine_scores(v_bar, activities);
    let entity_ids = top_k_indices(&es, kappa);
    let activity_ids = top_k_indices(&as_, kappa);
    Ok(SceneSelection {
        entity_embeddings: entities.select(Axis(0), &entity_ids),
        activity_embeddings: activities.select(Axis(0), &activity_ids),
        entity_scores: entity_ids.iter().map(|&i| es[i]).collect(),
        activity_scores: activity_ids.iter().map(|&i| as_[i]).collect(),
        entity_ids,
        activity_ids,
    })
}

/// g = 1 − (1/κ) Σ_l max_j cos(â_l, ê_j), with the inner max over the selected entities.
pub fn balance_coefficient(a_hat: ArrayView2<f64>, e_hat: ArrayView2<f64>) -> Result<f64> {
    if a_hat.nrows() != e_hat.nrows() || a_hat.ncols() != e_hat.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "activities {:?} vs entities {:?}",
            a_hat.shape(),
            e_hat.shape()
        )));
    }
    let kappa = a_hat.nrows();
    if kappa == 0 {
        return Err(Error::InvalidArgument("kappa must be at least 1".into()));
    }
    let total: f64 = a_hat
        .outer_iter()
        .map(|a| {
            cosine_scores(a, e_hat)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(1.0 - total / kappa as f64)
}

/// c = â + g·ê.
pub fn aggregate(a_hat: ArrayView2<f64>, e_hat: ArrayView2<f64>, g: f64) -> Result<SceneElementEmbedding> {
    if a_hat.shape() != e_hat.shape() {
        return Err(Error::DimensionMismatch(format!(
            "activities {:?} vs entities {:?}",
            a_hat.shape(),
            e_hat.shape()
        )));
    }
    Ok(SceneElementEmbedding {
        c: &a_hat + &(&e_hat * g),
        g,
    })
}

/// Which element kinds feed the fusion, and whether g is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElementToggles {
    pub entities: bool,
    pub activities: bool,
    pub coefficient_g: bool,
}

/// Builds the fused element matrix for one video under the toggles; `None` when
/// both kinds are off.
pub fn elements_for(sel: &SceneSelection, t: ElementToggles) -> Result<Option<SceneElementEmbedding>> {
    let a = sel.activity_embeddings.view();
    let e = sel.entity_embeddings.view();
    Ok(match (t.entities, t.activities) {
        (false, false) => None,
        (true, false) => Some(SceneElementEmbedding { c: e.to_owned(), g: 1.0 }),
        (false, true) => Some(SceneElementEmbedding { c: a.to_owned(), g: 0.0 }),
        (true, true) => {
            let g = if t.coefficient_g { balance_coefficient(a, e)? } else { 1.0 };
            Some(aggregate(a, e, g)?)
        }
    })
}

/// One line of the selection cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CachedSelection {
    pub id: String,
    pub entity_ids: Vec<usize>,
    pub activity_ids: Vec<usize>,
    pub g: f64,
}

pub fn save_selection_cache(path: &Path, entries: &[CachedSelection]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_selection_cache(path: &Path) -> Result<BTreeMap<String, CachedSelection>> {
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: CachedSelection = serde_json::from_str(&line).map_err(|err| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: err.to_string(),
        })?;
        out.insert(e.id.clone(), e);
    }
    Ok(out)
}

/// Re-materializes a cached selection from the dictionary rows.
pub fn selection_from_cache(
    cached: &CachedSelection,
    entities: ArrayView2<f64>,
    activities: ArrayView2<f64>,
    v_bar: ArrayView1<f64>,
) -> Result<SceneSelection> {
    let check = |ids: &[usize], n: usize| {
        ids.iter().all(|&i| i < n).then_some(()).ok_or_else(|| {
            Error::Format(format!("cached selection for {} has out-of-range ids", cached.id))
        })
    };
    check(&cached.entity_ids, entities.nrows())?;
    check(&cached.activity_ids, activities.nrows())?;
    let es = cosine_scores(v_bar, entities);
    let as_ = cosine_scores(v_bar, activities);
    Ok(SceneSelection {
        entity_embeddings: entities.select(Axis(0), &cached.entity_ids),
        activity_embeddings: activities.select(Axis(0), &cached.activity_ids),
        entity_scores: cached.entity_ids.iter().map(|&i| es[i]).collect(),
        activity_scores: cached.activity_ids.iter().map(|&i| as_[i]).collect(),
        entity_ids: cached.entity_ids.clone(),
        activity_ids: cached.activity_ids.clone(),
    })
}

pub fn to_array1(v: &[f32]) -> Array1<f64> {
    v.iter().map(|&x| x as f64).collect()
}
