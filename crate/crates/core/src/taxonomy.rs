//! Scene taxonomy dictionary: entity (noun) and activity (verb) phrases.
//!
//! Phrases come from a deterministic part-of-speech grammar over a word-class
//! lexicon:
//!
//! * entities are maximal runs of `determiner? adjective* noun+`;
//! * activities are a verb followed by a particle, or by the head noun of the
//!   noun phrase that immediately follows it, or the bare verb otherwise.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio::{load_matrix, save_matrix};
use crate::corpus::normalize_text;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosClass {
    Determiner,
    Adjective,
    Noun,
    Verb,
    Particle,
    Other,
}

/// Word to part-of-speech class. Words not listed are [`PosClass::Other`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon(BTreeMap<String, PosClass>);

impl Lexicon {
    pub fn insert(&mut self, word: &str, class: PosClass) {
        self.0.insert(word.to_lowercase(), class);
    }

    pub fn class_of(&self, word: &str) -> PosClass {
        self.0.get(word).copied().unwrap_or(PosClass::Other)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl<S: AsRef<str>> FromIterator<(S, PosClass)> for Lexicon {
    fn from_iter<I: IntoIterator<Item = (S, PosClass)>>(iter: I) -> Self {
        let mut lex = Lexicon::default();
        for (w, c) in iter {
            lex.insert(w.as_ref(), c);
        }
        lex
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhraseKind {
    Entity,
    Activity,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Phrase {
    pub text: String,
    pub kind: PhraseKind,
}

impl Phrase {
    pub fn new(text: &str, kind: PhraseKind) -> Result<Self> {
        let text = normalize_text(text);
        if text.is_empty() {
            return Err(Error::InvalidArgument("empty phrase".into()));
        }
        Ok(Self { text, kind })
    }
}

/// End (exclusive) of the noun phrase starting at `start`, if there is one.
fn noun_phrase_end(classes: &[PosClass], start: usize) -> Option<usize> {
    let mut j = start;
    if classes.get(j) == Some(&PosClass::Determiner) {
        j += 1;
    }
    while classes.get(j) == Some(&PosClass::Adjective) {
        j += 1;
    }
    let nouns_start = j;
    while classes.get(j) == Some(&PosClass::Noun) {
        j += 1;
    }
    (j > nouns_start).then_some(j)
}

/// Noun and verb phrases of one caption, in order of appearance, without repeats.
pub fn extract_phrases(caption: &str, lexicon: &Lexicon) -> (Vec<Phrase>, Vec<Phrase>) {
    let text = normalize_text(caption);
    let words: Vec<&str> = text.split_whitespace().collect();
    let classes: Vec<PosClass> = words.iter().map(|w| lexicon.class_of(w)).collect();

    let mut nouns = Vec::new();
    let mut seen = HashSet::new();
    let mut i = 0;
    while i < words.len() {
        match noun_phrase_end(&classes, i) {
            Some(end) => {
                let t = words[i..end].join(" ");
                if seen.insert(t.clone()) {
                    nouns.push(Phrase {
                        text: t,
                        kind: PhraseKind::Entity,
                    });
                }
                i = end;
            }
            None => i += 1,
        }
    }

    let mut verbs = Vec::new();
    let mut seen = HashSet::new();
    for (i, class) in classes.iter().enumerate() {
        if *class != PosClass::Verb {
            continue;
        }
        let t = if classes.get(i + 1) == Some(&PosClass::Particle) {
            format!("{} {}", words[i], words[i + 1])
        } else if let Some(end) = noun_phrase_end(&classes, i + 1) {
            format!("{} {}", words[i], words[end - 1])
        } else {
            words[i].to_string()
        };
        if seen.insert(t.clone()) {
            verbs.push(Phrase {
                text: t,
                kind: PhraseKind::Activity,
            });
        }
    }
    (nouns, verbs)
}

/// Unit-norm phrase embeddings, one row per phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryEmbeddings {
    pub entities: Array2<f32>,
    pub activities: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyDictionary {
    pub entities: Vec<Phrase>,
    pub activities: Vec<Phrase>,
    pub provenance: Vec<String>,
    pub embeddings: Option<DictionaryEmbeddings>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryFile {
    entities: Vec<String>,
    activities: Vec<String>,
    provenance: Vec<String>,
}

/// Union of the phrases of all captions, deduplicated globally in first-occurrence order.
pub fn build_dictionary<'a, I>(
    captions: I,
    lexicon: &Lexicon,
    provenance: Vec<String>,
) -> Result<TaxonomyDictionary>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut entities = Vec::new();
    let mut activities = Vec::new();
    let mut seen_e = HashSet::new();
    let mut seen_a = HashSet::new();
    let mut n_captions = 0usize;
    for caption in captions {
        n_captions += 1;
        let (nouns, verbs) = extract_phrases(caption, lexicon);
        for p in nouns {
            if seen_e.insert(p.text.clone()) {
                entities.push(p);
            }
        }
        for p in verbs {
            if seen_a.insert(p.text.clone()) {
                activities.push(p);
            }
        }
    }
    if n_captions == 0 {
        return Err(Error::InvalidArgument("no captions given".into()));
    }
    if entities.is_empty() && activities.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    Ok(TaxonomyDictionary {
        entities,
        activities,
        provenance,
        embeddings: None,
    })
}

/// Anything that maps phrases to one global vector each.
pub trait PhraseEncoder {
    fn dim(&self) -> usize;
    fn encode_phrases(&self, phrases: &[&str]) -> Result<Vec<Vec<f32>>>;
}

fn normalized_rows(rows: Vec<Vec<f32>>, dim: usize) -> Result<Array2<f32>> {
    let n = rows.len();
    let mut m = Array2::zeros((n, dim));
    for (i, row) in rows.into_iter().enumerate() {
        if row.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "encoder returned a {}-vector, expected {dim}",
                row.len()
            )));
        }
        let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        for (k, v) in row.into_iter().enumerate() {
            m[(i, k)] = (v as f64 / norm) as f32;
        }
    }
    Ok(m)
}

impl TaxonomyDictionary {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_activities(&self) -> usize {
        self.activities.len()
    }

    /// Encodes every phrase once and stores L2-normalized rows.
    pub fn embed<E: PhraseEncoder + ?Sized>(&self, encoder: &E, expected_dim: usize) -> Result<Self> {
        if encoder.dim() != expected_dim {
            return Err(Error::DimensionMismatch(format!(
                "encoder dim {} does not match configured d = {expected_dim}",
                encoder.dim()
            )));
        }
        let encode = |phrases: &[Phrase]| -> Result<Array2<f32>> {
            let texts: Vec<&str> = phrases.iter().map(|p| p.text.as_str()).collect();
            if texts.is_empty() {
                return Ok(Array2::zeros((0, expected_dim)));
            }
            normalized_rows(encoder.encode_phrases(&texts)?, expected_dim)
        };
        let mut out = self.clone();
        out.embeddings = Some(DictionaryEmbeddings {
            entities: encode(&self.entities)?,
            activities: encode(&self.activities)?,
        });
        Ok(out)
    }

    /// Writes `path` (JSON phrase lists) and, when embedded, `path` with an `.emb`
    /// extension holding entity rows followed by activity rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DictionaryFile {
            entities: self.entities.iter().map(|p| p.text.clone()).collect(),
            activities: self.activities.iter().map(|p| p.text.clone()).collect(),
            provenance: self.provenance.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        if let Some(emb) = &self.embeddings {
            let all = ndarray::concatenate(
                ndarray::Axis(0),
                &[emb.entities.view(), emb.activities.view()],
            )
            .map_err(|e| Error::Format(e.to_string()))?;
            save_matrix(&path.with_extension("emb"), &all)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: DictionaryFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let to_phrases = |v: Vec<String>, kind| -> Result<Vec<Phrase>> {
            let mut seen = HashSet::new();
            v.into_iter()
                .map(|t| {
                    let p = Phrase::new(&t, kind)?;
                    if !seen.insert(p.text.clone()) {
                        return Err(Error::Format(format!("duplicate phrase {:?}", p.text)));
                    }
                    Ok(p)
                })
                .collect()
        };
        let entities = to_phrases(file.entities, PhraseKind::Entity)?;
        let activities = to_phrases(file.activities, PhraseKind::Activity)?;
        let emb_path = path.with_extension("emb");
        let embeddings = if emb_path.exists() {
            let all = load_matrix(&emb_path)?;
            if all.nrows() != entities.len() + activities.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} embedding rows for {} phrases",
                    all.nrows(),
                    entities.len() + activities.len()
                )));
            }
            let (e, a) = all.view().split_at(ndarray::Axis(0), entities.len());
            Some(DictionaryEmbeddings {
                entities: e.to_owned(),
                activities: a.to_owned(),
            })
        } else {
            None
        };
        Ok(Self {
            entities,
            activities,
            provenance: file.provenance,
            embeddings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> Lexicon {
        [
            ("a", PosClass::Determiner),
            ("the", PosClass::Determiner),
            ("man", PosClass::Noun),
            ("mango", PosClass::Noun),
            ("kitchen", PosClass::Noun),
            ("ripe", PosClass::Adjective),
            ("slices", PosClass::Verb),
            ("running", PosClass::Verb),
            ("picks", PosClass::Verb),
            ("up", PosClass::Particle),
        ]
        .into_iter()
        .collect()
    }

    fn texts(p: &[Phrase]) -> Vec<&str> {
        p.iter().map(|p| p.text.as_str()).collect()
    }

    #[test]
    fn mango_caption() {
        let (n, v) = extract_phrases("a man slices a ripe mango", &lexicon());
        assert_eq!(texts(&n), ["a man", "a ripe mango"]);
        assert_eq!(texts(&v), ["slices mango"]);
    }

    #[test]
    fn empty_caption() {
        let (n, v) = extract_phrases("", &lexicon());
        assert!(n.is_empty() && v.is_empty());
    }

    #[test]
    fn repeated_verb_once() {
        let (n, v) = extract_phrases("running running running", &lexicon());
        assert!(n.is_empty());
        assert_eq!(texts(&v), ["running"]);
    }

    #[test]
    fn particle_and_unknown_words() {
        let (n, v) = extract_phrases("The man picks up the mango in the kitchen", &lexicon());
        assert_eq!(texts(&n), ["the man", "the mango", "the kitchen"]);
        assert_eq!(texts(&v), ["picks up"]);
    }

    #[test]
    fn dangling_determiner_is_skipped() {
        let (n, _) = extract_phrases("a the ripe", &lexicon());
        assert!(n.is_empty());
        let (n, _) = extract_phrases("a ripe ripe mango", &lexicon());
        assert_eq!(texts(&n), ["a ripe ripe mango"]);
    }

    #[test]
    fn dictionary_dedups_across_captions() {
        let d = build_dictionary(
            ["a man slices a ripe mango", "a man runs"],
            &lexicon(),
            vec!["test".into()],
        )
        .unwrap();
        assert_eq!(texts(&d.entities), ["a man", "a ripe mango"]);
        assert_eq!(d.provenance, ["test"]);
    }

    #[test]
    fn empty_dictionary_error() {
        assert!(matches!(
            build_dictionary(["zzz qqq"], &lexicon(), vec![]),
            Err(Error::EmptyDictionary)
        ));
        assert!(build_dictionary(std::iter::empty::<&str>(), &lexicon(), vec![]).is_err());
    }

    struct HashEncoder(usize);

    impl PhraseEncoder for HashEncoder {
        fn dim(&self) -> usize {
            self.0
        }
        fn encode_phrases(&self, phrases: &[&str]) -> Result<Vec<Vec<f32>>> {
            Ok(phrases
                .iter()
                .map(|p| {
                    (0..self.0)
                        .map(|k| {
                            p.bytes()
                                .enumerate()
                                .map(|(i, b)| ((b as usize * (k + 3) + i) % 17) as f32 - 8.0)
                                .sum()
                        })
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_pure() {
        let d = TaxonomyDictionary {
            entities: vec![Phrase::new("running", PhraseKind::Entity).unwrap()],
            activities: vec![Phrase::new("running", PhraseKind::Activity).unwrap()],
            provenance: vec![],
            embeddings: None,
        };
        let e = d.embed(&HashEncoder(6), 6).unwrap();
        let emb = e.embeddings.as_ref().unwrap();
        assert_eq!(emb.entities.dim(), (1, 6));
        let row = emb.entities.row(0);
        let self_cos: f32 = row.dot(&row);
        assert!((self_cos - 1.0).abs() < 1e-6);
        assert_eq!(emb.entities.row(0), emb.activities.row(0));
        assert_eq!(e.entities, d.entities);
        assert!(matches!(
            d.embed(&HashEncoder(6), 8),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn save_load_with_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.json");
        let d = build_dictionary(["a man slices a ripe mango"], &lexicon(), vec!["c".into()])
            .unwrap()
            .embed(&HashEncoder(4), 4)
            .unwrap();
        d.save(&path).unwrap();
        assert!(path.with_extension("emb").exists());
        assert_eq!(TaxonomyDictionary::load(&path).unwrap(), d);
    }
}
