use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    BiasProfile, Caption, Corpus, CorpusHeader, CorpusPair, PairMeta, VideoClip, Vocabulary,
    BOS, EOS, PAD,
};
use crate::error::{Error, Result};
use crate::taxonomy::{Lexicon, PosClass};

pub const ENTITY_WORDS: &[&str] = &[
    "man", "woman", "dog", "cat", "ball", "car", "bike", "horse", "child", "guitar", "knife",
    "mango", "door", "tree", "boat", "chair", "table", "phone", "book", "cup", "hat", "box",
    "bird", "fish", "rope", "wall", "kite", "drum", "lamp", "bottle", "bag", "shoe", "cake",
    "bowl", "truck", "flower", "window", "ladder", "hammer", "piano",
];

pub const ACTIVITY_WORDS: &[&str] = &[
    "chases", "holds", "throws", "cuts", "carries", "pushes", "pulls", "kicks", "rides",
    "paints", "cleans", "opens", "watches", "feeds", "lifts", "drops", "catches", "washes",
    "drives", "climbs", "follows", "grabs", "shakes", "slices", "builds", "fixes", "hits",
    "touches", "wears", "eats",
];

/// Subjective vocabulary; the first 16 are adjectives, the rest adverbs.
pub const BIAS_WORDS: &[&str] = &[
    "beautiful", "amazing", "boring", "lovely", "terrible", "awesome", "sad", "funny", "weird",
    "nice", "cute", "ugly", "wonderful", "strange", "happy", "annoying", "really", "sadly",
    "honestly", "clearly", "totally", "very", "so", "quite",
];
const N_BIAS_ADJECTIVES: usize = 16;

const DETERMINERS: &[&str] = &["a", "the"];

/// Shape of the synthetic world: latent inventory, clip geometry and caption budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_entities: usize,
    pub n_activities: usize,
    pub n_bias_words: usize,
    pub entities_per_clip: usize,
    pub activities_per_clip: usize,
    pub n_backgrounds: usize,
    pub n_annotators: usize,
    pub words_per_annotator: usize,
    pub n_f: usize,
    pub d_raw: usize,
    pub n_t: usize,
    pub use_determiners: bool,
    pub frame_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_entities: 24,
            n_activities: 16,
            n_bias_words: 24,
            entities_per_clip: 2,
            activities_per_clip: 1,
            n_backgrounds: 8,
            n_annotators: 4,
            words_per_annotator: 6,
            n_f: 8,
            d_raw: 32,
            n_t: 16,
            use_determiners: true,
            frame_noise: 0.1,
        }
    }
}

impl SynthSpec {
    fn content_len(&self) -> usize {
        let det = usize::from(self.use_determiners);
        let ke = self.entities_per_clip;
        let ka = self.activities_per_clip;
        if ke == 0 {
            // verbs only, joined by "and"
            return ka + ka.saturating_sub(1);
        }
        // subject, then per activity: ["and"] verb [object], then trailing "with" entities
        let mut n = 1 + det;
        let objects = (ke - 1).min(ka);
        n += ka + ka.saturating_sub(1) + objects * (1 + det);
        n += (ke - 1 - objects) * (2 + det);
        n
    }

    fn validate(&self) -> Result<()> {
        if self.n_entities > ENTITY_WORDS.len() {
            return Err(Error::VocabularyOverflow(format!(
                "{} entities requested, {} entity words available",
                self.n_entities,
                ENTITY_WORDS.len()
            )));
        }
        if self.n_activities > ACTIVITY_WORDS.len() {
            return Err(Error::VocabularyOverflow(format!(
                "{} activities requested, {} activity words available",
                self.n_activities,
                ACTIVITY_WORDS.len()
            )));
        }
        if self.n_bias_words > BIAS_WORDS.len() {
            return Err(Error::VocabularyOverflow(format!(
                "{} bias words requested, {} available",
                self.n_bias_words,
                BIAS_WORDS.len()
            )));
        }
        if self.entities_per_clip > self.n_entities || self.activities_per_clip > self.n_activities
        {
            return Err(Error::VocabularyOverflow(
                "more latents per clip than latent types".into(),
            ));
        }
        if self.entities_per_clip + self.activities_per_clip == 0 {
            return Err(Error::InvalidArgument("a clip needs at least one latent".into()));
        }
        if self.n_f == 0 || self.d_raw == 0 {
            return Err(Error::InvalidArgument("n_f and d_raw must be positive".into()));
        }
        if self.n_t < 3 || self.content_len() > self.n_t - 2 {
            return Err(Error::InvalidArgument(format!(
                "content needs {} tokens but n_t = {} leaves {}",
                self.content_len(),
                self.n_t,
                self.n_t.saturating_sub(2)
            )));
        }
        if self.n_backgrounds == 0 || self.n_annotators == 0 {
            return Err(Error::InvalidArgument(
                "need at least one background and one annotator".into(),
            ));
        }
        Ok(())
    }

    pub fn vocabulary_words(&self) -> Vec<&'static str> {
        let mut words: Vec<&str> = DETERMINERS.to_vec();
        words.extend(["and", "with"]);
        words.extend(&ENTITY_WORDS[..self.n_entities]);
        words.extend(&ACTIVITY_WORDS[..self.n_activities]);
        words.extend(&BIAS_WORDS[..self.n_bias_words]);
        words
    }

    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::default();
        for d in DETERMINERS {
            lex.insert(d, PosClass::Determiner);
        }
        lex.insert("and", PosClass::Other);
        lex.insert("with", PosClass::Other);
        for w in &ENTITY_WORDS[..self.n_entities] {
            lex.insert(w, PosClass::Noun);
        }
        for w in &ACTIVITY_WORDS[..self.n_activities] {
            lex.insert(w, PosClass::Verb);
        }
        for (i, w) in BIAS_WORDS[..self.n_bias_words].iter().enumerate() {
            let class = if i < N_BIAS_ADJECTIVES {
                PosClass::Adjective
            } else {
                PosClass::Other
            };
            lex.insert(w, class);
        }
        lex
    }
}

pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub lexicon: Lexicon,
}

struct World {
    entities: Vec<Vec<f64>>,
    /// Start and end prototype per activity; frames interpolate between them.
    activities: Vec<(Vec<f64>, Vec<f64>)>,
    annotator_words: Vec<Vec<usize>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn rms_normalize(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

impl World {
    fn new(spec: &SynthSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entities = (0..spec.n_entities)
            .map(|_| gaussian_vec(&mut rng, spec.d_raw))
            .collect();
        let activities = (0..spec.n_activities)
            .map(|_| {
                (
                    gaussian_vec(&mut rng, spec.d_raw),
                    gaussian_vec(&mut rng, spec.d_raw),
                )
            })
            .collect();
        let per = spec.words_per_annotator.min(spec.n_bias_words);
        let annotator_words = (0..spec.n_annotators)
            .map(|_| {
                if per == 0 {
                    Vec::new()
                } else {
                    sample(&mut rng, spec.n_bias_words, per).into_vec()
                }
            })
            .collect();
        Self {
            entities,
            activities,
            annotator_words,
        }
    }
}

/// Generates `n_pairs` text-video pairs.
///
/// `seed` fixes the latent world (prototypes, annotator styles) so corpora drawn
/// with different profiles share one latent space; `profile.seed` drives the
/// per-pair sampling and the background set.
pub fn generate_synthetic_corpus(
    n_pairs: usize,
    profile: &BiasProfile,
    spec: &SynthSpec,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be at least 1".into()));
    }
    profile.validate()?;
    spec.validate()?;
    if profile.textual_bias_rate > 0.0 && (spec.n_bias_words == 0 || spec.words_per_annotator == 0)
    {
        return Err(Error::InvalidArgument(
            "textual bias requested without bias words".into(),
        ));
    }

    let vocab = Vocabulary::from_words(spec.vocabulary_words());
    let lexicon = spec.lexicon();
    let world = World::new(spec, seed);

    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x9E37_79B9_7F4A_7C15);
    let backgrounds: Vec<Vec<f64>> = (0..spec.n_backgrounds)
        .map(|_| gaussian_vec(&mut rng, spec.d_raw))
        .collect();

    let content_w = (1.0 - profile.visual_dominance).sqrt();
    let distract_w = profile.visual_dominance.sqrt();
    let slots = spec.n_t - 2;

    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let entity_ids = sample(&mut rng, spec.n_entities, spec.entities_per_clip).into_vec();
        let activity_ids = sample(&mut rng, spec.n_activities, spec.activities_per_clip).into_vec();
        let background_id = rng.random_range(0..spec.n_backgrounds);
        let annotator_id = rng.random_range(0..spec.n_annotators);

        let mut frames = Vec::with_capacity(spec.n_f * spec.d_raw);
        for f in 0..spec.n_f {
            let s = if spec.n_f > 1 {
                f as f64 / (spec.n_f - 1) as f64
            } else {
                0.0
            };
            let mut content = vec![0.0; spec.d_raw];
            for &e in &entity_ids {
                content.iter_mut().zip(&world.entities[e]).for_each(|(c, p)| *c += p);
            }
            for &a in &activity_ids {
                let (p0, p1) = &world.activities[a];
                for k in 0..spec.d_raw {
                    content[k] += (1.0 - s) * p0[k] + s * p1[k];
                }
            }
            let mut background = backgrounds[background_id].clone();
            for k in 0..spec.d_raw {
                content[k] += spec.frame_noise * rng.sample::<f64, _>(StandardNormal);
                background[k] += spec.frame_noise * rng.sample::<f64, _>(StandardNormal);
            }
            rms_normalize(&mut content);
            rms_normalize(&mut background);
            frames.extend(
                content
                    .iter()
                    .zip(&background)
                    .map(|(c, b)| (content_w * c + distract_w * b) as f32),
            );
        }

        // content tokens
        let mut words: Vec<&str> = Vec::with_capacity(slots);
        let det = |rng: &mut ChaCha8Rng, words: &mut Vec<&str>| {
            if spec.use_determiners {
                words.push(DETERMINERS[rng.random_range(0..DETERMINERS.len())]);
            }
        };
        if let Some((&subject, rest)) = entity_ids.split_first() {
            det(&mut rng, &mut words);
            words.push(ENTITY_WORDS[subject]);
            let mut objects = rest.iter();
            for (j, &a) in activity_ids.iter().enumerate() {
                if j > 0 {
                    words.push("and");
                }
                words.push(ACTIVITY_WORDS[a]);
                if let Some(&o) = objects.next() {
                    det(&mut rng, &mut words);
                    words.push(ENTITY_WORDS[o]);
                }
            }
            for &o in objects {
                words.push("with");
                det(&mut rng, &mut words);
                words.push(ENTITY_WORDS[o]);
            }
        } else {
            for (j, &a) in activity_ids.iter().enumerate() {
                if j > 0 {
                    words.push("and");
                }
                words.push(ACTIVITY_WORDS[a]);
            }
        }

        // optional slots become bias tokens at the profile rate
        let mut is_bias = vec![false; words.len()];
        let optional = slots - words.len();
        for _ in 0..optional {
            if rng.random_bool(profile.textual_bias_rate) {
                let style = &world.annotator_words[annotator_id];
                let w = BIAS_WORDS[style[rng.random_range(0..style.len())]];
                let pos = rng.random_range(0..=words.len());
                words.insert(pos, w);
                is_bias.insert(pos, true);
            }
        }

        let mut token_ids = Vec::with_capacity(spec.n_t);
        token_ids.push(BOS);
        token_ids.extend(words.iter().map(|w| vocab.lookup(w)));
        token_ids.push(EOS);
        token_ids.resize(spec.n_t, PAD);
        let attention_mask = token_ids.iter().map(|&t| t != PAD).collect();
        let bias_positions = is_bias
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(k, _)| k + 1)
            .collect();

        pairs.push(CorpusPair {
            id: format!("p{}-{:05}", profile.seed, i),
            clip: VideoClip::new(spec.n_f, spec.d_raw, frames)?,
            caption: Caption {
                token_ids,
                attention_mask,
            },
            meta: Some(PairMeta {
                entity_ids,
                activity_ids,
                bias_positions,
                background_id,
                annotator_id,
            }),
        });
    }

    let corpus = Corpus {
        header: CorpusHeader {
            n_f: spec.n_f,
            d_raw: spec.d_raw,
            n_t: spec.n_t,
            vocab_sha256: vocab.sha256(),
        },
        pairs,
    };
    Ok(SyntheticCorpus {
        corpus,
        vocab,
        lexicon,
    })
}
