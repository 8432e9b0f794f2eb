//! Synthetic review corpora with controllable filler behaviour.
//!
//! Text comes from a seeded order-1 word chain over a pseudo-word lexicon.
//! Fillers are inserted at sentence slots drawn from a [`PositionProfile`];
//! the word right after a filler is drawn from a small "hesitation" subset of
//! the lexicon, so fillers carry information about what follows. Each filler
//! kind has its own half of that subset. Those words
//! also occur through the ordinary chain, which keeps them an imperfect cue
//! once fillers are stripped.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::{DatasetSplits, FillerKind, Review, Sentence, Split, Token};
use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeio";
const CHAIN_FANOUT: usize = 6;
const START_FANOUT: usize = 8;
const ANNOTATORS: usize = 3;

const CONFIDENCE_BASE: f64 = 6.0;
const CONFIDENCE_SLOPE: f64 = 25.0;
const SENTIMENT_BASE: f64 = 5.6;
const SENTIMENT_SLOPE: f64 = 20.0;
const INDEPENDENT_MEAN: f64 = 5.0;
const PERSUASIVENESS_MEAN: f64 = 4.5;
const REVIEW_SD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelRule {
    /// Confidence and sentiment decrease linearly with the review's filler fraction.
    FillerDependent,
    /// All labels are drawn independently of the text.
    FillerIndependent,
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelRule::FillerDependent => "filler-dependent",
            LabelRule::FillerIndependent => "filler-independent",
        })
    }
}

impl FromStr for LabelRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filler-dependent" | "FillerDependent" => Ok(LabelRule::FillerDependent),
            "filler-independent" | "FillerIndependent" => Ok(LabelRule::FillerIndependent),
            _ => Err(Error::InvalidConfig(format!("unknown label rule `{s}`"))),
        }
    }
}

/// Probability mass over filler insertion slots (0 = sentence-initial).
#[derive(Clone, Debug, PartialEq)]
pub struct PositionProfile(BTreeMap<usize, f64>);

impl PositionProfile {
    pub fn new(masses: BTreeMap<usize, f64>) -> Self {
        Self(masses)
    }

    /// `first` at slot 0, the remainder spread evenly over slots `1..=max_position`.
    pub fn uniform_rest(first: f64, max_position: usize) -> Self {
        let mut m = BTreeMap::new();
        m.insert(0, first);
        for j in 1..=max_position {
            m.insert(j, (1.0 - first) / max_position as f64);
        }
        Self(m)
    }

    /// `first` at slot 0, the remainder geometrically decaying by `ratio` over
    /// slots `1..=max_position`.
    pub fn decaying(first: f64, ratio: f64, max_position: usize) -> Self {
        let weights: Vec<f64> = (1..=max_position).map(|j| ratio.powi(j as i32 - 1)).collect();
        let total: f64 = weights.iter().sum();
        let mut m = BTreeMap::new();
        m.insert(0, first);
        for (j, w) in (1..=max_position).zip(weights) {
            m.insert(j, (1.0 - first) * w / total);
        }
        Self(m)
    }

    pub fn mass(&self, slot: usize) -> f64 {
        self.0.get(&slot).copied().unwrap_or(0.0)
    }

    pub fn masses(&self) -> &BTreeMap<usize, f64> {
        &self.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.values().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidConfig("position profile has a negative or non-finite mass".into()));
        }
        let total: f64 = self.0.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("position profile masses sum to {total}, not 1")));
        }
        Ok(())
    }
}

impl Default for PositionProfile {
    fn default() -> Self {
        Self::decaying(0.6, 0.7, 15)
    }
}

/// `slot:mass` pairs separated by commas, e.g. `0:0.6,1:0.4`.
impl fmt::Display for PositionProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PositionProfile {
    type Err = Error;

    /// Accepts the `slot:mass,...` list, or the shorthands
    /// `decay:<first>:<ratio>:<max>` and `uniform-rest:<first>:<max>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("cannot parse position profile `{s}`"));
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        let int = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["decay", first, ratio, max] => Ok(Self::decaying(num(first)?, num(ratio)?, int(max)?)),
            ["uniform-rest", first, max] => Ok(Self::uniform_rest(num(first)?, int(max)?)),
            _ => {
                let mut m = BTreeMap::new();
                for pair in s.split(',') {
                    let (k, v) = pair.split_once(':').ok_or_else(bad)?;
                    m.insert(int(k)?, num(v)?);
                }
                Ok(Self(m))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_reviews: usize,
    pub sentences_per_review: usize,
    /// Size of the pseudo-word lexicon.
    pub vocab_size: usize,
    /// Expected share of tokens that are fillers.
    pub filler_rate: f64,
    pub position_profile: PositionProfile,
    pub label_rule: LabelRule,
    /// Per-annotator Gaussian noise on the 1–7 scale.
    pub noise_sd: f64,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    /// Share of the lexicon that may follow a filler.
    pub hesitation_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_reviews: 2000,
            sentences_per_review: 3,
            vocab_size: 200,
            filler_rate: 0.04,
            position_profile: PositionProfile::default(),
            label_rule: LabelRule::FillerDependent,
            noise_sd: 0.8,
            min_sentence_len: 6,
            max_sentence_len: 14,
            hesitation_share: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.position_profile.validate()?;
        if !(0.0..1.0).contains(&self.filler_rate) {
            return Err(Error::InvalidConfig(format!("filler_rate {} not in [0,1)", self.filler_rate)));
        }
        if self.vocab_size < 20 {
            return Err(Error::InvalidConfig(format!("vocab_size {} < 20", self.vocab_size)));
        }
        if self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return Err(Error::InvalidConfig("sentence length range is empty".into()));
        }
        if !(self.hesitation_share > 0.0 && self.hesitation_share < 1.0) {
            return Err(Error::InvalidConfig("hesitation_share must lie in (0,1)".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig("noise_sd must be non-negative".into()));
        }
        Ok(())
    }
}

fn pseudo_word(mut i: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut syllables = Vec::new();
    loop {
        let s = i % base;
        syllables.push([CONSONANTS[s / VOWELS.len()], VOWELS[s % VOWELS.len()]]);
        i /= base;
        if i == 0 && syllables.len() >= 2 {
            break;
        }
    }
    syllables.iter().rev().flat_map(|s| s.iter().map(|&b| b as char)).collect()
}

/// Successor table with Zipf-like weights.
struct Row {
    words: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl Row {
    fn new(words: Vec<usize>) -> Self {
        let weights: Vec<f64> = (0..words.len()).map(|r| 1.0 / (r + 1) as f64).collect();
        Self {
            dist: WeightedIndex::new(weights).expect("non-empty row"),
            words,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        self.words[self.dist.sample(rng)]
    }
}

struct Chain {
    lexicon: Vec<String>,
    start: Row,
    next: Vec<Row>,
    /// Indexed by filler kind: um, uh.
    after_filler: [Row; 2],
}

impl Chain {
    fn build<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let v = cfg.vocab_size;
        let n_hes = ((cfg.hesitation_share * v as f64).round() as usize).clamp(4, v - 2);
        let n_plain = v - n_hes;
        let lexicon = (0..v).map(pseudo_word).collect();
        let start = Row::new(sample(rng, n_plain, START_FANOUT.min(n_plain)).into_vec());
        let next = (0..v)
            .map(|_| Row::new(sample(rng, v, CHAIN_FANOUT).into_vec()))
            .collect();
        let mut hes: Vec<usize> = (n_plain..v).collect();
        hes.shuffle(rng);
        let uh = hes.split_off(n_hes / 2);
        Self {
            lexicon,
            start,
            next,
            after_filler: [Row::new(hes), Row::new(uh)],
        }
    }
}

fn annotate<R: Rng>(center: f64, noise: &Normal<f64>, rng: &mut R) -> Vec<u8> {
    (0..ANNOTATORS)
        .map(|_| (center + noise.sample(rng)).round().clamp(1.0, 7.0) as u8)
        .collect()
}

/// Generates a labelled corpus; reviews are split 70/15/15 by index.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<DatasetSplits> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    label_rng.set_stream(1);

    let chain = Chain::build(cfg, &mut rng);
    let q = cfg.filler_rate / (1.0 - cfg.filler_rate);
    let speaker = Gamma::new(2.0, 0.5).expect("valid gamma");
    let annotator_noise = Normal::new(0.0, cfg.noise_sd).expect("valid noise");
    let review_spread = Normal::new(0.0, REVIEW_SD).expect("valid spread");
    let train_end = cfg.n_reviews * 70 / 100;
    let dev_end = cfg.n_reviews * 85 / 100;

    let mut splits = DatasetSplits::default();
    for i in 0..cfg.n_reviews {
        let per_word = (q * speaker.sample(&mut rng)).min(1.0);
        let sentences: Vec<Sentence> = (0..cfg.sentences_per_review)
            .map(|_| sentence(cfg, &chain, per_word, &mut rng))
            .collect();

        let mut review = Review {
            id: format!("synth-{i:05}"),
            sentences,
            stars: None,
            confidence_raw: Vec::new(),
            sentiment_raw: Vec::new(),
            persuasiveness_raw: Vec::new(),
            split: if i < train_end {
                Split::Train
            } else if i < dev_end {
                Split::Dev
            } else {
                Split::Test
            },
        };
        let ff = review.filler_fraction();
        let (conf_center, sent_center) = match cfg.label_rule {
            LabelRule::FillerDependent => (CONFIDENCE_BASE - CONFIDENCE_SLOPE * ff, SENTIMENT_BASE - SENTIMENT_SLOPE * ff),
            LabelRule::FillerIndependent => (
                INDEPENDENT_MEAN + review_spread.sample(&mut label_rng),
                INDEPENDENT_MEAN + review_spread.sample(&mut label_rng),
            ),
        };
        let pers_center = PERSUASIVENESS_MEAN + review_spread.sample(&mut label_rng);
        review.confidence_raw = annotate(conf_center, &annotator_noise, &mut label_rng);
        review.sentiment_raw = annotate(sent_center, &annotator_noise, &mut label_rng);
        review.persuasiveness_raw = annotate(pers_center, &annotator_noise, &mut label_rng);
        let sentiment = review.sentiment_raw.iter().map(|&x| f64::from(x)).sum::<f64>() / ANNOTATORS as f64;
        review.stars = Some((1.0 + (sentiment - 1.0) * 4.0 / 6.0).round() as u8);

        match review.split {
            Split::Train => splits.train.push(review),
            Split::Dev => splits.dev.push(review),
            Split::Test => splits.test.push(review),
        }
    }
    Ok(splits)
}

fn sentence<R: Rng>(cfg: &SynthConfig, chain: &Chain, per_word: f64, rng: &mut R) -> Sentence {
    let n_words = rng.gen_range(cfg.min_sentence_len..=cfg.max_sentence_len);
    let n_fillers = if per_word > 0.0 {
        // n_words + 1 trials so the period counts towards the token total
        Binomial::new(n_words as u64 + 1, per_word).expect("valid binomial").sample(rng) as usize
    } else {
        0
    };

    // slots 0..=n_words, slot n_words sits before the final period; at most
    // one filler per slot
    let mut at_slot: Vec<Option<FillerKind>> = vec![None; n_words + 1];
    let mut weights: Vec<f64> = (0..=n_words).map(|j| cfg.position_profile.mass(j)).collect();
    for _ in 0..n_fillers {
        let Ok(slot_dist) = WeightedIndex::new(&weights) else { break };
        let slot = slot_dist.sample(rng);
        weights[slot] = 0.0;
        at_slot[slot] = Some(if rng.gen_bool(0.5) { FillerKind::Um } else { FillerKind::Uh });
    }

    let mut tokens = Vec::with_capacity(n_words + n_fillers + 1);
    let mut prev: Option<usize> = None;
    for filler in &at_slot[..n_words] {
        tokens.extend(filler.map(Token::filler));
        let w = if let Some(kind) = filler {
            chain.after_filler[usize::from(*kind == FillerKind::Uh)].draw(rng)
        } else {
            match prev {
                None => chain.start.draw(rng),
                Some(p) => chain.next[p].draw(rng),
            }
        };
        tokens.push(Token::word(chain.lexicon[w].clone()));
        prev = Some(w);
    }
    tokens.extend(at_slot[n_words].map(Token::filler));
    tokens.push(Token::word("."));
    Sentence::new(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_words_are_unique_alphabetic_and_never_fillers() {
        let words: Vec<String> = (0..5000).map(pseudo_word).collect();
        let set: std::collections::HashSet<_> = words.iter().collect();
        assert_eq!(set.len(), words.len());
        for w in &words {
            assert!(w.chars().all(|c| c.is_ascii_lowercase()));
            assert!(!matches!(w.as_str(), "um" | "umm" | "uh" | "uhh"));
        }
    }

    #[test]
    fn profile_shorthands_parse_and_sum_to_one() {
        let p: PositionProfile = "decay:0.6:0.7:15".parse().unwrap();
        p.validate().unwrap();
        assert_eq!(p, PositionProfile::decaying(0.6, 0.7, 15));
        let u: PositionProfile = "uniform-rest:0.6:10".parse().unwrap();
        u.validate().unwrap();
        let l: PositionProfile = "0:0.5,3:0.5".parse().unwrap();
        assert_eq!(l.mass(3), 0.5);
        assert_eq!(l.to_string().parse::<PositionProfile>().unwrap(), l);
        assert!("0:0.5,1:0.4".parse::<PositionProfile>().unwrap().validate().is_err());
    }
}
