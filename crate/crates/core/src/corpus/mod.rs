//! Filler-annotated review transcripts: parsing, label aggregation,
//! statistics and synthetic generation.

mod synth;
mod text;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, LabelRule, PositionProfile, SynthConfig};
pub use text::{normalize_fillers, render_sentence};

/// The two filler sounds the toolkit recognizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FillerKind {
    Um,
    Uh,
}

impl FillerKind {
    /// Canonical lowercase surface.
    pub fn surface(self) -> &'static str {
        match self {
            FillerKind::Um => "um",
            FillerKind::Uh => "uh",
        }
    }

    /// Spelling used in corpus transcripts.
    pub fn transcript_form(self) -> &'static str {
        match self {
            FillerKind::Um => "(umm)",
            FillerKind::Uh => "(uhh)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub surface: String,
    pub filler: Option<FillerKind>,
}

impl Token {
    pub fn word(surface: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            filler: None,
        }
    }

    pub fn filler(kind: FillerKind) -> Self {
        Self {
            surface: kind.surface().to_string(),
            filler: Some(kind),
        }
    }

    pub fn is_filler(&self) -> bool {
        self.filler.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_fillers(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_filler()).count()
    }

    /// The sentence with every filler token removed.
    pub fn without_fillers(&self) -> Sentence {
        Sentence::new(self.tokens.iter().filter(|t| !t.is_filler()).cloned().collect())
    }

    /// Insertion slots of the fillers, counted as the number of non-filler
    /// tokens preceding each filler.
    pub fn filler_slots(&self) -> Vec<usize> {
        let mut words = 0;
        let mut slots = Vec::new();
        for t in &self.tokens {
            if t.is_filler() {
                slots.push(words);
            } else {
                words += 1;
            }
        }
        slots
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Which aggregated label a downstream task predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Confidence,
    Sentiment,
    Persuasiveness,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Confidence => "confidence",
            Target::Sentiment => "sentiment",
            Target::Persuasiveness => "persuasiveness",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "confidence" | "foak" => Ok(Target::Confidence),
            "sentiment" => Ok(Target::Sentiment),
            "persuasiveness" => Ok(Target::Persuasiveness),
            _ => Err(Error::InvalidConfig(format!("unknown target `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Review {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub stars: Option<u8>,
    pub confidence_raw: Vec<u8>,
    pub sentiment_raw: Vec<u8>,
    pub persuasiveness_raw: Vec<u8>,
    pub split: Split,
}

impl Review {
    /// Confidence and sentiment labels are both present.
    pub fn is_labeled(&self) -> bool {
        !self.confidence_raw.is_empty() && !self.sentiment_raw.is_empty()
    }

    pub fn has_label(&self, target: Target) -> bool {
        !self.raw_labels(target).is_empty()
    }

    pub fn raw_labels(&self, target: Target) -> &[u8] {
        match target {
            Target::Confidence => &self.confidence_raw,
            Target::Sentiment => &self.sentiment_raw,
            Target::Persuasiveness => &self.persuasiveness_raw,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn n_fillers(&self) -> usize {
        self.sentences.iter().map(Sentence::n_fillers).sum()
    }

    /// Share of this review's tokens that are fillers (0 for empty reviews).
    pub fn filler_fraction(&self) -> f64 {
        let n = self.n_tokens();
        if n == 0 {
            0.0
        } else {
            self.n_fillers() as f64 / n as f64
        }
    }

    /// Aggregated value of one label set.
    pub fn label(&self, target: Target) -> Result<f64> {
        let raw = self.raw_labels(target);
        if raw.is_empty() {
            return Err(Error::UnlabeledReview(self.id.clone()));
        }
        Ok(match target {
            Target::Confidence => rms(raw),
            _ => mean(raw),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregatedLabels {
    pub confidence: f64,
    pub sentiment: f64,
    pub persuasiveness: Option<f64>,
}

fn rms(v: &[u8]) -> f64 {
    (v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>() / v.len() as f64).sqrt()
}

fn mean(v: &[u8]) -> f64 {
    v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
}

/// Confidence is the root mean square of the annotator scores; sentiment and
/// persuasiveness are arithmetic means.
pub fn aggregate_labels(review: &Review) -> Result<AggregatedLabels> {
    Ok(AggregatedLabels {
        confidence: review.label(Target::Confidence)?,
        sentiment: review.label(Target::Sentiment)?,
        persuasiveness: review.label(Target::Persuasiveness).ok(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Review>,
    pub dev: Vec<Review>,
    pub test: Vec<Review>,
}

impl DatasetSplits {
    pub fn split(&self, split: Split) -> &[Review] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Reviews carrying the labels needed for `target`.
    pub fn labeled(&self, split: Split, target: Target) -> Vec<&Review> {
        self.split(split).iter().filter(|r| r.has_label(target)).collect()
    }

    pub fn all(&self) -> impl Iterator<Item = &Review> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub split: Split,
    pub stars: Option<u8>,
    pub transcript: Vec<String>,
    pub confidence: Option<Vec<i64>>,
    pub sentiment: Option<Vec<i64>>,
    pub persuasiveness: Option<Vec<i64>>,
}

fn checked_labels(id: &str, labels: Option<Vec<i64>>) -> Result<Vec<u8>> {
    labels
        .unwrap_or_default()
        .into_iter()
        .map(|v| {
            if (1..=7).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::LabelOutOfRange { id: id.to_string(), value: v })
            }
        })
        .collect()
}

impl CorpusRecord {
    pub fn into_review(self) -> Result<Review> {
        let confidence_raw = checked_labels(&self.id, self.confidence)?;
        let sentiment_raw = checked_labels(&self.id, self.sentiment)?;
        let persuasiveness_raw = checked_labels(&self.id, self.persuasiveness)?;
        if let Some(s) = self.stars {
            if !(1..=5).contains(&s) {
                return Err(Error::InvalidConfig(format!("review `{}`: stars {s} outside [1,5]", self.id)));
            }
        }
        Ok(Review {
            sentences: self.transcript.iter().map(|s| normalize_fillers(s)).collect(),
            id: self.id,
            stars: self.stars,
            confidence_raw,
            sentiment_raw,
            persuasiveness_raw,
            split: self.split,
        })
    }

    pub fn from_review(r: &Review) -> Self {
        let labels = |v: &[u8]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().map(|&x| i64::from(x)).collect())
            }
        };
        Self {
            id: r.id.clone(),
            split: r.split,
            stars: r.stars,
            transcript: r.sentences.iter().map(render_sentence).collect(),
            confidence: labels(&r.confidence_raw),
            sentiment: labels(&r.sentiment_raw),
            persuasiveness: labels(&r.persuasiveness_raw),
        }
    }
}

/// Reads a line-delimited corpus. Blank lines are skipped; reviews keep the
/// split declared in the file.
pub fn parse_corpus<R: BufRead>(source: R) -> Result<DatasetSplits> {
    let mut splits = DatasetSplits::default();
    let mut seen = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateReviewId(record.id));
        }
        let review = record.into_review().map_err(|e| match e {
            Error::LabelOutOfRange { .. } | Error::InvalidConfig(_) => Error::MalformedRecord {
                line: lineno,
                message: e.to_string(),
            },
            other => other,
        })?;
        match review.split {
            Split::Train => splits.train.push(review),
            Split::Dev => splits.dev.push(review),
            Split::Test => splits.test.push(review),
        }
    }
    Ok(splits)
}

/// Writes reviews in corpus-file order (train, dev, test).
pub fn write_corpus<W: Write>(splits: &DatasetSplits, mut w: W) -> Result<()> {
    for r in splits.all() {
        serde_json::to_writer(&mut w, &CorpusRecord::from_review(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_reviews: usize,
    pub n_reviews_with_fillers: usize,
    pub n_sentences: usize,
    pub n_tokens: usize,
    pub n_um: usize,
    pub n_uh: usize,
    pub filler_fraction: f64,
    pub mean_review_length: f64,
    /// Filler counts keyed by 0-based token index within the sentence.
    pub position_histogram: BTreeMap<usize, usize>,
}

pub fn corpus_stats<'a, I>(reviews: I) -> CorpusStats
where
    I: IntoIterator<Item = &'a Review>,
{
    let mut s = CorpusStats::default();
    for r in reviews {
        s.n_reviews += 1;
        if r.n_fillers() > 0 {
            s.n_reviews_with_fillers += 1;
        }
        for sent in &r.sentences {
            s.n_sentences += 1;
            s.n_tokens += sent.len();
            for (pos, t) in sent.tokens.iter().enumerate() {
                match t.filler {
                    Some(FillerKind::Um) => s.n_um += 1,
                    Some(FillerKind::Uh) => s.n_uh += 1,
                    None => continue,
                }
                *s.position_histogram.entry(pos).or_default() += 1;
            }
        }
    }
    if s.n_tokens > 0 {
        s.filler_fraction = (s.n_um + s.n_uh) as f64 / s.n_tokens as f64;
    }
    if s.n_reviews > 0 {
        s.mean_review_length = s.n_tokens as f64 / s.n_reviews as f64;
    }
    s
}

#[cfg(test)]
mod tests;
