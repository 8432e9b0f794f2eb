//! Perplexity, the filler position probe, empirical baselines and MSE scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Review, Sentence, Target};
use crate::error::{Error, Result};
use crate::model::{mix_seed, MlmModel};
use crate::tokenize::{
    encode, encode_reviews, encode_with_limit, mask_batch, preprocess, EncodedSentence, Phase, ReplaceProbs, StrategyConfig, Vocabulary, CLS,
    MASK, PAD, SEP,
};
use crate::train::Predictor;

/// Rows per forward pass when scoring.
const EVAL_ROWS: usize = 96;
pub const EVAL_MASK_RATE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PplMethod {
    PseudoPpl,
    MaskedEvalPpl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub strategy: String,
    pub method: PplMethod,
    pub value: f64,
    pub mean_nll: f64,
    pub n_scored_tokens: usize,
}

fn scorable(id: u32) -> bool {
    !matches!(id, CLS | SEP | PAD)
}

/// Scores `(ids, position, target)` queries in padded chunks; returns the
/// summed negative log-likelihood in query order.
fn score_queries(model: &MlmModel, queries: &[(Vec<u32>, usize, u32)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EVAL_ROWS) {
        let cols = chunk.iter().map(|q| q.0.len()).max().unwrap_or(0);
        let rows = chunk.len();
        let mut ids = vec![PAD; rows * cols];
        let mut attn = vec![0u8; rows * cols];
        let mut positions = Vec::with_capacity(rows);
        for (r, (q, pos, _)) in chunk.iter().enumerate() {
            ids[r * cols..r * cols + q.len()].copy_from_slice(q);
            attn[r * cols..r * cols + q.len()].fill(1);
            positions.push(r * cols + pos);
        }
        let lp = model.log_probs_at(&ids, &attn, rows, &positions)?;
        out.extend(chunk.iter().zip(lp).map(|((_, _, t), row)| -row[*t as usize]));
    }
    Ok(out)
}

/// Summed negative log-probability and count over every scorable position of
/// every sentence, masking one position at a time.
pub fn pseudo_nll(model: &MlmModel, sentences: &[EncodedSentence]) -> Result<(f64, usize)> {
    let mut queries = Vec::new();
    for s in sentences {
        for (t, &id) in s.ids.iter().enumerate() {
            if !scorable(id) {
                continue;
            }
            let mut ids = s.ids.clone();
            ids[t] = MASK;
            queries.push((ids, t, id));
        }
    }
    let nll = score_queries(model, &queries)?;
    Ok((nll.iter().sum(), nll.len()))
}

/// Exhaustive pseudo-perplexity under inference-phase preprocessing.
pub fn pseudo_perplexity<'a, I>(model: &MlmModel, reviews: I, vocab: &Vocabulary, strategy: &StrategyConfig) -> Result<PerplexityReport>
where
    I: IntoIterator<Item = &'a Review>,
{
    let sentences = encode_reviews(reviews, vocab, strategy, Phase::Inference);
    let (total, n) = pseudo_nll(model, &sentences)?;
    report(strategy, PplMethod::PseudoPpl, total, n)
}

fn report(strategy: &StrategyConfig, method: PplMethod, total: f64, n: usize) -> Result<PerplexityReport> {
    if n == 0 {
        return Err(Error::NothingToScore);
    }
    let mean_nll = total / n as f64;
    Ok(PerplexityReport {
        strategy: strategy.key(),
        method,
        value: mean_nll.exp(),
        mean_nll,
        n_scored_tokens: n,
    })
}

/// One seeded masking pass (15%, always `[MASK]`); exp of the mean cross-entropy.
pub fn masked_eval_perplexity<'a, I>(model: &MlmModel, reviews: I, vocab: &Vocabulary, strategy: &StrategyConfig, seed: u64) -> Result<PerplexityReport>
where
    I: IntoIterator<Item = &'a Review>,
{
    let sentences: Vec<EncodedSentence> = encode_reviews(reviews, vocab, strategy, Phase::Inference)
        .into_iter()
        .filter(|s| s.ids.iter().any(|&i| scorable(i)))
        .collect();
    let (mut total, mut n) = (0.0, 0usize);
    for (c, chunk) in sentences.chunks(EVAL_ROWS).enumerate() {
        let mb = mask_batch(chunk, vocab, EVAL_MASK_RATE, &ReplaceProbs::mask_only(), mix_seed(seed, c as u64))?;
        let positions = mb.flat_mask_positions();
        if positions.is_empty() {
            continue;
        }
        let lp = model.log_probs_at(&mb.input_ids, &mb.attention_mask, mb.rows, &positions)?;
        for (row, t) in lp.iter().zip(mb.masked_targets()) {
            total -= row[t as usize];
            n += 1;
        }
    }
    report(strategy, PplMethod::MaskedEvalPpl, total, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelTag {
    WithFillers,
    WithoutFillers,
    Random,
    EmpiricalDistrib,
}

impl ModelTag {
    pub fn name(self) -> &'static str {
        match self {
            ModelTag::WithFillers => "lm_fillers",
            ModelTag::WithoutFillers => "lm_nofillers",
            ModelTag::Random => "random",
            ModelTag::EmpiricalDistrib => "fillers_distrib",
        }
    }
}

/// Mean filler probability per insertion position (0 = sentence-initial).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub model_tag: ModelTag,
    pub probabilities: BTreeMap<usize, f64>,
    pub n_sentences_at_position: BTreeMap<usize, usize>,
}

impl ProbeCurve {
    /// Position with the largest value (smallest position on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&j, &p) in &self.probabilities {
            if best.map_or(true, |(_, b)| p > b) {
                best = Some((j, p));
            }
        }
        best.map(|(j, _)| j)
    }

    pub fn max_value(&self) -> f64 {
        self.probabilities.values().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn get(&self, j: usize) -> Option<f64> {
        self.probabilities.get(&j).copied()
    }
}

/// Sentences used by the probe: fillers removed, empty ones dropped.
fn probe_sentences<'a, I>(reviews: I) -> Vec<Sentence>
where
    I: IntoIterator<Item = &'a Review>,
{
    reviews
        .into_iter()
        .flat_map(|r| r.sentences.iter())
        .map(Sentence::without_fillers)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Inserts `[MASK]` after word `j` of each filler-free sentence and averages
/// the probability mass the model puts on filler ids there.
pub fn probe_filler_positions<'a, I>(model: &MlmModel, reviews: I, vocab: &Vocabulary, max_position: usize, tag: ModelTag) -> Result<ProbeCurve>
where
    I: IntoIterator<Item = &'a Review>,
{
    let sentences = probe_sentences(reviews);
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus("probe needs at least one sentence".into()));
    }
    let filler_ids = vocab.filler_ids();
    let mut queries: Vec<(Vec<u32>, usize)> = Vec::new();
    for s in &sentences {
        // one slot is left for the inserted mask
        let base = encode_with_limit(s, vocab, Phase::Inference, model.config().max_len - 1);
        let words = base.len() - 2;
        for j in 0..=words.min(max_position) {
            let mut ids = base.ids.clone();
            ids.insert(j + 1, MASK);
            queries.push((ids, j));
        }
    }
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for chunk in queries.chunks(EVAL_ROWS) {
        let cols = chunk.iter().map(|q| q.0.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; chunk.len() * cols];
        let mut attn = vec![0u8; chunk.len() * cols];
        let mut positions = Vec::with_capacity(chunk.len());
        for (r, (q, j)) in chunk.iter().enumerate() {
            ids[r * cols..r * cols + q.len()].copy_from_slice(q);
            attn[r * cols..r * cols + q.len()].fill(1);
            positions.push(r * cols + j + 1);
        }
        let lp = model.log_probs_at(&ids, &attn, chunk.len(), &positions)?;
        for ((_, j), row) in chunk.iter().zip(lp) {
            let p: f64 = filler_ids.iter().map(|&f| row[f as usize].exp()).sum();
            *sums.entry(*j).or_default() += p.min(1.0);
            *counts.entry(*j).or_default() += 1;
        }
    }
    Ok(ProbeCurve {
        model_tag: tag,
        probabilities: sums.iter().map(|(&j, &s)| (j, s / counts[&j] as f64)).collect(),
        n_sentences_at_position: counts,
    })
}

/// Fraction of sentences with a filler at each insertion position, over the
/// sentences long enough to have that position.
pub fn empirical_filler_distribution<'a, I>(reviews: I, max_position: usize) -> ProbeCurve
where
    I: IntoIterator<Item = &'a Review>,
{
    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in reviews.into_iter().flat_map(|r| r.sentences.iter()) {
        let words = s.len() - s.n_fillers();
        if words == 0 {
            continue;
        }
        for j in 0..=words.min(max_position) {
            *counts.entry(j).or_default() += 1;
        }
        let mut slots = s.filler_slots();
        slots.dedup();
        for j in slots.into_iter().filter(|&j| j <= max_position) {
            *hits.entry(j).or_default() += 1;
        }
    }
    ProbeCurve {
        model_tag: ModelTag::EmpiricalDistrib,
        probabilities: counts.iter().map(|(&j, &n)| (j, hits.get(&j).copied().unwrap_or(0) as f64 / n as f64)).collect(),
        n_sentences_at_position: counts,
    }
}

/// A flat curve at `(filler symbols)/|V|` over the positions of `like`.
pub fn random_baseline(vocab: &Vocabulary, like: &ProbeCurve) -> ProbeCurve {
    let p = vocab.n_filler_symbols() as f64 / vocab.len() as f64;
    ProbeCurve {
        model_tag: ModelTag::Random,
        probabilities: like.probabilities.keys().map(|&j| (j, p)).collect(),
        n_sentences_at_position: like.n_sentences_at_position.clone(),
    }
}

pub const PROBE_FORMAT: &str = "fillerlm.probe.v1";

/// CSV with columns `position,mean_probability,n_sentences,model_tag`.
pub fn probe_curves_csv(curves: &[ProbeCurve]) -> String {
    let mut out = format!("# format: {PROBE_FORMAT}\nposition,mean_probability,n_sentences,model_tag\n");
    for c in curves {
        for (j, p) in &c.probabilities {
            let n = c.n_sentences_at_position.get(j).copied().unwrap_or(0);
            let _ = writeln!(out, "{j},{p:.12e},{n},{}", c.model_tag.name());
        }
    }
    out
}

/// One JSON record per curve point.
pub fn probe_curves_records(curves: &[ProbeCurve]) -> String {
    let mut out = String::new();
    for c in curves {
        for (j, p) in &c.probabilities {
            let rec = serde_json::json!({
                "format": PROBE_FORMAT,
                "position": j,
                "mean_probability": p,
                "n_sentences": c.n_sentences_at_position.get(j).copied().unwrap_or(0),
                "model_tag": c.model_tag.name(),
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub strategy: String,
    pub target: Target,
    pub mse: f64,
    pub n_reviews: usize,
}

/// Mean squared residual.
pub fn mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    Ok(predictions.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / labels.len() as f64)
}

/// Test-set MSE of a trained predictor under inference-phase preprocessing.
pub fn mse_eval(predictor: &Predictor, reviews: &[&Review], vocab: &Vocabulary, strategy: &StrategyConfig, target: Target) -> Result<MseReport> {
    let labels = reviews.iter().map(|r| r.label(target)).collect::<Result<Vec<f64>>>()?;
    let preds = predictor.predict(reviews, vocab, strategy)?;
    Ok(MseReport {
        strategy: strategy.key(),
        target,
        mse: mse(&preds, &labels)?,
        n_reviews: reviews.len(),
    })
}

/// Sentences of each review, preprocessed and encoded for `phase`.
pub fn encode_review_groups(reviews: &[&Review], vocab: &Vocabulary, strategy: &StrategyConfig, phase: Phase) -> Vec<Vec<EncodedSentence>> {
    reviews
        .iter()
        .map(|r| {
            let mut v: Vec<EncodedSentence> = r.sentences.iter().map(|s| encode(&preprocess(s, strategy, phase), vocab, phase)).collect();
            if v.is_empty() {
                v.push(encode(&Sentence::default(), vocab, phase));
            }
            v
        })
        .collect()
}
