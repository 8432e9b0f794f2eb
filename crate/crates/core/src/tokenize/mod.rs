//! Vocabulary, filler preprocessing strategies, encoding and MLM masking.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{FillerKind, Review, Sentence};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const CLS: u32 = 3;
pub const SEP: u32 = 4;
pub const FILLER_UM: u32 = 5;
pub const FILLER_UH: u32 = 6;
pub const FILLER: u32 = 7;
pub const NUM_SPECIALS: u32 = 8;
pub const SPECIAL_SURFACES: [&str; NUM_SPECIALS as usize] =
    ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]", "[FILLER_UMM]", "[FILLER_UHH]", "[FILLER]"];

/// Target value at positions that contribute no loss.
pub const IGNORE_INDEX: i64 = crate::numerics::IGNORE_INDEX;
pub const DEFAULT_MAX_LEN: usize = 128;

/// How fillers map to vocabulary ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenStrategy {
    /// Fillers are ordinary words.
    T1,
    /// `um` and `uh` get one special id each.
    T2,
    /// Both fillers share one special id.
    T3,
}

/// When fillers are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PreprocStrategy {
    /// Removed during training and inference.
    PS1,
    /// Kept during training, removed at inference.
    PS2,
    /// Kept throughout.
    PS3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub token: TokenStrategy,
    pub preproc: PreprocStrategy,
    pub fine_tune: bool,
}

impl StrategyConfig {
    pub fn new(token: TokenStrategy, preproc: PreprocStrategy, fine_tune: bool) -> Self {
        Self { token, preproc, fine_tune }
    }

    /// `T1.PS3`, with a `.frozen` suffix when fine-tuning is off.
    pub fn key(&self) -> String {
        let base = format!("{}.{}", self.token_name(), self.preproc_name());
        if self.fine_tune {
            base
        } else {
            base + ".frozen"
        }
    }

    pub fn token_name(&self) -> &'static str {
        match self.token {
            TokenStrategy::T1 => "T1",
            TokenStrategy::T2 => "T2",
            TokenStrategy::T3 => "T3",
        }
    }

    pub fn preproc_name(&self) -> &'static str {
        match self.preproc {
            PreprocStrategy::PS1 => "PS1",
            PreprocStrategy::PS2 => "PS2",
            PreprocStrategy::PS3 => "PS3",
        }
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for TokenStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(TokenStrategy::T1),
            "T2" => Ok(TokenStrategy::T2),
            "T3" => Ok(TokenStrategy::T3),
            _ => Err(Error::InvalidConfig(format!("unknown token strategy `{s}`"))),
        }
    }
}

impl FromStr for PreprocStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PS1" => Ok(PreprocStrategy::PS1),
            "PS2" => Ok(PreprocStrategy::PS2),
            "PS3" => Ok(PreprocStrategy::PS3),
            _ => Err(Error::InvalidConfig(format!("unknown preprocessing strategy `{s}`"))),
        }
    }
}

/// Parses `T1.PS3` (either order) with an optional `.frozen` suffix.
impl FromStr for StrategyConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut token = None;
        let mut preproc = None;
        let mut fine_tune = true;
        for part in s.split('.') {
            if part.eq_ignore_ascii_case("frozen") {
                fine_tune = false;
            } else if let Ok(t) = part.parse::<TokenStrategy>() {
                token = Some(t);
            } else if let Ok(p) = part.parse::<PreprocStrategy>() {
                preproc = Some(p);
            } else {
                return Err(Error::InvalidConfig(format!("unknown strategy component `{part}` in `{s}`")));
            }
        }
        match (token, preproc) {
            (Some(token), Some(preproc)) => Ok(Self { token, preproc, fine_tune }),
            _ => Err(Error::InvalidConfig(format!("strategy `{s}` must name a token and a preprocessing strategy"))),
        }
    }
}

/// Drops fillers according to the preprocessing strategy and phase.
pub fn preprocess(sentence: &Sentence, strategy: &StrategyConfig, phase: Phase) -> Sentence {
    let keep = match (strategy.preproc, phase) {
        (PreprocStrategy::PS1, _) => false,
        (PreprocStrategy::PS2, Phase::Train) => true,
        (PreprocStrategy::PS2, Phase::Inference) => false,
        (PreprocStrategy::PS3, _) => true,
    };
    if keep {
        sentence.clone()
    } else {
        sentence.without_fillers()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    ids: HashMap<String, u32>,
    token: TokenStrategy,
}

impl Vocabulary {
    /// Specials followed by `lexical` in order.
    pub fn from_lexical<I, S>(lexical: I, token: TokenStrategy) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut surfaces: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
        surfaces.extend(lexical.into_iter().map(Into::into));
        let mut ids = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate() {
            if ids.insert(s.clone(), i as u32).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary entry `{s}`")));
            }
        }
        Ok(Self { surfaces, ids, token })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn token_strategy(&self) -> TokenStrategy {
        self.token
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.ids.get(surface).copied()
    }

    pub fn surface_of(&self, id: u32) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    /// Lexical entries in id order.
    pub fn lexical(&self) -> &[String] {
        &self.surfaces[NUM_SPECIALS as usize..]
    }

    /// Ids that represent a filler under the vocabulary's token strategy.
    pub fn filler_ids(&self) -> Vec<u32> {
        match self.token {
            TokenStrategy::T1 => ["um", "uh"].iter().filter_map(|s| self.id_of(s)).collect(),
            TokenStrategy::T2 => vec![FILLER_UM, FILLER_UH],
            TokenStrategy::T3 => vec![FILLER],
        }
    }

    /// Number of distinct filler symbols the strategy distinguishes (2, or 1 under T3).
    pub fn n_filler_symbols(&self) -> usize {
        match self.token {
            TokenStrategy::T3 => 1,
            _ => 2,
        }
    }

    /// Id for one token; fillers follow the token strategy, unknown words map to UNK.
    pub fn token_id(&self, surface: &str, filler: Option<FillerKind>) -> u32 {
        match (filler, self.token) {
            (Some(FillerKind::Um), TokenStrategy::T2) => FILLER_UM,
            (Some(FillerKind::Uh), TokenStrategy::T2) => FILLER_UH,
            (Some(_), TokenStrategy::T3) => FILLER,
            (Some(kind), TokenStrategy::T1) => self.id_of(kind.surface()).unwrap_or(UNK),
            (None, _) => self.id_of(surface).filter(|&i| !Self::is_special(i)).unwrap_or(UNK),
        }
    }

    /// One `surface<TAB>id` line per entry, specials first.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.surfaces.iter().enumerate() {
            out.push_str(s);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    /// Reads the TSV form; ids must be `0..n` in order with the specials first.
    pub fn read_tsv<R: BufRead>(r: R, token: TokenStrategy) -> Result<Self> {
        let mut lexical = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |m: &str| Error::MalformedRecord { line: i + 1, message: m.to_string() };
            let (surface, id) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != i {
                return Err(bad("ids must be consecutive from 0"));
            }
            if i < NUM_SPECIALS as usize {
                if surface != SPECIAL_SURFACES[i] {
                    return Err(bad("special tokens out of order"));
                }
            } else {
                lexical.push(surface.to_string());
            }
        }
        Self::from_lexical(lexical, token)
    }

    /// Hex sha256 of the TSV form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds a word-level vocabulary from training reviews.
///
/// Words with frequency at least `min_freq` are admitted by descending
/// frequency (ties lexicographic) up to `max_size` lexical entries. Under T1
/// the filler surfaces count as ordinary words; under T2/T3 they are left to
/// the filler specials.
pub fn build_vocab<'a, I>(train_reviews: I, strategy: &StrategyConfig, min_freq: usize, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a Review>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut n_tokens = 0usize;
    for r in train_reviews {
        for s in &r.sentences {
            for t in &s.tokens {
                n_tokens += 1;
                if t.is_filler() && strategy.token != TokenStrategy::T1 {
                    continue;
                }
                if SPECIAL_SURFACES.contains(&t.surface.as_str()) {
                    continue;
                }
                *counts.entry(t.surface.as_str()).or_default() += 1;
            }
        }
    }
    if n_tokens == 0 {
        return Err(Error::EmptyCorpus("vocabulary needs at least one training token".into()));
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    entries.truncate(max_size);
    Vocabulary::from_lexical(entries.into_iter().map(|(s, _)| s), strategy.token)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSentence {
    pub ids: Vec<u32>,
    pub filler_positions: Vec<usize>,
    pub phase: Phase,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encodes an already preprocessed sentence as `[CLS] ... [SEP]`, truncated
/// on the right to [`DEFAULT_MAX_LEN`] ids.
pub fn encode(sentence: &Sentence, vocab: &Vocabulary, phase: Phase) -> EncodedSentence {
    encode_with_limit(sentence, vocab, phase, DEFAULT_MAX_LEN)
}

pub fn encode_with_limit(sentence: &Sentence, vocab: &Vocabulary, phase: Phase, max_len: usize) -> EncodedSentence {
    let body = max_len.saturating_sub(2);
    let mut ids = Vec::with_capacity(sentence.len().min(body) + 2);
    let mut filler_positions = Vec::new();
    ids.push(CLS);
    for t in sentence.tokens.iter().take(body) {
        if t.is_filler() {
            filler_positions.push(ids.len());
        }
        ids.push(vocab.token_id(&t.surface, t.filler));
    }
    ids.push(SEP);
    EncodedSentence { ids, filler_positions, phase }
}

/// Surfaces of the ids between the framing tokens.
pub fn decode(encoded: &EncodedSentence, vocab: &Vocabulary) -> Vec<String> {
    encoded
        .ids
        .iter()
        .filter(|&&id| id != CLS && id != SEP && id != PAD)
        .map(|&id| vocab.surface_of(id).unwrap_or("[UNK]").to_string())
        .collect()
}

/// Preprocesses and encodes every sentence of every review, in order.
pub fn encode_reviews<'a, I>(reviews: I, vocab: &Vocabulary, strategy: &StrategyConfig, phase: Phase) -> Vec<EncodedSentence>
where
    I: IntoIterator<Item = &'a Review>,
{
    reviews
        .into_iter()
        .flat_map(|r| r.sentences.iter())
        .map(|s| encode(&preprocess(s, strategy, phase), vocab, phase))
        .collect()
}

/// What happens to a position selected for prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaceProbs {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for ReplaceProbs {
    fn default() -> Self {
        Self { mask: 0.8, random: 0.1, keep: 0.1 }
    }
}

impl ReplaceProbs {
    /// Always substitute `[MASK]`.
    pub fn mask_only() -> Self {
        Self { mask: 1.0, random: 0.0, keep: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.mask, self.random, self.keep];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("replacement probabilities {all:?} must sum to 1")));
        }
        Ok(())
    }
}

/// A padded batch with MLM targets; matrices are row-major `[rows, cols]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub rows: usize,
    pub cols: usize,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<i64>,
    pub attention_mask: Vec<u8>,
    pub mask_positions: Vec<Vec<usize>>,
}

impl MaskedBatch {
    /// Flat indices (`row * cols + col`) of the selected positions, row by row.
    pub fn flat_mask_positions(&self) -> Vec<usize> {
        self.mask_positions
            .iter()
            .enumerate()
            .flat_map(|(r, ps)| ps.iter().map(move |&c| r * self.cols + c))
            .collect()
    }

    /// Targets at [`Self::flat_mask_positions`].
    pub fn masked_targets(&self) -> Vec<i64> {
        self.flat_mask_positions().iter().map(|&i| self.target_ids[i]).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.mask_positions.iter().map(Vec::len).sum()
    }
}

/// Right-pads sentences into id and attention matrices.
pub fn pad_batch(batch: &[EncodedSentence]) -> (usize, Vec<u32>, Vec<u8>) {
    let cols = batch.iter().map(EncodedSentence::len).max().unwrap_or(0);
    let mut ids = vec![PAD; batch.len() * cols];
    let mut mask = vec![0u8; batch.len() * cols];
    for (r, s) in batch.iter().enumerate() {
        ids[r * cols..r * cols + s.len()].copy_from_slice(&s.ids);
        mask[r * cols..r * cols + s.len()].fill(1);
    }
    (cols, ids, mask)
}

fn maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP)
}

/// Selects each position other than CLS/SEP/PAD with probability `mask_rate`
/// and corrupts it per `replace`. Random replacements are lexical ids.
pub fn mask_batch(batch: &[EncodedSentence], vocab: &Vocabulary, mask_rate: f64, replace: &ReplaceProbs, rng_seed: u64) -> Result<MaskedBatch> {
    if !(mask_rate > 0.0 && mask_rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("mask_rate {mask_rate} not in (0,1]")));
    }
    replace.validate()?;
    if !batch.iter().flat_map(|s| &s.ids).any(|&id| maskable(id)) {
        return Err(Error::NoMaskablePositions);
    }
    let (cols, input_ids, attention_mask) = pad_batch(batch);
    let mut out = MaskedBatch {
        rows: batch.len(),
        cols,
        target_ids: vec![IGNORE_INDEX; input_ids.len()],
        input_ids,
        attention_mask,
        mask_positions: vec![Vec::new(); batch.len()],
    };
    let n_vocab = vocab.len() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for (r, s) in batch.iter().enumerate() {
        for (c, &id) in s.ids.iter().enumerate() {
            if !maskable(id) || rng.gen::<f64>() >= mask_rate {
                continue;
            }
            let flat = r * cols + c;
            out.target_ids[flat] = i64::from(id);
            out.mask_positions[r].push(c);
            let u: f64 = rng.gen();
            out.input_ids[flat] = if u < replace.mask {
                MASK
            } else if u < replace.mask + replace.random && n_vocab > NUM_SPECIALS {
                rng.gen_range(NUM_SPECIALS..n_vocab)
            } else if u < replace.mask + replace.random {
                MASK
            } else {
                id
            };
        }
    }
    Ok(out)
}
