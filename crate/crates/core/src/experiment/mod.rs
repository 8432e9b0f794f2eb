//! End-to-end pipelines: vocabulary, MLM training, perplexity, probing and
//! downstream regression for one strategy and seed.

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplits, Review, Split, SynthConfig, Target};
use crate::error::{Error, Result};
use crate::eval::{
    empirical_filler_distribution, mse, mse_eval, probe_filler_positions, pseudo_perplexity, random_baseline, ModelTag, MseReport,
    PerplexityReport, ProbeCurve,
};
use crate::model::{mix_seed, MlmModel, ModelConfig, RegressionHead};
use crate::tokenize::{build_vocab, PreprocStrategy, StrategyConfig, TokenStrategy, Vocabulary};
use crate::train::{train_mlm, train_regressor, EpochReport, Predictor, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    /// `vocab_size` is replaced by the size of the built vocabulary.
    pub model: ModelConfig,
    pub mlm: TrainConfig,
    pub head: TrainConfig,
    pub vocab_min_freq: usize,
    pub vocab_max_size: usize,
    pub probe_max_position: usize,
    /// Test sentences scored for perplexity (all when `None`).
    pub eval_max_sentences: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut mlm = TrainConfig::default();
        mlm.dev_max_sentences = Some(200);
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            mlm,
            head: TrainConfig::head_preset(crate::train::HparamPreset::DeskPreset),
            vocab_min_freq: 1,
            vocab_max_size: 30_000,
            probe_max_position: 10,
            eval_max_sentences: None,
        }
    }
}

/// Vocabulary from the training split's raw text; identical for every
/// preprocessing strategy under one token strategy.
pub fn vocab_for(splits: &DatasetSplits, token: TokenStrategy, cfg: &PipelineConfig) -> Result<Vocabulary> {
    let s = StrategyConfig::new(token, PreprocStrategy::PS3, true);
    build_vocab(&splits.train, &s, cfg.vocab_min_freq, cfg.vocab_max_size)
}

pub fn model_config_for(vocab: &Vocabulary, cfg: &PipelineConfig) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        dropout_rate: cfg.mlm.dropout_rate,
        ..cfg.model.clone()
    }
}

#[derive(Clone, Debug)]
pub struct MlmRun {
    pub strategy: StrategyConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub model: MlmModel,
    pub epochs: Vec<EpochReport>,
}

/// Seeded init followed by MLM training (skipped without fine-tuning).
pub fn fit_mlm(splits: &DatasetSplits, strategy: &StrategyConfig, cfg: &PipelineConfig, seed: u64) -> Result<MlmRun> {
    let vocab = vocab_for(splits, strategy.token, cfg)?;
    let model = MlmModel::init(&model_config_for(&vocab, cfg), mix_seed(seed, 101))?;
    let train_cfg = TrainConfig { seed, ..cfg.mlm.clone() };
    let (model, epochs) = train_mlm(&model, splits, &vocab, strategy, &train_cfg)?;
    Ok(MlmRun {
        strategy: *strategy,
        seed,
        vocab,
        model,
        epochs,
    })
}

/// The reviews scored for perplexity: the test split, truncated to at most
/// `eval_max_sentences` sentences (whole reviews only).
pub fn eval_reviews<'a>(splits: &'a DatasetSplits, cfg: &PipelineConfig) -> Vec<&'a Review> {
    let mut out = Vec::new();
    let mut n = 0;
    for r in &splits.test {
        if cfg.eval_max_sentences.is_some_and(|cap| n + r.sentences.len() > cap) {
            break;
        }
        n += r.sentences.len();
        out.push(r);
    }
    out
}

pub fn run_perplexity(run: &MlmRun, splits: &DatasetSplits, cfg: &PipelineConfig) -> Result<PerplexityReport> {
    pseudo_perplexity(&run.model, eval_reviews(splits, cfg), &run.vocab, &run.strategy)
}

/// The four series of the positional probe over the test split.
pub fn run_probe(with_fillers: &MlmRun, without_fillers: &MlmRun, splits: &DatasetSplits, cfg: &PipelineConfig) -> Result<Vec<ProbeCurve>> {
    if with_fillers.vocab != without_fillers.vocab {
        return Err(Error::InvalidConfig("probe models must share a vocabulary".into()));
    }
    let reviews = eval_reviews(splits, cfg);
    let max = cfg.probe_max_position;
    let lm = probe_filler_positions(&with_fillers.model, reviews.iter().copied(), &with_fillers.vocab, max, ModelTag::WithFillers)?;
    let nolm = probe_filler_positions(&without_fillers.model, reviews.iter().copied(), &without_fillers.vocab, max, ModelTag::WithoutFillers)?;
    let random = random_baseline(&with_fillers.vocab, &lm);
    let empirical = empirical_filler_distribution(reviews.iter().copied(), max);
    Ok(vec![lm, nolm, random, empirical])
}

#[derive(Clone, Debug)]
pub struct HeadRun {
    pub predictor: Predictor,
    pub epochs: Vec<EpochReport>,
    pub report: MseReport,
    /// Test MSE of predicting the training-label mean.
    pub baseline_mse: f64,
}

/// Trains a regression head on top of an MLM run and scores the test split.
pub fn fit_head(run: &MlmRun, splits: &DatasetSplits, target: Target, cfg: &PipelineConfig) -> Result<HeadRun> {
    let d = run.model.config().d_model;
    let head = RegressionHead::init(d, cfg.head.head_hidden, mix_seed(run.seed, 202));
    let train_cfg = TrainConfig {
        seed: mix_seed(run.seed, 303),
        ..cfg.head.clone()
    };
    let (predictor, epochs) = train_regressor(&run.model, &head, splits, &run.vocab, &run.strategy, target, &train_cfg)?;
    let test = splits.labeled(Split::Test, target);
    let report = mse_eval(&predictor, &test, &run.vocab, &run.strategy, target)?;
    Ok(HeadRun {
        baseline_mse: constant_baseline(splits, target)?,
        predictor,
        epochs,
        report,
    })
}

/// Test MSE of the constant predictor at the training-label mean.
pub fn constant_baseline(splits: &DatasetSplits, target: Target) -> Result<f64> {
    let train = splits.labeled(Split::Train, target);
    let test = splits.labeled(Split::Test, target);
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyCorpus(format!("no labeled reviews for {}", target.name())));
    }
    let mean = train.iter().map(|r| r.label(target)).sum::<Result<f64>>()? / train.len() as f64;
    let labels = test.iter().map(|r| r.label(target)).collect::<Result<Vec<f64>>>()?;
    mse(&vec![mean; labels.len()], &labels)
}

/// One row of a seed sweep summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetric {
    pub strategy: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}
