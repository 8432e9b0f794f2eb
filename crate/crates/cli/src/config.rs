//! Flat `key = value` configuration with dotted section keys.
//!
//! Resolution order: built-in defaults, then the config file, then
//! `FILLERLM_*` environment variables (`FILLERLM_MLM__EPOCHS` sets
//! `mlm.epochs`), then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fillerlm_core::corpus::{LabelRule, PositionProfile, SynthConfig, Target};
use fillerlm_core::experiment::PipelineConfig;
use fillerlm_core::model::{Activation, ModelConfig, Pooling};
use fillerlm_core::tokenize::{ReplaceProbs, StrategyConfig};
use fillerlm_core::train::{HparamPreset, PolynomialDecay, TrainConfig};

pub const ENV_PREFIX: &str = "FILLERLM_";
pub const CONFIG_FORMAT: &str = "fillerlm.config.v1";

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("corpus_path", "corpus.jsonl", "corpus file (JSON lines)"),
    ("strategy", "T1.PS3", "token and preprocessing strategy, e.g. T2.PS1"),
    ("fine_tune", "true", "train the MLM before use"),
    ("task", "mlm", "mlm | probe | confidence | sentiment | persuasiveness"),
    ("output_dir", "runs", "artifact root"),
    ("seed", "0", "seed for single-run commands"),
    ("seeds", "0,1,2,3,4,5,6,7,8,9", "seed list for compare and repro-all"),
    ("synth.seed", "0", "corpus generator seed"),
    ("synth.n_reviews", "2000", "reviews to generate"),
    ("synth.sentences_per_review", "3", ""),
    ("synth.vocab_size", "200", "pseudo-word lexicon size"),
    ("synth.filler_rate", "0.04", "expected share of filler tokens"),
    ("synth.position_profile", "decay:0.6:0.7:15", "slot masses: decay:first:ratio:max, uniform-rest:first:max or j:p,..."),
    ("synth.label_rule", "filler-dependent", "filler-dependent | filler-independent"),
    ("synth.noise_sd", "0.8", "annotator noise on the 1-7 scale"),
    ("synth.min_sentence_len", "6", ""),
    ("synth.max_sentence_len", "14", ""),
    ("synth.hesitation_share", "0.1", "share of the lexicon that follows fillers"),
    ("model.n_layers", "2", ""),
    ("model.n_heads", "4", ""),
    ("model.d_model", "64", ""),
    ("model.d_ff", "256", ""),
    ("model.max_len", "128", ""),
    ("model.tie_mlm_weights", "true", ""),
    ("model.pooling", "cls", "cls | mean"),
    ("model.activation", "gelu", "gelu | relu"),
    ("vocab.min_freq", "1", ""),
    ("vocab.max_size", "30000", "lexical entries kept"),
    ("mlm.preset", "desk", "desk | paper (sets the default learning rate)"),
    ("mlm.learning_rate", "", "empty: preset value"),
    ("mlm.end_lr", "0", ""),
    ("mlm.power", "1", "polynomial decay power"),
    ("mlm.grad_clip_norm", "5", ""),
    ("mlm.weight_decay", "1e-6", ""),
    ("mlm.dropout", "0.2", ""),
    ("mlm.epochs", "30", ""),
    ("mlm.batch_size", "32", ""),
    ("mlm.mask_rate", "0.15", ""),
    ("mlm.select_best_dev", "true", "keep the epoch with the best dev metric"),
    ("mlm.dev_max_sentences", "200", "dev sentences scored per epoch, 0 = all"),
    ("head.preset", "desk", "desk | paper"),
    ("head.learning_rate", "", "empty: preset value"),
    ("head.end_lr", "0", ""),
    ("head.power", "1", ""),
    ("head.grad_clip_norm", "5", ""),
    ("head.weight_decay", "1e-6", ""),
    ("head.dropout", "0.2", ""),
    ("head.epochs", "50", ""),
    ("head.batch_size", "16", ""),
    ("head.hidden", "64", "MLP hidden width"),
    ("head.freeze_encoder", "true", ""),
    ("head.select_best_dev", "true", ""),
    ("eval.max_sentences", "0", "test sentences scored for perplexity and probing, 0 = all"),
    ("probe.max_position", "10", ""),
    ("compare.against", "T1.PS1", "strategy compared with `strategy`"),
    ("compare.threshold", "0.005", "significance threshold"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        match self.values.get_mut(&key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}`"),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k, v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `FILLERLM_SECTION__KEY=value` for every declared key.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase().replace("__", ".");
                self.set(&key, &value).with_context(|| format!("environment variable {name}"))?;
            }
        }
        Ok(())
    }

    /// The resolved configuration, one sorted `key = value` per line.
    pub fn render(&self) -> String {
        let mut out = format!("# format: {CONFIG_FORMAT}\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>().map_err(|e| anyhow!("config key `{key}` = `{raw}`: {e}"))
    }

    fn optional_cap(&self, key: &str) -> Result<Option<usize>> {
        let n: usize = self.parse(key)?;
        Ok((n > 0).then_some(n))
    }

    pub fn strategy(&self) -> Result<StrategyConfig> {
        let mut s: StrategyConfig = self.parse("strategy")?;
        s.fine_tune &= self.parse::<bool>("fine_tune")?;
        Ok(s)
    }

    pub fn against(&self) -> Result<StrategyConfig> {
        let mut s: StrategyConfig = self.parse("compare.against")?;
        s.fine_tune &= self.parse::<bool>("fine_tune")?;
        Ok(s)
    }

    pub fn target(&self) -> Result<Option<Target>> {
        match self.get("task") {
            "mlm" | "probe" => Ok(None),
            other => Ok(Some(other.parse::<Target>()?)),
        }
    }

    pub fn corpus_path(&self) -> PathBuf {
        PathBuf::from(self.get("corpus_path"))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.get("output_dir"))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        parse_seeds(self.get("seeds"))
    }

    pub fn threshold(&self) -> Result<f64> {
        self.parse("compare.threshold")
    }

    pub fn synth_seed(&self) -> Result<u64> {
        self.parse("synth.seed")
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            n_reviews: self.parse("synth.n_reviews")?,
            sentences_per_review: self.parse("synth.sentences_per_review")?,
            vocab_size: self.parse("synth.vocab_size")?,
            filler_rate: self.parse("synth.filler_rate")?,
            position_profile: self.parse::<PositionProfile>("synth.position_profile")?,
            label_rule: self.parse::<LabelRule>("synth.label_rule")?,
            noise_sd: self.parse("synth.noise_sd")?,
            min_sentence_len: self.parse("synth.min_sentence_len")?,
            max_sentence_len: self.parse("synth.max_sentence_len")?,
            hesitation_share: self.parse("synth.hesitation_share")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let pooling = match self.get("model.pooling") {
            "cls" => Pooling::ClsToken,
            "mean" => Pooling::MeanOverTokens,
            other => bail!("config key `model.pooling`: unknown pooling `{other}`"),
        };
        let activation = match self.get("model.activation") {
            "gelu" => Activation::Gelu,
            "relu" => Activation::Relu,
            other => bail!("config key `model.activation`: unknown activation `{other}`"),
        };
        Ok(ModelConfig {
            n_layers: self.parse("model.n_layers")?,
            n_heads: self.parse("model.n_heads")?,
            d_model: self.parse("model.d_model")?,
            d_ff: self.parse("model.d_ff")?,
            max_len: self.parse("model.max_len")?,
            tie_mlm_weights: self.parse("model.tie_mlm_weights")?,
            pooling,
            activation,
            ..ModelConfig::default()
        })
    }

    fn train_section(&self, section: &str, base: fn(HparamPreset) -> TrainConfig) -> Result<TrainConfig> {
        let key = |k: &str| format!("{section}.{k}");
        let preset = match self.get(&key("preset")) {
            "desk" => HparamPreset::DeskPreset,
            "paper" => HparamPreset::PaperPreset,
            other => bail!("config key `{}`: unknown preset `{other}`", key("preset")),
        };
        let mut cfg = base(preset);
        if !self.get(&key("learning_rate")).is_empty() {
            cfg.learning_rate = self.parse(&key("learning_rate"))?;
        }
        cfg.schedule = PolynomialDecay {
            end_lr: self.parse(&key("end_lr"))?,
            power: self.parse(&key("power"))?,
        };
        cfg.grad_clip_norm = self.parse(&key("grad_clip_norm"))?;
        cfg.weight_decay = self.parse(&key("weight_decay"))?;
        cfg.dropout_rate = self.parse(&key("dropout"))?;
        cfg.epochs = self.parse(&key("epochs"))?;
        cfg.batch_size = self.parse(&key("batch_size"))?;
        cfg.select_best_dev = self.parse(&key("select_best_dev"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mlm(&self) -> Result<TrainConfig> {
        let mut cfg = self.train_section("mlm", TrainConfig::preset)?;
        cfg.mask_rate = self.parse("mlm.mask_rate")?;
        cfg.replace = ReplaceProbs::default();
        cfg.dev_max_sentences = self.optional_cap("mlm.dev_max_sentences")?;
        Ok(cfg)
    }

    pub fn head(&self) -> Result<TrainConfig> {
        let mut cfg = self.train_section("head", TrainConfig::head_preset)?;
        cfg.head_hidden = self.parse("head.hidden")?;
        cfg.freeze_encoder = self.parse("head.freeze_encoder")?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            synth: self.synth()?,
            model: self.model()?,
            mlm: self.mlm()?,
            head: self.head()?,
            vocab_min_freq: self.parse("vocab.min_freq")?,
            vocab_max_size: self.parse("vocab.max_size")?,
            probe_max_position: self.parse("probe.max_position")?,
            eval_max_sentences: self.optional_cap("eval.max_sentences")?,
        })
    }

    /// Parses every typed section so that errors surface before any work.
    pub fn validate(&self) -> Result<()> {
        self.pipeline()?;
        self.strategy()?;
        self.against()?;
        self.target()?;
        self.seed()?;
        let seeds = self.seeds()?;
        if seeds.is_empty() {
            bail!("config key `seeds` is empty");
        }
        self.threshold()?;
        self.synth_seed()?;
        Ok(())
    }
}

pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|e| anyhow!("bad seed `{s}`: {e}")))
        .collect()
}

/// The `--help` listing of keys and defaults.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (default in brackets):\n");
    for (k, v, doc) in KEYS {
        out.push_str(&format!("  {k} [{v}]"));
        if !doc.is_empty() {
            out.push_str(&format!("  {doc}"));
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "\nEnvironment: {ENV_PREFIX}<KEY> with dots written as `__`, e.g. {ENV_PREFIX}MLM__EPOCHS=5.\n"
    ));
    out
}
