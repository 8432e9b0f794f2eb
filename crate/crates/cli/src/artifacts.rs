//! Artifact directories: resolved config, manifest, vocabulary and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fillerlm_core::corpus::{parse_corpus, DatasetSplits, Target};
use fillerlm_core::model::{MlmModel, ModelConfig, RegressionHead};
use fillerlm_core::tokenize::{StrategyConfig, Vocabulary};
use fillerlm_core::train::EpochReport;
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const MANIFEST_FORMAT: &str = "fillerlm.manifest.v1";
pub const EPOCHS_FORMAT: &str = "fillerlm.epochs.v1";

pub fn mlm_dir(root: &Path, strategy: &StrategyConfig, seed: u64) -> PathBuf {
    root.join("mlm").join(strategy.key()).join(format!("seed-{seed}"))
}

pub fn head_dir(root: &Path, strategy: &StrategyConfig, target: Target, seed: u64) -> PathBuf {
    root.join("head").join(strategy.key()).join(target.name()).join(format!("seed-{seed}"))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.resolved"), &config.render())
}

pub fn load_corpus(path: &Path) -> Result<DatasetSplits> {
    let f = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    parse_corpus(BufReader::new(f)).with_context(|| format!("parsing corpus {}", path.display()))
}

/// One JSON object per epoch after a format line.
pub fn epochs_jsonl(reports: &[EpochReport]) -> Result<String> {
    let mut out = format!("{{\"format\":\"{EPOCHS_FORMAT}\"}}\n");
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Sidecar `key = value` manifest written next to every checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(strategy: &StrategyConfig, seed: u64, vocab: &Vocabulary, model: &ModelConfig) -> Result<Self> {
        let mut entries = BTreeMap::new();
        entries.insert("format".into(), MANIFEST_FORMAT.into());
        entries.insert("strategy".into(), strategy.key());
        entries.insert("seed".into(), seed.to_string());
        entries.insert("vocab_hash".into(), vocab.hash());
        entries.insert("vocab_size".into(), vocab.len().to_string());
        entries.insert("model".into(), serde_json::to_string(model)?);
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries.get(key).map(String::as_str).ok_or_else(|| anyhow!("manifest has no `{key}`"))
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("manifest.txt"), &self.render())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).with_context(|| format!("missing manifest {}; run train-mlm first", path.display()))?;
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| anyhow!("{}: malformed line `{line}`", path.display()))?;
            entries.insert(k.to_string(), v.to_string());
        }
        let m = Self { entries };
        if m.get("format")? != MANIFEST_FORMAT {
            bail!("{}: unsupported manifest format", path.display());
        }
        Ok(m)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(serde_json::from_str(self.get("model")?)?)
    }
}

/// A trained MLM with its vocabulary, loaded from `train-mlm` output.
pub struct LoadedMlm {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub model: MlmModel,
}

pub fn save_mlm(dir: &Path, config: &ExperimentConfig, strategy: &StrategyConfig, seed: u64, vocab: &Vocabulary, model: &MlmModel, epochs: &[EpochReport]) -> Result<()> {
    create_dir(dir)?;
    write_config(dir, config)?;
    Manifest::new(strategy, seed, vocab, model.config())?.write(dir)?;
    vocab.write_tsv(BufWriter::new(File::create(dir.join("vocab.tsv"))?))?;
    let mut w = BufWriter::new(File::create(dir.join("model.ckpt"))?);
    model.write(&mut w)?;
    w.flush()?;
    write_text(&dir.join("epochs.jsonl"), &epochs_jsonl(epochs)?)
}

/// Loads a model directory and checks that it matches `strategy`.
pub fn load_mlm(dir: &Path, strategy: &StrategyConfig) -> Result<LoadedMlm> {
    let manifest = Manifest::read(dir)?;
    if manifest.get("strategy")? != strategy.key() {
        bail!("{} holds strategy {}, expected {}", dir.display(), manifest.get("strategy")?, strategy.key());
    }
    let vocab_path = dir.join("vocab.tsv");
    let f = File::open(&vocab_path).with_context(|| format!("missing vocabulary {}", vocab_path.display()))?;
    let vocab = Vocabulary::read_tsv(BufReader::new(f), strategy.token)?;
    if vocab.hash() != manifest.get("vocab_hash")? {
        bail!("vocabulary hash mismatch in {}: manifest {} vs file {}", dir.display(), manifest.get("vocab_hash")?, vocab.hash());
    }
    let ckpt = dir.join("model.ckpt");
    let f = File::open(&ckpt).with_context(|| format!("missing checkpoint {}; run train-mlm first", ckpt.display()))?;
    let model = MlmModel::read(&manifest.model_config()?, BufReader::new(f)).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(LoadedMlm {
        dir: dir.to_path_buf(),
        manifest,
        vocab,
        model,
    })
}

pub fn save_head(dir: &Path, head: &RegressionHead, encoder: Option<&MlmModel>) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join("head.ckpt"))?);
    head.write(&mut w)?;
    w.flush()?;
    if let Some(enc) = encoder {
        let mut w = BufWriter::new(File::create(dir.join("encoder.ckpt"))?);
        enc.write(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn load_head(dir: &Path, d_model: usize, hidden: usize) -> Result<RegressionHead> {
    let path = dir.join("head.ckpt");
    let f = File::open(&path).with_context(|| format!("missing checkpoint {}; run train-head first", path.display()))?;
    Ok(RegressionHead::read(d_model, hidden, BufReader::new(f))?)
}

/// The fine-tuned encoder saved by joint head training, if any.
pub fn load_encoder(dir: &Path, config: &ModelConfig) -> Result<Option<MlmModel>> {
    let path = dir.join("encoder.ckpt");
    if !path.exists() {
        return Ok(None);
    }
    let f = File::open(&path)?;
    Ok(Some(MlmModel::read(config, BufReader::new(f))?))
}
