//! Adam with polynomial decay, the MLM training loop and regression-head training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplits, Review, Split, Target};
use crate::error::{Error, Result};
use crate::eval::{encode_review_groups, mse, pseudo_nll};
use crate::model::{mix_seed, MlmModel, Mode, RegressionHead, DEFAULT_HEAD_HIDDEN};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::tokenize::{encode_reviews, mask_batch, EncodedSentence, Phase, ReplaceProbs, StrategyConfig, Vocabulary, CLS, PAD, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HparamPreset {
    /// Optimizer values for fine-tuning a pretrained encoder.
    PaperPreset,
    /// Same, with a learning rate suited to training from scratch.
    DeskPreset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialDecay {
    pub end_lr: f64,
    pub power: f64,
}

impl Default for PolynomialDecay {
    fn default() -> Self {
        Self { end_lr: 0.0, power: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: PolynomialDecay,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub hparam_preset: HparamPreset,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask_rate: f64,
    pub replace: ReplaceProbs,
    /// Return the epoch with the best dev metric instead of the last one.
    pub select_best_dev: bool,
    /// Dev sentences scored per epoch during MLM training (all when `None`).
    pub dev_max_sentences: Option<usize>,
    pub head_hidden: usize,
}

impl TrainConfig {
    pub fn preset(preset: HparamPreset) -> Self {
        Self {
            learning_rate: match preset {
                HparamPreset::PaperPreset => 1e-5,
                HparamPreset::DeskPreset => 3e-4,
            },
            schedule: PolynomialDecay::default(),
            grad_clip_norm: 5.0,
            weight_decay: 1e-6,
            dropout_rate: 0.2,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            freeze_encoder: true,
            hparam_preset: preset,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mask_rate: 0.15,
            replace: ReplaceProbs::default(),
            select_best_dev: true,
            dev_max_sentences: None,
            head_hidden: DEFAULT_HEAD_HIDDEN,
        }
    }

    /// Head-training defaults: 50 epochs.
    pub fn head_preset(preset: HparamPreset) -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            ..Self::preset(preset)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.schedule.end_lr >= 0.0) || !(self.schedule.power >= 0.0) {
            return bad("learning rate and schedule must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0,1)");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        Ok(())
    }

    /// `lr(t) = end + (lr₀ − end)·(1 − t/total)^power`, clamped at `total`.
    pub fn lr_at(&self, t: usize, total_steps: usize) -> f64 {
        let end = self.schedule.end_lr;
        if total_steps == 0 || t >= total_steps {
            return end;
        }
        let frac = 1.0 - t as f64 / total_steps as f64;
        end + (self.learning_rate - end) * frac.powf(self.schedule.power)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(HparamPreset::DeskPreset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    /// Dev pseudo-perplexity (MLM) or dev MSE (head); NaN when there is no dev data.
    pub dev_metric: f64,
    pub lr_used: f64,
}

/// First and second moments, one buffer per parameter per store.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
}

impl AdamState {
    pub fn new(stores: &[&ParamStore]) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Self {
            m: stores.iter().map(|s| zeros(s)).collect(),
            v: stores.iter().map(|s| zeros(s)).collect(),
        }
    }
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before scaling.
pub fn clip_gradients(stores: &mut [&mut ParamStore], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for s in stores.iter() {
        for p in s.iter().filter(|p| p.requires_grad) {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
                sq += g.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for s in stores.iter_mut() {
            for p in s.iter_mut().filter(|p| p.requires_grad) {
                if let Some(g) = &mut p.grad {
                    g.data_mut().iter_mut().for_each(|x| *x *= k);
                }
            }
        }
    }
    Ok(norm)
}

/// One optimizer step at 1-based `step`, using `lr_at(step − 1)`.
///
/// Gradients are clipped to the global norm first, then every trainable
/// parameter decays by `1 − lr·wd` and takes a bias-corrected Adam step.
/// Missing gradients count as zero. Returns the learning rate used.
pub fn adam_step(stores: &mut [&mut ParamStore], state: &mut AdamState, config: &TrainConfig, step: usize, total_steps: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidConfig("adam steps are numbered from 1".into()));
    }
    clip_gradients(stores, config.grad_clip_norm)?;
    let lr = config.lr_at(step - 1, total_steps);
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let decay = 1.0 - lr * config.weight_decay;
    for (si, s) in stores.iter_mut().enumerate() {
        for (pi, p) in s.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let (m, v) = (&mut state.m[si][pi], &mut state.v[si][pi]);
            let grad = p.grad.as_ref().map(Tensor::data);
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + config.adam_eps);
                *x = *x * decay - lr * update;
            }
        }
    }
    Ok(lr)
}

fn has_content(s: &EncodedSentence) -> bool {
    s.ids.iter().any(|&id| !matches!(id, CLS | SEP | PAD))
}

/// Masked-language-model training. Returns the input unchanged with no
/// reports when fine-tuning is off.
pub fn train_mlm(model: &MlmModel, splits: &DatasetSplits, vocab: &Vocabulary, strategy: &StrategyConfig, config: &TrainConfig) -> Result<(MlmModel, Vec<EpochReport>)> {
    if !strategy.fine_tune {
        return Ok((model.clone(), Vec::new()));
    }
    config.validate()?;
    if model.config().vocab_size != vocab.len() {
        return Err(Error::InvalidConfig(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    let train: Vec<EncodedSentence> = encode_reviews(&splits.train, vocab, strategy, Phase::Train).into_iter().filter(has_content).collect();
    if train.is_empty() {
        return Err(Error::EmptyCorpus("train split has no tokens".into()));
    }
    let mut dev: Vec<EncodedSentence> = encode_reviews(&splits.dev, vocab, strategy, Phase::Inference).into_iter().filter(has_content).collect();
    if let Some(cap) = config.dev_max_sentences {
        dev.truncate(cap);
    }

    let mut model = model.clone();
    let mut state = AdamState::new(&[model.params()]);
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut reports = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, MlmModel)> = None;

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let mut lr_used = config.lr_at(step, total_steps);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            step += 1;
            let batch: Vec<EncodedSentence> = idx.iter().map(|&i| train[i].clone()).collect();
            let batch_seed = mix_seed(config.seed, (epoch * 1_000_003 + b) as u64);
            let masked = mask_batch(&batch, vocab, config.mask_rate, &config.replace, batch_seed)?;
            if masked.n_masked() == 0 {
                continue;
            }
            let grads = {
                let mut tape = Tape::with_params(model.params());
                let mode = Mode::Train {
                    dropout: config.dropout_rate,
                    seed: mix_seed(batch_seed, 1),
                };
                let loss = model.mlm_loss(&mut tape, &masked, mode)?;
                loss_sum += tape.value(loss).item();
                loss_n += 1;
                tape.backward(loss)?
            };
            model.params_mut().accumulate(&grads);
            lr_used = adam_step(&mut [model.params_mut()], &mut state, config, step, total_steps)?;
            model.params_mut().zero_grad();
        }
        if !model.all_finite() {
            return Err(Error::NonFiniteGradient(format!("parameters diverged in epoch {epoch}")));
        }
        let dev_metric = if dev.is_empty() {
            f64::NAN
        } else {
            let (total, n) = pseudo_nll(&model, &dev)?;
            (total / n as f64).exp()
        };
        reports.push(EpochReport {
            epoch,
            train_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            dev_metric,
            lr_used,
        });
        if config.select_best_dev && dev_metric.is_finite() && best.as_ref().map_or(true, |(b, _)| dev_metric < *b) {
            best = Some((dev_metric, model.clone()));
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), reports))
}

/// Encoder plus regression head.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub encoder: MlmModel,
    pub head: RegressionHead,
}

impl Predictor {
    /// Scores reviews under inference-phase preprocessing.
    pub fn predict(&self, reviews: &[&Review], vocab: &Vocabulary, strategy: &StrategyConfig) -> Result<Vec<f64>> {
        let groups = encode_review_groups(reviews, vocab, strategy, Phase::Inference);
        let features = review_features_chunked(&self.encoder, &groups)?;
        self.head.predict_features(&features)
    }
}

const FEATURE_CHUNK: usize = 32;

/// Review vectors `[n, d_model]` in eval mode, computed in chunks.
pub fn review_features_chunked(model: &MlmModel, groups: &[Vec<EncodedSentence>]) -> Result<Tensor> {
    let d = model.config().d_model;
    let mut data = Vec::with_capacity(groups.len() * d);
    for chunk in groups.chunks(FEATURE_CHUNK) {
        data.extend_from_slice(model.review_features(chunk)?.data());
    }
    Tensor::new(vec![groups.len(), d], data)
}

fn gather(features: &Tensor, idx: &[usize]) -> Tensor {
    let d = features.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(features.row(i));
    }
    Tensor::new(vec![idx.len(), d], out).expect("consistent shape")
}

fn squared_error(tape: &mut Tape<'_>, pred: Var, labels: &[f64]) -> Result<Var> {
    let neg = tape.constant(Tensor::new(vec![labels.len(), 1], labels.iter().map(|y| -y).collect())?);
    let diff = tape.add(pred, neg)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Trains the MLP head (and the encoder unless frozen) to minimize MSE
/// against aggregated labels. Training reviews use train-phase
/// preprocessing, dev reviews inference-phase.
pub fn train_regressor(
    model: &MlmModel,
    head: &RegressionHead,
    splits: &DatasetSplits,
    vocab: &Vocabulary,
    strategy: &StrategyConfig,
    target: Target,
    config: &TrainConfig,
) -> Result<(Predictor, Vec<EpochReport>)> {
    config.validate()?;
    let train = splits.labeled(Split::Train, target);
    if train.is_empty() {
        return Err(Error::EmptyCorpus(format!("no labeled training reviews for {}", target.name())));
    }
    let dev = splits.labeled(Split::Dev, target);
    let train_y = train.iter().map(|r| r.label(target)).collect::<Result<Vec<f64>>>()?;
    let dev_y = dev.iter().map(|r| r.label(target)).collect::<Result<Vec<f64>>>()?;
    let train_groups = encode_review_groups(&train, vocab, strategy, Phase::Train);
    let dev_groups = encode_review_groups(&dev, vocab, strategy, Phase::Inference);

    let mut encoder = model.clone();
    let mut head = head.clone();
    head.set_output_bias(train_y.iter().sum::<f64>() / train_y.len() as f64);
    let frozen = config.freeze_encoder;
    encoder.params_mut().set_requires_grad(!frozen);

    let train_features = if frozen { Some(review_features_chunked(&encoder, &train_groups)?) } else { None };
    let dev_features = if frozen && !dev.is_empty() { Some(review_features_chunked(&encoder, &dev_groups)?) } else { None };

    let mut state = AdamState::new(&[encoder.params(), head.params()]);
    let total_steps = train.len().div_ceil(config.batch_size) * config.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut reports = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Predictor)> = None;

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let mut lr_used = config.lr_at(step, total_steps);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            step += 1;
            let labels: Vec<f64> = idx.iter().map(|&i| train_y[i]).collect();
            let seed = mix_seed(config.seed, (epoch * 1_000_003 + b) as u64);
            let (grads, vars) = {
                let mut tape = Tape::with_params(encoder.params());
                let x = match &train_features {
                    Some(f) => tape.constant(gather(f, idx)),
                    None => {
                        let groups: Vec<Vec<EncodedSentence>> = idx.iter().map(|&i| train_groups[i].clone()).collect();
                        let mode = Mode::Train {
                            dropout: config.dropout_rate,
                            seed: mix_seed(seed, 2),
                        };
                        encoder.pool_reviews(&mut tape, &groups, mode)?
                    }
                };
                let x = tape.dropout(x, config.dropout_rate, mix_seed(seed, 3));
                let vars = head.bind(&mut tape);
                let pred = head.forward(&mut tape, &vars, x)?;
                let loss = squared_error(&mut tape, pred, &labels)?;
                loss_sum += tape.value(loss).item();
                loss_n += 1;
                (tape.backward(loss)?, vars)
            };
            if !frozen {
                encoder.params_mut().accumulate(&grads);
            }
            head.accumulate(&grads, &vars);
            lr_used = adam_step(&mut [encoder.params_mut(), head.params_mut()], &mut state, config, step, total_steps)?;
            encoder.params_mut().zero_grad();
            head.params_mut().zero_grad();
        }
        let dev_metric = if dev.is_empty() {
            f64::NAN
        } else {
            let features = match &dev_features {
                Some(f) => f.clone(),
                None => review_features_chunked(&encoder, &dev_groups)?,
            };
            mse(&head.predict_features(&features)?, &dev_y)?
        };
        reports.push(EpochReport {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            dev_metric,
            lr_used,
        });
        if config.select_best_dev && dev_metric.is_finite() && best.as_ref().map_or(true, |(b, _)| dev_metric < *b) {
            best = Some((dev_metric, snapshot(&encoder, &head)));
        }
    }
    Ok((best.map(|(_, p)| p).unwrap_or_else(|| snapshot(&encoder, &head)), reports))
}

fn snapshot(encoder: &MlmModel, head: &RegressionHead) -> Predictor {
    let mut encoder = encoder.clone();
    encoder.params_mut().set_requires_grad(true);
    Predictor { encoder, head: head.clone() }
}
