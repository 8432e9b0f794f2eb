//! Post-LN transformer encoder with an MLM head, and the regression MLP.
//!
//! Parameter count with tied MLM weights, for vocabulary `V`, width `d`,
//! feed-forward width `f`, `n` layers and `P` positions:
//!
//! ```text
//! V·d + P·d + 2d + n·(4d² + 2d·f + 9d + f) + V
//! ```
//!
//! Untied weights add one `[V, d]` output matrix.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{load_into, write_checkpoint};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenize::{pad_batch, EncodedSentence, MaskedBatch};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-12;
pub const DEFAULT_HEAD_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    ClsToken,
    MeanOverTokens,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub tie_mlm_weights: bool,
    pub pooling: Pooling,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 128,
            vocab_size: 1000,
            dropout_rate: 0.2,
            tie_mlm_weights: true,
            pooling: Pooling::ClsToken,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.max_len < 2 || self.vocab_size == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive (max_len ≥ 2)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!("dropout_rate {} not in [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Closed-form parameter count (see module docs).
    pub fn param_count(&self) -> usize {
        let (v, d, f, p) = (self.vocab_size, self.d_model, self.d_ff, self.max_len);
        let per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        let untied = if self.tie_mlm_weights { 0 } else { v * d };
        v * d + p * d + 2 * d + self.n_layers * per_layer + v + untied
    }
}

/// Whether dropout is active for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout: f64, seed: u64 },
}

impl Mode {
    fn dropout(&self, tape: &mut Tape<'_>, x: Var, site: u64) -> Var {
        match *self {
            Mode::Eval => x,
            Mode::Train { dropout, seed } => tape.dropout(x, dropout, mix_seed(seed, site)),
        }
    }
}

/// Derives an independent seed for one call site.
pub fn mix_seed(seed: u64, site: u64) -> u64 {
    let mut z = seed ^ site.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
struct ModelIds {
    tok: ParamId,
    pos: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    layers: Vec<LayerIds>,
    mlm_w: Option<ParamId>,
    mlm_bias: ParamId,
}

/// Hidden states of a padded batch, `[rows·cols, d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct Hidden {
    pub var: Var,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug)]
pub struct MlmModel {
    config: ModelConfig,
    params: ParamStore,
    ids: ModelIds,
}

impl PartialEq for MlmModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.iter().zip(other.params.iter()).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl MlmModel {
    /// Weights `N(0, 0.02)`, biases 0, layer-norm gains 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let mut s = ParamStore::new();
        let mut normal = |s: &mut ParamStore, name: String, shape: &[usize]| s.add(name, Tensor::randn(shape, INIT_STD, &mut rng));
        let tok = normal(&mut s, "emb.tok".into(), &[v, d]);
        let pos = normal(&mut s, "emb.pos".into(), &[config.max_len, d]);
        let ln_g = s.add("emb.ln.g", Tensor::ones(&[d]));
        let ln_b = s.add("emb.ln.b", Tensor::zeros(&[d]));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            layers.push(LayerIds {
                wq: normal(&mut s, p("attn.wq"), &[d, d]),
                bq: s.add(p("attn.bq"), Tensor::zeros(&[d])),
                wk: normal(&mut s, p("attn.wk"), &[d, d]),
                bk: s.add(p("attn.bk"), Tensor::zeros(&[d])),
                wv: normal(&mut s, p("attn.wv"), &[d, d]),
                bv: s.add(p("attn.bv"), Tensor::zeros(&[d])),
                wo: normal(&mut s, p("attn.wo"), &[d, d]),
                bo: s.add(p("attn.bo"), Tensor::zeros(&[d])),
                ln1_g: s.add(p("ln1.g"), Tensor::ones(&[d])),
                ln1_b: s.add(p("ln1.b"), Tensor::zeros(&[d])),
                w1: normal(&mut s, p("ffn.w1"), &[d, f]),
                b1: s.add(p("ffn.b1"), Tensor::zeros(&[f])),
                w2: normal(&mut s, p("ffn.w2"), &[f, d]),
                b2: s.add(p("ffn.b2"), Tensor::zeros(&[d])),
                ln2_g: s.add(p("ln2.g"), Tensor::ones(&[d])),
                ln2_b: s.add(p("ln2.b"), Tensor::zeros(&[d])),
            });
        }
        let mlm_w = (!config.tie_mlm_weights).then(|| normal(&mut s, "mlm.w".into(), &[v, d]));
        let mlm_bias = s.add("mlm.bias", Tensor::zeros(&[v]));
        Ok(Self {
            config: config.clone(),
            params: s,
            ids: ModelIds {
                tok,
                pos,
                ln_g,
                ln_b,
                layers,
                mlm_w,
                mlm_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        write_checkpoint(&self.params, w)
    }

    /// Loads weights saved by [`Self::write`] for the same config.
    pub fn read<R: BufRead>(config: &ModelConfig, r: R) -> Result<Self> {
        let mut m = Self::init(config, 0)?;
        load_into(&mut m.params, r)?;
        Ok(m)
    }

    /// Runs the encoder over a right-padded id matrix `[rows, cols]`.
    pub fn encode_batch(&self, tape: &mut Tape<'_>, ids: &[u32], attention: &[u8], rows: usize, mode: Mode) -> Result<Hidden> {
        let c = &self.config;
        if rows == 0 || ids.len() % rows != 0 || attention.len() != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "encode_batch",
                left: vec![ids.len()],
                right: vec![rows, attention.len()],
            });
        }
        let cols = ids.len() / rows;
        if cols > c.max_len {
            return Err(Error::SequenceTooLong { len: cols, max_len: c.max_len });
        }
        let pos_ids: Vec<u32> = (0..rows).flat_map(|_| 0..cols as u32).collect();
        let tok = tape.param(self.ids.tok);
        let pos = tape.param(self.ids.pos);
        let te = tape.embedding(tok, ids)?;
        let pe = tape.embedding(pos, &pos_ids)?;
        let x = tape.add(te, pe)?;
        let (g, b) = (tape.param(self.ids.ln_g), tape.param(self.ids.ln_b));
        let x = tape.layer_norm(x, g, b, LN_EPS)?;
        let mut x = mode.dropout(tape, x, 0);

        let valid: Vec<bool> = attention.iter().map(|&a| a != 0).collect();
        let h = c.n_heads;
        let scale = 1.0 / ((c.d_model / h) as f64).sqrt();
        for (l, ids) in self.ids.layers.iter().enumerate() {
            let site = 1 + 3 * l as u64;
            let proj = |tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
                let (w, b) = (tape.param(w), tape.param(b));
                let y = tape.matmul(x, w)?;
                tape.add_bias(y, b)
            };
            let q = proj(tape, x, ids.wq, ids.bq)?;
            let k = proj(tape, x, ids.wk, ids.bk)?;
            let v = proj(tape, x, ids.wv, ids.bv)?;
            let q = tape.split_heads(q, rows, cols, h)?;
            let k = tape.split_heads(k, rows, cols, h)?;
            let v = tape.split_heads(v, rows, cols, h)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.mask_keys(scores, &valid, h)?;
            let probs = tape.row_softmax(scores)?;
            let ctx = tape.bmm(probs, v, false)?;
            let ctx = tape.merge_heads(ctx, rows, cols, h)?;
            let attn = proj(tape, ctx, ids.wo, ids.bo)?;
            let attn = mode.dropout(tape, attn, site);
            let x1 = tape.add(x, attn)?;
            let (g, b) = (tape.param(ids.ln1_g), tape.param(ids.ln1_b));
            let x1 = tape.layer_norm(x1, g, b, LN_EPS)?;

            let hdn = proj(tape, x1, ids.w1, ids.b1)?;
            let hdn = match c.activation {
                Activation::Gelu => tape.gelu(hdn),
                Activation::Relu => tape.relu(hdn),
            };
            let ff = proj(tape, hdn, ids.w2, ids.b2)?;
            let ff = mode.dropout(tape, ff, site + 1);
            let x2 = tape.add(x1, ff)?;
            let (g, b) = (tape.param(ids.ln2_g), tape.param(ids.ln2_b));
            x = tape.layer_norm(x2, g, b, LN_EPS)?;
        }
        Ok(Hidden { var: x, rows, cols })
    }

    /// Encodes already framed sentences, padding them to a common length.
    pub fn encode_sentences(&self, tape: &mut Tape<'_>, batch: &[EncodedSentence], mode: Mode) -> Result<Hidden> {
        let (_, ids, mask) = pad_batch(batch);
        self.encode_batch(tape, &ids, &mask, batch.len(), mode)
    }

    /// MLM logits `[n, |V|]` for the hidden rows `rows` (flat `row·cols + col` indices).
    pub fn mlm_logits_at(&self, tape: &mut Tape<'_>, hidden: &Hidden, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden.var, rows)?;
        self.project_vocab(tape, h)
    }

    /// MLM logits for every position, `[rows·cols, |V|]`.
    pub fn mlm_logits(&self, tape: &mut Tape<'_>, hidden: &Hidden) -> Result<Var> {
        self.project_vocab(tape, hidden.var)
    }

    fn project_vocab(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let w = tape.param(self.ids.mlm_w.unwrap_or(self.ids.tok));
        let bias = tape.param(self.ids.mlm_bias);
        let logits = tape.matmul_nt(h, w)?;
        tape.add_bias(logits, bias)
    }

    /// Mean cross-entropy at the batch's selected positions (0 when none).
    pub fn mlm_loss(&self, tape: &mut Tape<'_>, batch: &MaskedBatch, mode: Mode) -> Result<Var> {
        let positions = batch.flat_mask_positions();
        if positions.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let hidden = self.encode_batch(tape, &batch.input_ids, &batch.attention_mask, batch.rows, mode)?;
        let logits = self.mlm_logits_at(tape, &hidden, &positions)?;
        tape.cross_entropy(logits, &batch.masked_targets())
    }

    /// Log-probabilities over the vocabulary at the given flat positions,
    /// evaluated without dropout.
    pub fn log_probs_at(&self, ids: &[u32], attention: &[u8], rows: usize, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::with_params(&self.params);
        let hidden = self.encode_batch(&mut tape, ids, attention, rows, Mode::Eval)?;
        let logits = self.mlm_logits_at(&mut tape, &hidden, positions)?;
        let t = tape.value(logits);
        Ok((0..positions.len())
            .map(|i| {
                let row = t.row(i);
                let lse = crate::numerics::log_sum_exp(row);
                row.iter().map(|x| x - lse).collect()
            })
            .collect())
    }

    /// Sentence vectors `[n_sentences, d_model]` under the configured pooling.
    pub fn pool_sentences(&self, tape: &mut Tape<'_>, batch: &[EncodedSentence], mode: Mode) -> Result<Var> {
        let hidden = self.encode_sentences(tape, batch, mode)?;
        let cols = hidden.cols;
        match self.config.pooling {
            Pooling::ClsToken => {
                let idx: Vec<usize> = (0..batch.len()).map(|r| r * cols).collect();
                tape.gather_rows(hidden.var, &idx)
            }
            Pooling::MeanOverTokens => {
                let segs: Vec<Vec<usize>> = batch.iter().enumerate().map(|(r, s)| (r * cols..r * cols + s.len()).collect()).collect();
                tape.segment_mean(hidden.var, &segs)
            }
        }
    }

    /// Review vectors `[n_reviews, d_model]`: the mean of each review's sentence vectors.
    pub fn pool_reviews(&self, tape: &mut Tape<'_>, reviews: &[Vec<EncodedSentence>], mode: Mode) -> Result<Var> {
        let mut flat = Vec::new();
        let mut segments = Vec::with_capacity(reviews.len());
        for r in reviews {
            if r.is_empty() {
                return Err(Error::InvalidConfig("review has no sentences".into()));
            }
            segments.push((flat.len()..flat.len() + r.len()).collect());
            flat.extend(r.iter().cloned());
        }
        let sentences = self.pool_sentences(tape, &flat, mode)?;
        tape.segment_mean(sentences, &segments)
    }

    /// Review vectors as plain rows, computed without dropout.
    pub fn review_features(&self, reviews: &[Vec<EncodedSentence>]) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let v = self.pool_reviews(&mut tape, reviews, Mode::Eval)?;
        Ok(tape.value(v).clone())
    }
}

/// `d_model → hidden → 1` MLP with a tanh hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionHead {
    params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Head parameters bound as leaves of a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl RegressionHead {
    pub fn init(d_model: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let w1 = s.add("head.w1", Tensor::randn(&[d_model, hidden], INIT_STD, &mut rng));
        let b1 = s.add("head.b1", Tensor::zeros(&[hidden]));
        let w2 = s.add("head.w2", Tensor::randn(&[hidden, 1], INIT_STD, &mut rng));
        let b2 = s.add("head.b2", Tensor::zeros(&[1]));
        Self { params: s, w1, b1, w2, b2 }
    }

    pub fn d_model(&self) -> usize {
        self.params.value(self.w1).shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.params.value(self.w1).shape()[1]
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_output_bias(&mut self, b: f64) {
        self.params.get_mut(self.b2).value = Tensor::vector(vec![b]);
    }

    /// Zeroes every weight and sets the output bias.
    pub fn set_constant(&mut self, b: f64) {
        for p in self.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        self.set_output_bias(b);
    }

    pub fn bind(&self, tape: &mut Tape<'_>) -> HeadVars {
        let mut leaf = |id: ParamId| tape.leaf(self.params.value(id).clone());
        HeadVars {
            w1: leaf(self.w1),
            b1: leaf(self.b1),
            w2: leaf(self.w2),
            b2: leaf(self.b2),
        }
    }

    /// Predictions `[n, 1]` for review vectors `[n, d_model]`.
    pub fn forward(&self, tape: &mut Tape<'_>, vars: &HeadVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars.w1)?;
        let h = tape.add_bias(h, vars.b1)?;
        let h = tape.tanh(h);
        let y = tape.matmul(h, vars.w2)?;
        tape.add_bias(y, vars.b2)
    }

    /// Adds the gradients of the bound leaves into the head's buffers.
    pub fn accumulate(&mut self, grads: &crate::numerics::Gradients, vars: &HeadVars) {
        for (id, v) in [(self.w1, vars.w1), (self.b1, vars.b1), (self.w2, vars.w2), (self.b2, vars.b2)] {
            if let Some(g) = grads.wrt(v) {
                self.params.add_grad(id, g);
            }
        }
    }

    /// Scores for precomputed review vectors.
    pub fn predict_features(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(features.clone());
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        write_checkpoint(&self.params, w)
    }

    pub fn read<R: BufRead>(d_model: usize, hidden: usize, r: R) -> Result<Self> {
        let mut h = Self::init(d_model, hidden, 0);
        load_into(&mut h.params, r)?;
        Ok(h)
    }
}

/// Score for one review: sentence vectors are pooled, averaged and fed to the head.
pub fn pool_and_predict(model: &MlmModel, head: &RegressionHead, review_sentences: &[EncodedSentence]) -> Result<f64> {
    if review_sentences.is_empty() {
        return Err(Error::InvalidConfig("review has no sentences".into()));
    }
    let features = model.review_features(&[review_sentences.to_vec()])?;
    Ok(head.predict_features(&features)?[0])
}
