//! Decoder-only sequence model over item token blocks.
//!
//! A sequence of n items becomes `1 + n·K` positions: a BOS position followed
//! by each item's K tokens. Every position sums two independently
//! layer-normalized streams (token embedding and a linear projection of the
//! item's raw embedding sub-vector) with a positional embedding. Attention is
//! bidirectional inside an item block and causal across blocks.
//!
//! Predictions are slot aligned: the logits at slot k of item m score slot k
//! of item m + 1, so one forward pass yields all K next-item distributions.
//! The output projection is tied to the token embedding table.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::embedding::EmbeddingCatalog;
use crate::error::{Error, Result};
use crate::fsq::{ItemTokenSequence, TokenId};
use crate::nn::{log_softmax_in_place, prefixed, AttentionMask, BlockCache, LayerNorm, LayerNormCache, Matrix, Parameters, TransformerBlock};
use crate::optim::{Adam, AdamSettings};

const MODEL_MAGIC: &[u8; 6] = b"SRSEQ\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// d_ar
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// T, the maximum number of token positions (BOS excluded).
    pub max_positions: usize,
    /// K
    pub tokens_per_item: usize,
    pub vocab: usize,
    /// d_L / K, width of the auxiliary feature per position.
    pub sub_dim: usize,
}

impl ModelConfig {
    pub fn full(vocab: usize, sub_dim: usize) -> Self {
        Self {
            d_model: 768,
            n_layers: 3,
            n_heads: 12,
            max_positions: 1024,
            tokens_per_item: 4,
            vocab,
            sub_dim,
        }
    }

    pub fn desk(vocab: usize, sub_dim: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_positions: 64,
            tokens_per_item: 4,
            vocab,
            sub_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_positions,
            self.tokens_per_item,
            self.vocab,
            self.sub_dim,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.max_positions % self.tokens_per_item != 0 {
            return Err(Error::Config(format!(
                "T = {} is not a multiple of K = {}",
                self.max_positions, self.tokens_per_item
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_ar = {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn max_items(&self) -> usize {
        self.max_positions / self.tokens_per_item
    }
}

/// One item as the model sees it: K tokens and its raw embedding (K·d_sub).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedItem {
    pub tokens: Vec<TokenId>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenizedSequence {
    pub items: Vec<TokenizedItem>,
}

impl TokenizedSequence {
    pub fn new(items: Vec<TokenizedItem>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Keeps the most recent `max_items` items.
    pub fn truncated(&self, max_items: usize) -> TokenizedSequence {
        let start = self.items.len().saturating_sub(max_items);
        TokenizedSequence {
            items: self.items[start..].to_vec(),
        }
    }

    pub fn prefix(&self, n: usize) -> TokenizedSequence {
        TokenizedSequence {
            items: self.items[..n.min(self.items.len())].to_vec(),
        }
    }
}

/// Lookup from item id to its tokens and raw embedding.
#[derive(Debug, Clone, Default)]
pub struct ItemTable {
    items: HashMap<String, TokenizedItem>,
}

impl ItemTable {
    pub fn build(tokens: &[ItemTokenSequence], embeddings: &EmbeddingCatalog) -> Result<Self> {
        let vectors: HashMap<&str, &[f64]> = embeddings
            .iter()
            .map(|e| (e.item_id.as_str(), e.vector.as_slice()))
            .collect();
        let items = tokens
            .iter()
            .map(|t| {
                let features = vectors
                    .get(t.item_id.as_str())
                    .ok_or_else(|| Error::UnknownItem(t.item_id.clone()))?;
                Ok((
                    t.item_id.clone(),
                    TokenizedItem {
                        tokens: t.tokens.clone(),
                        features: features.to_vec(),
                    },
                ))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { items })
    }

    pub fn get(&self, item_id: &str) -> Option<&TokenizedItem> {
        self.items.get(item_id)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.items.contains_key(item_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sequence<S: AsRef<str>>(&self, item_ids: &[S]) -> Result<TokenizedSequence> {
        item_ids
            .iter()
            .map(|id| {
                self.items
                    .get(id.as_ref())
                    .cloned()
                    .ok_or_else(|| Error::UnknownItem(id.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenizedSequence::new)
    }
}

/// K per-slot categorical distributions over the vocabulary, stored as log
/// probabilities. The joint over the next item's tokens is their product.
#[derive(Debug, Clone, PartialEq)]
pub struct NextItemDistribution {
    pub slots: Vec<Vec<f64>>,
}

impl NextItemDistribution {
    pub fn from_logits(slots: Vec<Vec<f64>>) -> Self {
        let slots = slots
            .into_iter()
            .map(|mut s| {
                log_softmax_in_place(&mut s);
                s
            })
            .collect();
        Self { slots }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn log_prob(&self, slot: usize, token: TokenId) -> f64 {
        self.slots[slot][token as usize]
    }

    pub fn probabilities(&self, slot: usize) -> Vec<f64> {
        self.slots[slot].iter().map(|l| l.exp()).collect()
    }

    /// Sum of slot log-probabilities, accumulated in slot order from 0.
    pub fn sequence_log_prob(&self, tokens: &[TokenId]) -> f64 {
        tokens
            .iter()
            .enumerate()
            .fold(0.0, |acc, (k, &t)| acc + self.slots[k][t as usize])
    }
}

/// Anything that maps a history to next-item slot distributions.
pub trait NextItemPredictor {
    fn tokens_per_item(&self) -> usize;
    fn predict_next_item(&self, history: &TokenizedSequence) -> Result<NextItemDistribution>;
}

/// Position `p` may attend to `q` iff `block(q) ≤ block(p)`, with BOS in
/// block 0 and token position `p ≥ 1` in block `1 + (p − 1) / K`.
pub fn build_block_mask(n_items: usize, tokens_per_item: usize) -> AttentionMask {
    let k = tokens_per_item.max(1);
    let block = |p: usize| if p == 0 { 0 } else { 1 + (p - 1) / k };
    AttentionMask::from_fn(1 + n_items * k, |p, q| block(q) <= block(p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    config: ModelConfig,
    /// E_wte, `vocab × d_ar`; also the output projection.
    pub token_embedding: Matrix,
    pub bos_embedding: Matrix,
    /// E_wpe, `(T + 1) × d_ar`; row 0 belongs to BOS.
    pub position_embedding: Matrix,
    /// `d_sub × d_ar`
    pub aux_projection: Matrix,
    pub aux_norm: LayerNorm,
    pub token_norm: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

/// Everything `backward` needs from one forward pass.
pub struct ForwardCache {
    n_positions: usize,
    tokens: Vec<Option<TokenId>>,
    features: Matrix,
    aux_norm: LayerNormCache,
    token_norm: LayerNormCache,
    blocks: Vec<BlockCache>,
    final_norm: Option<LayerNormCache>,
    hidden: Matrix,
    logit_positions: Vec<usize>,
}

impl ForwardCache {
    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    /// Final hidden states (after the last layer norm), one row per position.
    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn aux_normalized(&self) -> &Matrix {
        self.aux_norm.normalized()
    }

    pub fn token_normalized(&self) -> &Matrix {
        self.token_norm.normalized()
    }
}

/// Result of [`SequenceModel::ar_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArLoss {
    /// Mean negative log-likelihood over scored positions.
    pub loss: f64,
    /// Log-probability of each scored target, ordered by (item, slot).
    pub target_log_probs: Vec<f64>,
}

impl SequenceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        Ok(Self {
            config,
            token_embedding: Matrix::random_normal(config.vocab, d, 0.02, &mut rng),
            bos_embedding: Matrix::random_normal(1, d, 0.02, &mut rng),
            position_embedding: Matrix::random_normal(config.max_positions + 1, d, 0.01, &mut rng),
            aux_projection: Matrix::random_normal(config.sub_dim, d, 1.0 / (config.sub_dim as f64).sqrt(), &mut rng),
            aux_norm: LayerNorm::new(d),
            token_norm: LayerNorm::new(d),
            blocks: (0..config.n_layers)
                .map(|_| TransformerBlock::new(d, config.n_heads, config.n_layers, 0.02, &mut rng))
                .collect(),
            final_norm: LayerNorm::new(d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_grad();
        g
    }

    fn check_sequence(&self, seq: &TokenizedSequence) -> Result<()> {
        let c = &self.config;
        if seq.len() * c.tokens_per_item > c.max_positions {
            return Err(Error::Shape(format!(
                "{} items exceed T = {} positions; truncate first",
                seq.len(),
                c.max_positions
            )));
        }
        for item in &seq.items {
            if item.tokens.len() != c.tokens_per_item {
                return Err(Error::Shape(format!("item has {} tokens, expected {}", item.tokens.len(), c.tokens_per_item)));
            }
            if item.features.len() != c.tokens_per_item * c.sub_dim {
                return Err(Error::Shape(format!(
                    "item features have length {}, expected {}",
                    item.features.len(),
                    c.tokens_per_item * c.sub_dim
                )));
            }
            if let Some(t) = item.tokens.iter().find(|&&t| t as usize >= c.vocab) {
                return Err(Error::OutOfRange(format!("token {t} >= vocab {}", c.vocab)));
            }
        }
        Ok(())
    }

    /// Input matrix X (positions × d_ar) and the caches of both input norms.
    fn compose(&self, seq: &TokenizedSequence) -> Result<(Matrix, ForwardCache)> {
        self.check_sequence(seq)?;
        let c = &self.config;
        let d = c.d_model;
        let n = 1 + seq.len() * c.tokens_per_item;
        let mut tokens = Vec::with_capacity(n);
        tokens.push(None);
        let mut features = Matrix::zeros(n, c.sub_dim);
        let mut tok_in = Matrix::zeros(n, d);
        tok_in.row_mut(0).copy_from_slice(self.bos_embedding.row(0));
        let mut p = 1;
        for item in &seq.items {
            for (k, &t) in item.tokens.iter().enumerate() {
                tokens.push(Some(t));
                features
                    .row_mut(p)
                    .copy_from_slice(&item.features[k * c.sub_dim..(k + 1) * c.sub_dim]);
                tok_in
                    .row_mut(p)
                    .copy_from_slice(self.token_embedding.row(t as usize));
                p += 1;
            }
        }
        let aux_in = features.matmul(&self.aux_projection);
        let (aux, aux_norm) = self.aux_norm.forward(&aux_in);
        let (tok, token_norm) = self.token_norm.forward(&tok_in);
        let mut x = aux;
        x.add_assign(&tok);
        for r in 0..n {
            for (v, w) in x.row_mut(r).iter_mut().zip(self.position_embedding.row(r)) {
                *v += w;
            }
        }
        let cache = ForwardCache {
            n_positions: n,
            tokens,
            features,
            aux_norm,
            token_norm,
            blocks: Vec::new(),
            final_norm: None,
            hidden: Matrix::zeros(0, 0),
            logit_positions: Vec::new(),
        };
        Ok((x, cache))
    }

    /// X = LN_aux(E_aux) + LN_tok(E_wte) + E_wpe for every position.
    pub fn compose_inputs(&self, seq: &TokenizedSequence) -> Result<Matrix> {
        Ok(self.compose(seq)?.0)
    }

    /// Runs the stack and returns logits (one row per entry of
    /// `logit_positions`) plus the cache for `backward`.
    pub fn forward_cached(&self, seq: &TokenizedSequence, logit_positions: &[usize]) -> Result<(Matrix, ForwardCache)> {
        let (mut h, mut cache) = self.compose(seq)?;
        let mask = build_block_mask(seq.len(), self.config.tokens_per_item);
        for (layer, b) in self.blocks.iter().enumerate() {
            let (next, c) = b.forward(&h, Some(&mask));
            if !next.is_finite() {
                return Err(Error::NonFiniteActivation {
                    stage: "sequence model",
                    layer,
                });
            }
            h = next;
            cache.blocks.push(c);
        }
        let (hidden, final_norm) = self.final_norm.forward(&h);
        let mut selected = Matrix::zeros(logit_positions.len(), self.config.d_model);
        for (i, &p) in logit_positions.iter().enumerate() {
            if p >= cache.n_positions {
                return Err(Error::Shape(format!("logit position {p} beyond sequence")));
            }
            selected.row_mut(i).copy_from_slice(hidden.row(p));
        }
        let logits = selected.matmul_transposed(&self.token_embedding);
        cache.final_norm = Some(final_norm);
        cache.hidden = hidden;
        cache.logit_positions = logit_positions.to_vec();
        Ok((logits, cache))
    }

    /// Logits at every position (BOS included), `positions × vocab`.
    pub fn forward(&self, seq: &TokenizedSequence) -> Result<Matrix> {
        let n = 1 + seq.len() * self.config.tokens_per_item;
        let all: Vec<usize> = (0..n).collect();
        Ok(self.forward_cached(seq, &all)?.0)
    }

    /// Accumulates parameter gradients for upstream `d_logits`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix, grad: &mut SequenceModel) {
        let d = self.config.d_model;
        let mut selected = Matrix::zeros(cache.logit_positions.len(), d);
        for (i, &p) in cache.logit_positions.iter().enumerate() {
            selected.row_mut(i).copy_from_slice(cache.hidden.row(p));
        }
        d_logits.transposed_matmul_into(&selected, &mut grad.token_embedding);
        let d_selected = d_logits.matmul(&self.token_embedding);
        let mut d_hidden = Matrix::zeros(cache.n_positions, d);
        for (i, &p) in cache.logit_positions.iter().enumerate() {
            for (a, b) in d_hidden.row_mut(p).iter_mut().zip(d_selected.row(i)) {
                *a += b;
            }
        }
        let mut dh = self
            .final_norm
            .backward(cache.final_norm.as_ref().expect("forward_cached fills the final norm"), &d_hidden, &mut grad.final_norm);
        for ((b, c), g) in self.blocks.iter().zip(&cache.blocks).zip(&mut grad.blocks).rev() {
            dh = b.backward(c, &dh, g);
        }
        for r in 0..cache.n_positions {
            for (a, b) in grad.position_embedding.row_mut(r).iter_mut().zip(dh.row(r)) {
                *a += b;
            }
        }
        let d_tok = self.token_norm.backward(&cache.token_norm, &dh, &mut grad.token_norm);
        let d_aux = self.aux_norm.backward(&cache.aux_norm, &dh, &mut grad.aux_norm);
        cache
            .features
            .transposed_matmul_into(&d_aux, &mut grad.aux_projection);
        for (r, t) in cache.tokens.iter().enumerate() {
            let target = match t {
                Some(t) => grad.token_embedding.row_mut(*t as usize),
                None => grad.bos_embedding.row_mut(0),
            };
            for (a, b) in target.iter_mut().zip(d_tok.row(r)) {
                *a += b;
            }
        }
    }

    /// Positions whose logits score the next item (all blocks but the last)
    /// and the matching target tokens.
    fn scored_positions(&self, seq: &TokenizedSequence) -> (Vec<usize>, Vec<TokenId>) {
        let k = self.config.tokens_per_item;
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for m in 1..seq.len() {
            for slot in 0..k {
                positions.push(1 + (m - 1) * k + slot);
                targets.push(seq.items[m].tokens[slot]);
            }
        }
        (positions, targets)
    }

    fn loss_inner(&self, seq: &TokenizedSequence, grad: Option<&mut SequenceModel>) -> Result<ArLoss> {
        if seq.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "autoregressive loss needs at least 2 items, got {}",
                seq.len()
            )));
        }
        let (positions, targets) = self.scored_positions(seq);
        let (mut logits, cache) = self.forward_cached(seq, &positions)?;
        let count = targets.len() as f64;
        let mut target_log_probs = Vec::with_capacity(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row_mut(i);
            log_softmax_in_place(row);
            target_log_probs.push(row[t as usize]);
        }
        let loss = -target_log_probs.iter().sum::<f64>() / count;
        if let Some(grad) = grad {
            // d(mean NLL)/d logits = (softmax − onehot) / count
            for (i, &t) in targets.iter().enumerate() {
                let row = logits.row_mut(i);
                row.iter_mut().for_each(|v| *v = v.exp() / count);
                row[t as usize] -= 1.0 / count;
            }
            self.backward(&cache, &logits, grad);
        }
        Ok(ArLoss {
            loss,
            target_log_probs,
        })
    }

    /// Mean NLL of every item after the first, each slot scored from the same
    /// slot of the previous item's block.
    pub fn ar_loss(&self, seq: &TokenizedSequence) -> Result<ArLoss> {
        self.loss_inner(seq, None)
    }

    pub fn ar_loss_and_grad(&self, seq: &TokenizedSequence, grad: &mut SequenceModel) -> Result<ArLoss> {
        self.loss_inner(seq, Some(grad))
    }

    fn header_fields(&self) -> Vec<u32> {
        let c = &self.config;
        [
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.max_positions,
            c.tokens_per_item,
            c.vocab,
            c.sub_dim,
        ]
        .iter()
        .map(|&v| v as u32)
        .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        checkpoint::write_header(w, MODEL_MAGIC, &self.header_fields())?;
        checkpoint::write_tensors(w, self)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let f = checkpoint::read_header(r, MODEL_MAGIC)?;
        if f.len() != 7 {
            return Err(Error::Checkpoint("model header must hold 7 fields".into()));
        }
        let config = ModelConfig {
            d_model: f[0] as usize,
            n_layers: f[1] as usize,
            n_heads: f[2] as usize,
            max_positions: f[3] as usize,
            tokens_per_item: f[4] as usize,
            vocab: f[5] as usize,
            sub_dim: f[6] as usize,
        };
        let mut model = Self::new(config, 0)?;
        checkpoint::read_tensors(r, &mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

impl NextItemPredictor for SequenceModel {
    fn tokens_per_item(&self) -> usize {
        self.config.tokens_per_item
    }

    /// One forward pass over the (suffix-truncated) history; slot k of the
    /// result is the softmax at slot k of the final item's block.
    fn predict_next_item(&self, history: &TokenizedSequence) -> Result<NextItemDistribution> {
        if history.is_empty() {
            return Err(Error::InsufficientData("empty history".into()));
        }
        let history = history.truncated(self.config.max_items());
        let k = self.config.tokens_per_item;
        let last = 1 + (history.len() - 1) * k;
        let positions: Vec<usize> = (last..last + k).collect();
        let (logits, _) = self.forward_cached(&history, &positions)?;
        Ok(NextItemDistribution::from_logits(
            (0..k).map(|i| logits.row(i).to_vec()).collect(),
        ))
    }
}

impl Parameters for SequenceModel {
    fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("bos_embedding".to_string(), &self.bos_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
            ("aux_projection".to_string(), &self.aux_projection),
        ];
        out.extend(prefixed("aux_norm", self.aux_norm.params()));
        out.extend(prefixed("token_norm", self.token_norm.params()));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.extend(prefixed(&p, b.params()).collect::<Vec<_>>());
        }
        out.extend(prefixed("final_norm", self.final_norm.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let Self {
            token_embedding,
            bos_embedding,
            position_embedding,
            aux_projection,
            aux_norm,
            token_norm,
            blocks,
            final_norm,
            ..
        } = self;
        let mut out = vec![
            ("token_embedding".to_string(), token_embedding),
            ("bos_embedding".to_string(), bos_embedding),
            ("position_embedding".to_string(), position_embedding),
            ("aux_projection".to_string(), aux_projection),
        ];
        out.extend(prefixed("aux_norm", aux_norm.params_mut()));
        out.extend(prefixed("token_norm", token_norm.params_mut()));
        for (i, b) in blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            out.extend(prefixed(&p, b.params_mut()).collect::<Vec<_>>());
        }
        out.extend(prefixed("final_norm", final_norm.params_mut()));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Epochs without sufficient improvement before stopping.
    pub patience: usize,
    /// Relative eval-loss improvement that resets patience.
    pub min_relative_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 5,
            min_relative_improvement: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamSettings,
    pub seed: u64,
    /// When set, training stops once eval loss stalls and the best-eval
    /// parameters are returned.
    pub early_stop: Option<EarlyStop>,
}

impl Default for ModelTraining {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            adam: AdamSettings::default(),
            seed: 11,
            early_stop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Epoch 0 holds the losses of the untrained model.
    pub trace: Vec<EpochLoss>,
    /// Scored target tokens processed by gradient steps.
    pub tokens_seen: u64,
    pub best_eval_loss: f64,
    pub stopped_early: bool,
}

/// Mean `ar_loss` over sequences (each truncated to the model's window).
pub fn mean_loss(model: &SequenceModel, data: &[TokenizedSequence]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let max_items = model.config.max_items();
    let mut total = 0.0;
    for s in data {
        total += model.ar_loss(&s.truncated(max_items))?.loss;
    }
    Ok(total / data.len() as f64)
}

/// Adam on the mean autoregressive loss. Batch gradients are summed in a fixed
/// order, so a run is reproducible from its seed.
pub fn train_model(
    mut model: SequenceModel,
    train: &[TokenizedSequence],
    eval: &[TokenizedSequence],
    hyper: &ModelTraining,
) -> Result<(SequenceModel, TrainReport)> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training sequences".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(bad) = train.iter().chain(eval).position(|s| s.len() < 2) {
        return Err(Error::InsufficientData(format!("sequence {bad} has fewer than 2 items")));
    }
    let max_items = model.config.max_items();
    let train: Vec<TokenizedSequence> = train.iter().map(|s| s.truncated(max_items)).collect();
    let eval: Vec<TokenizedSequence> = eval.iter().map(|s| s.truncated(max_items)).collect();
    let k = model.config.tokens_per_item as u64;

    let eval_of = |m: &SequenceModel| -> Result<f64> {
        if eval.is_empty() {
            Ok(f64::NAN)
        } else {
            mean_loss(m, &eval)
        }
    };
    let initial_train = mean_loss(&model, &train)?;
    let initial_eval = eval_of(&model)?;
    let mut trace = vec![EpochLoss {
        epoch: 0,
        train_loss: initial_train,
        eval_loss: initial_eval,
    }];
    let mut adam = Adam::new(hyper.adam, &model);
    let mut grad = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut tokens_seen = 0u64;
    let mut best = (initial_eval, model.clone());
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            grad.zero_grad();
            for &i in chunk {
                let l = model
                    .ar_loss_and_grad(&train[i], &mut grad)
                    .map_err(|e| diverged(epoch, e))?;
                epoch_total += l.loss;
                tokens_seen += (train[i].len() as u64 - 1) * k;
            }
            for (_, g) in grad.params_mut() {
                g.scale(1.0 / chunk.len() as f64);
            }
            adam.step(&mut model, &grad);
        }
        let train_loss = epoch_total / train.len() as f64;
        if !train_loss.is_finite() || !model.all_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("training loss became {train_loss}"),
            });
        }
        let eval_loss = eval_of(&model).map_err(|e| diverged(epoch, e))?;
        trace.push(EpochLoss {
            epoch,
            train_loss,
            eval_loss,
        });
        if let Some(stop) = hyper.early_stop {
            if eval_loss.is_finite() && (!best.0.is_finite() || eval_loss < best.0 * (1.0 - stop.min_relative_improvement)) {
                best = (eval_loss, model.clone());
                stale = 0;
            } else {
                if eval_loss < best.0 {
                    best = (eval_loss, model.clone());
                }
                stale += 1;
                if stale >= stop.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let best_eval_loss = if hyper.early_stop.is_some() {
        model = best.1;
        best.0
    } else {
        trace
            .iter()
            .skip(1)
            .map(|t| t.eval_loss)
            .fold(f64::INFINITY, f64::min)
    };
    Ok((
        model,
        TrainReport {
            trace,
            tokens_seen,
            best_eval_loss,
            stopped_early,
        },
    ))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteActivation { stage, layer } => Error::Divergence {
            epoch,
            detail: format!("non-finite activation in {stage} (layer {layer})"),
        },
        other => other,
    }
}

/// One `epoch train_loss eval_loss` line per epoch.
pub fn write_loss_trace<W: Write>(w: &mut W, trace: &[EpochLoss]) -> std::io::Result<()> {
    for t in trace {
        writeln!(w, "{} {:?} {:?}", t.epoch, t.train_loss, t.eval_loss)?;
    }
    Ok(())
}
