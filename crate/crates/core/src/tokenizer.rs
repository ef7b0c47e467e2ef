//! Item tokenizer: finite scalar quantization of embedding sub-vectors, the
//! straight-through estimator, and the reconstruction decoder used to train
//! the projections.
//!
//! Per sub-vector `v` of length d_L/K the quantizer computes
//! `z = W_in·v + b`, `u_j = (L_j − 1)·σ(z_j)` and the digit `round(u_j)`
//! (ties away from zero). One input and one output transform are shared by all
//! K slots; the decoder tells slots apart with learned slot embeddings.
//!
//! During training the rounded codes go through `T_out` and a small
//! bidirectional transformer that reconstructs the full embedding; the loss is
//! mean absolute error. Gradients skip the rounding step (straight-through).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::embedding::{EmbeddingCatalog, ItemEmbedding};
use crate::error::{Error, Result};
use crate::fsq::{digits_to_token, partition, token_to_digits, FsqConfig, ItemTokenSequence, QuantizedDigits, TokenId};
use crate::nn::{prefixed, sigmoid, BlockCache, Linear, Matrix, Parameters, TransformerBlock};
use crate::optim::Sgd;

const CODEBOOK_MAGIC: &[u8; 6] = b"SRFSQ\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconDecoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for ReconDecoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
        }
    }
}

/// Bidirectional transformer over the K slot codes of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconDecoder {
    pub in_proj: Linear,
    pub slot_embedding: Matrix,
    pub blocks: Vec<TransformerBlock>,
    pub out_proj: Linear,
}

struct DecoderCache {
    input: Matrix,
    blocks: Vec<BlockCache>,
    last: Matrix,
}

impl ReconDecoder {
    /// Near-identity init: when `width ≥ sub_dim` the input and output
    /// projections start as a padded identity, and residual branches are small.
    fn new(slots: usize, sub_dim: usize, cfg: ReconDecoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let std = 0.02;
        let mut in_proj = Linear::new(sub_dim, cfg.width, std, rng);
        let mut out_proj = Linear::new(cfg.width, sub_dim, std, rng);
        if cfg.width >= sub_dim {
            for i in 0..sub_dim {
                in_proj.weight.data[i * cfg.width + i] += 1.0;
                out_proj.weight.data[i * sub_dim + i] += 1.0;
            }
        }
        Self {
            in_proj,
            slot_embedding: Matrix::random_normal(slots, cfg.width, std, rng),
            blocks: (0..cfg.layers)
                .map(|_| TransformerBlock::new(cfg.width, cfg.heads, cfg.layers, std, rng))
                .collect(),
            out_proj,
        }
    }

    /// Exact identity map on `sub_dim`-wide rows (residual branches zeroed).
    pub fn identity(slots: usize, sub_dim: usize, cfg: ReconDecoderConfig) -> Result<Self> {
        if cfg.width < sub_dim {
            return Err(Error::Config("identity decoder needs width >= d_L/K".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Self::new(slots, sub_dim, cfg, &mut rng);
        d.in_proj = Linear::zeros(sub_dim, cfg.width);
        d.out_proj = Linear::zeros(cfg.width, sub_dim);
        for i in 0..sub_dim {
            d.in_proj.weight.data[i * cfg.width + i] = 1.0;
            d.out_proj.weight.data[i * sub_dim + i] = 1.0;
        }
        d.slot_embedding.fill_zero();
        for b in &mut d.blocks {
            b.attn.proj = Linear::zeros(cfg.width, cfg.width);
            b.mlp.proj = Linear::zeros(4 * cfg.width, cfg.width);
        }
        Ok(d)
    }

    fn forward(&self, x: &Matrix) -> (Matrix, DecoderCache) {
        let mut h = self.in_proj.forward(x);
        h.add_assign(&self.slot_embedding);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&h, None);
            h = next;
            caches.push(c);
        }
        let y = self.out_proj.forward(&h);
        (
            y,
            DecoderCache {
                input: x.clone(),
                blocks: caches,
                last: h,
            },
        )
    }

    fn backward(&self, cache: &DecoderCache, dy: &Matrix, grad: &mut ReconDecoder) -> Matrix {
        let mut dh = self.out_proj.backward(&cache.last, dy, &mut grad.out_proj);
        for ((b, c), g) in self.blocks.iter().zip(&cache.blocks).zip(&mut grad.blocks).rev() {
            dh = b.backward(c, &dh, g);
        }
        grad.slot_embedding.add_assign(&dh);
        self.in_proj.backward(&cache.input, &dh, &mut grad.in_proj)
    }
}

impl Parameters for ReconDecoder {
    fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<_> = prefixed("in_proj", self.in_proj.params()).collect();
        out.push(("slot_embedding".into(), &self.slot_embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.extend(prefixed(&p, b.params()).collect::<Vec<_>>());
        }
        out.extend(prefixed("out_proj", self.out_proj.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let Self {
            in_proj,
            slot_embedding,
            blocks,
            out_proj,
        } = self;
        let mut out: Vec<_> = prefixed("in_proj", in_proj.params_mut()).collect();
        out.push(("slot_embedding".into(), slot_embedding));
        for (i, b) in blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            out.extend(prefixed(&p, b.params_mut()).collect::<Vec<_>>());
        }
        out.extend(prefixed("out_proj", out_proj.params_mut()));
        out
    }
}

/// Trained quantizer: shared input/output transforms plus the reconstruction
/// decoder. Immutable once trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FsqCodebook {
    config: FsqConfig,
    decoder_config: ReconDecoderConfig,
    /// T_in: d_L/K → d_fsq
    pub input: Linear,
    /// T_out: d_fsq → d_L/K
    pub output: Linear,
    pub decoder: ReconDecoder,
}

/// Forward value and gradient contract of the straight-through quantizer for
/// one sub-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SteOutput {
    /// Rounded values, what the forward pass emits.
    pub values: Vec<f64>,
    /// `(L_j − 1)·σ(z_j)` before rounding.
    pub surrogate: Vec<f64>,
    /// `∂surrogate_j / ∂z_j`, the slope used by the backward pass.
    pub slope: Vec<f64>,
}

/// How codes are formed from the surrogate during a loss evaluation.
#[derive(Debug, Clone, Copy)]
pub enum CodeMode<'a> {
    /// Rounded codes (training and inference).
    Quantized,
    /// `code = surrogate + offset` with offsets held fixed, one `K·d_fsq`
    /// vector per batch item. With the offsets from
    /// [`FsqCodebook::rounding_offsets`] this is the smooth twin whose exact
    /// gradient the straight-through estimator reports.
    FrozenOffsets(&'a [Vec<f64>]),
}

struct ItemPass {
    subs: Matrix,
    slope: Matrix,
    codes: Matrix,
    decoder: DecoderCache,
    recon: Matrix,
}

impl FsqCodebook {
    pub fn new(config: FsqConfig, decoder_config: ReconDecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if decoder_config.width == 0
            || decoder_config.heads == 0
            || decoder_config.width % decoder_config.heads != 0
        {
            return Err(Error::Config("decoder width must be a positive multiple of heads".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = config.sub_dim();
        let fsq = config.fsq_dim();
        let max_level = *config.levels.iter().max().expect("validated") as f64;
        let input = Linear::new(sub, fsq, 1.0 / (sub as f64).sqrt(), &mut rng);
        let output = Linear::new(fsq, sub, 0.1 / ((fsq as f64).sqrt() * max_level), &mut rng);
        let decoder = ReconDecoder::new(config.sub_vectors, sub, decoder_config, &mut rng);
        Ok(Self {
            config,
            decoder_config,
            input,
            output,
            decoder,
        })
    }

    pub fn config(&self) -> &FsqConfig {
        &self.config
    }

    pub fn decoder_config(&self) -> ReconDecoderConfig {
        self.decoder_config
    }

    /// Same-shaped container with every parameter zero, for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_grad();
        g
    }

    fn check_sub(&self, sub: &[f64]) -> Result<()> {
        if sub.len() != self.config.sub_dim() {
            return Err(Error::Shape(format!(
                "sub-vector has length {}, expected {}",
                sub.len(),
                self.config.sub_dim()
            )));
        }
        Ok(())
    }

    /// `T_in(sub)`
    pub fn pre_activation(&self, sub: &[f64]) -> Result<Vec<f64>> {
        self.check_sub(sub)?;
        let z = self
            .input
            .forward(&Matrix::from_vec(1, sub.len(), sub.to_vec()))
            .data;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                stage: "fsq input transform",
                layer: 0,
            });
        }
        Ok(z)
    }

    pub fn forward_ste(&self, sub: &[f64]) -> Result<SteOutput> {
        let z = self.pre_activation(sub)?;
        Ok(ste_from_pre_activation(&z, &self.config.levels))
    }

    /// Digits of one sub-vector.
    pub fn quantize(&self, sub: &[f64]) -> Result<QuantizedDigits> {
        let z = self.pre_activation(sub)?;
        Ok(digits_from_pre_activation(&z, &self.config.levels))
    }

    /// Gradient of `Σ_j upstream_j · out_j` w.r.t. T_in under the
    /// straight-through rule.
    pub fn ste_backward(&self, sub: &[f64], upstream: &[f64]) -> Result<Linear> {
        let ste = self.forward_ste(sub)?;
        if upstream.len() != ste.slope.len() {
            return Err(Error::Shape("upstream gradient length".into()));
        }
        let dz: Vec<f64> = upstream.iter().zip(&ste.slope).map(|(u, s)| u * s).collect();
        let mut grad = Linear::zeros(self.input.inputs(), self.input.outputs());
        let x = Matrix::from_vec(1, sub.len(), sub.to_vec());
        self.input
            .backward(&x, &Matrix::from_vec(1, dz.len(), dz), &mut grad);
        Ok(grad)
    }

    pub fn tokenize_item(&self, e: &ItemEmbedding) -> Result<ItemTokenSequence> {
        let tokens = partition(e, &self.config)?
            .into_iter()
            .map(|sub| digits_to_token(&self.quantize(sub)?, &self.config))
            .collect::<Result<Vec<_>>>()?;
        Ok(ItemTokenSequence {
            item_id: e.item_id.clone(),
            tokens,
        })
    }

    pub fn tokenize_catalog(&self, catalog: &EmbeddingCatalog) -> Result<Vec<ItemTokenSequence>> {
        self.check_catalog(catalog)?;
        catalog.iter().map(|e| self.tokenize_item(e)).collect()
    }

    fn check_catalog(&self, catalog: &EmbeddingCatalog) -> Result<()> {
        if catalog.dim() != self.config.embedding_dim {
            return Err(Error::Config(format!(
                "catalog dimension {} differs from codebook d_L {}",
                catalog.dim(),
                self.config.embedding_dim
            )));
        }
        Ok(())
    }

    /// Decoder output for K codes (`K × d_fsq`, digit values), as a d_L vector.
    pub fn reconstruct(&self, codes: &Matrix) -> Result<Vec<f64>> {
        if codes.rows != self.config.sub_vectors || codes.cols != self.config.fsq_dim() {
            return Err(Error::Shape(format!(
                "expected {}x{} codes, got {}x{}",
                self.config.sub_vectors,
                self.config.fsq_dim(),
                codes.rows,
                codes.cols
            )));
        }
        let x = self.output.forward(codes);
        Ok(self.decoder.forward(&x).0.data)
    }

    pub fn reconstruct_tokens(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.len() != self.config.sub_vectors {
            return Err(Error::Shape(format!("expected {} tokens", self.config.sub_vectors)));
        }
        let mut codes = Matrix::zeros(tokens.len(), self.config.fsq_dim());
        for (k, &t) in tokens.iter().enumerate() {
            let digits = token_to_digits(t, &self.config)?;
            for (c, d) in codes.row_mut(k).iter_mut().zip(digits.0) {
                *c = d as f64;
            }
        }
        self.reconstruct(&codes)
    }

    /// `round(u) − u` for every item in the batch.
    pub fn rounding_offsets(&self, batch: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        batch
            .iter()
            .map(|e| {
                let mut out = Vec::new();
                for sub in e.chunks_exact(self.config.sub_dim()) {
                    let ste = self.forward_ste(sub)?;
                    out.extend(ste.values.iter().zip(&ste.surrogate).map(|(r, u)| r - u));
                }
                Ok(out)
            })
            .collect()
    }

    fn item_pass(&self, e: &[f64], offsets: Option<&[f64]>) -> Result<ItemPass> {
        if e.len() != self.config.embedding_dim {
            return Err(Error::Shape(format!(
                "embedding has length {}, expected {}",
                e.len(),
                self.config.embedding_dim
            )));
        }
        let k = self.config.sub_vectors;
        let fsq = self.config.fsq_dim();
        let subs = Matrix::from_vec(k, self.config.sub_dim(), e.to_vec());
        let z = self.input.forward(&subs);
        if !z.is_finite() {
            return Err(Error::NonFiniteActivation {
                stage: "fsq input transform",
                layer: 0,
            });
        }
        let mut codes = Matrix::zeros(k, fsq);
        let mut slope = Matrix::zeros(k, fsq);
        for r in 0..k {
            let ste = ste_from_pre_activation(z.row(r), &self.config.levels);
            for j in 0..fsq {
                codes.data[r * fsq + j] = match offsets {
                    Some(off) => ste.surrogate[j] + off[r * fsq + j],
                    None => ste.values[j],
                };
                slope.data[r * fsq + j] = ste.slope[j];
            }
        }
        let x = self.output.forward(&codes);
        let (recon, decoder) = self.decoder.forward(&x);
        if !recon.is_finite() {
            return Err(Error::NonFiniteActivation {
                stage: "reconstruction decoder",
                layer: self.decoder.blocks.len(),
            });
        }
        Ok(ItemPass {
            subs,
            slope,
            codes,
            decoder,
            recon,
        })
    }

    fn offsets_for<'a>(mode: CodeMode<'a>, i: usize, n: usize) -> Result<Option<&'a [f64]>> {
        match mode {
            CodeMode::Quantized => Ok(None),
            CodeMode::FrozenOffsets(all) => {
                if all.len() != n {
                    return Err(Error::Shape("one offset vector per batch item".into()));
                }
                Ok(Some(&all[i]))
            }
        }
    }

    /// Mean absolute reconstruction error over the batch and all d_L components.
    pub fn reconstruction_loss(&self, batch: &[&[f64]], mode: CodeMode<'_>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let mut total = 0.0;
        for (i, e) in batch.iter().enumerate() {
            let pass = self.item_pass(e, Self::offsets_for(mode, i, batch.len())?)?;
            total += pass
                .recon
                .data
                .iter()
                .zip(e.iter())
                .map(|(r, t)| (r - t).abs())
                .sum::<f64>();
        }
        Ok(total / (batch.len() * self.config.embedding_dim) as f64)
    }

    /// Loss plus its gradient w.r.t. every parameter (straight-through for the
    /// rounding step).
    pub fn reconstruction_loss_and_grad(&self, batch: &[&[f64]], mode: CodeMode<'_>) -> Result<(f64, FsqCodebook)> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let mut grad = self.zeros_like();
        let norm = 1.0 / (batch.len() * self.config.embedding_dim) as f64;
        let mut total = 0.0;
        for (i, e) in batch.iter().enumerate() {
            let pass = self.item_pass(e, Self::offsets_for(mode, i, batch.len())?)?;
            let mut d_recon = pass.recon.zeros_like();
            for ((d, r), t) in d_recon.data.iter_mut().zip(&pass.recon.data).zip(e.iter()) {
                let diff = r - t;
                total += diff.abs();
                *d = if diff > 0.0 {
                    norm
                } else if diff < 0.0 {
                    -norm
                } else {
                    0.0
                };
            }
            let dx = self
                .decoder
                .backward(&pass.decoder, &d_recon, &mut grad.decoder);
            let mut d_codes = self.output.backward(&pass.codes, &dx, &mut grad.output);
            for (d, s) in d_codes.data.iter_mut().zip(&pass.slope.data) {
                *d *= s;
            }
            self.input.backward(&pass.subs, &d_codes, &mut grad.input);
        }
        Ok((total * norm, grad))
    }

    /// Rescales T_in so each pre-activation has zero mean and unit standard
    /// deviation over the catalog's sub-vectors.
    pub fn standardize_input(&mut self, catalog: &EmbeddingCatalog) -> Result<()> {
        self.check_catalog(catalog)?;
        let fsq = self.config.fsq_dim();
        let mut sum = vec![0.0; fsq];
        let mut sq = vec![0.0; fsq];
        let mut n = 0usize;
        for e in catalog.iter() {
            for sub in e.vector.chunks_exact(self.config.sub_dim()) {
                let z = self.pre_activation(sub)?;
                for j in 0..fsq {
                    sum[j] += z[j];
                    sq[j] += z[j] * z[j];
                }
                n += 1;
            }
        }
        let nf = n as f64;
        for j in 0..fsq {
            let mean = sum[j] / nf;
            let std = (sq[j] / nf - mean * mean).max(0.0).sqrt();
            if std < 1e-12 {
                continue;
            }
            for r in 0..self.input.weight.rows {
                self.input.weight.data[r * fsq + j] /= std;
            }
            self.input.bias.data[j] = (self.input.bias.data[j] - mean) / std;
        }
        Ok(())
    }

    fn header_fields(&self) -> Vec<u32> {
        let c = &self.config;
        let d = &self.decoder_config;
        let mut f = vec![
            c.sub_vectors as u32,
            c.embedding_dim as u32,
            c.levels.len() as u32,
        ];
        f.extend(&c.levels);
        f.extend([d.width as u32, d.layers as u32, d.heads as u32]);
        f
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        checkpoint::write_header(w, CODEBOOK_MAGIC, &self.header_fields())?;
        checkpoint::write_tensors(w, self)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let f = checkpoint::read_header(r, CODEBOOK_MAGIC)?;
        let bad = || Error::Checkpoint("truncated codebook header".into());
        if f.len() < 3 {
            return Err(bad());
        }
        let d_fsq = f[2] as usize;
        if f.len() != 3 + d_fsq + 3 {
            return Err(bad());
        }
        let config = FsqConfig::new(f[0] as usize, f[1] as usize, f[3..3 + d_fsq].to_vec())?;
        let dec = ReconDecoderConfig {
            width: f[3 + d_fsq] as usize,
            layers: f[4 + d_fsq] as usize,
            heads: f[5 + d_fsq] as usize,
        };
        let mut cb = Self::new(config, dec, 0)?;
        checkpoint::read_tensors(r, &mut cb)?;
        Ok(cb)
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

impl Parameters for FsqCodebook {
    fn params(&self) -> Vec<(String, &Matrix)> {
        prefixed("input", self.input.params())
            .chain(prefixed("output", self.output.params()))
            .chain(prefixed("decoder", self.decoder.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let Self {
            input,
            output,
            decoder,
            ..
        } = self;
        prefixed("input", input.params_mut())
            .chain(prefixed("output", output.params_mut()))
            .chain(prefixed("decoder", decoder.params_mut()))
            .collect()
    }
}

fn ste_from_pre_activation(z: &[f64], levels: &[u32]) -> SteOutput {
    let mut values = Vec::with_capacity(z.len());
    let mut surrogate = Vec::with_capacity(z.len());
    let mut slope = Vec::with_capacity(z.len());
    for (&zj, &l) in z.iter().zip(levels) {
        let top = (l - 1) as f64;
        let s = sigmoid(zj);
        let u = top * s;
        surrogate.push(u);
        values.push(u.round());
        slope.push(top * s * (1.0 - s));
    }
    SteOutput {
        values,
        surrogate,
        slope,
    }
}

fn digits_from_pre_activation(z: &[f64], levels: &[u32]) -> QuantizedDigits {
    QuantizedDigits(
        z.iter()
            .zip(levels)
            .map(|(&zj, &l)| {
                let top = (l - 1) as f64;
                ((top * sigmoid(zj)).round() as u32).min(l - 1)
            })
            .collect(),
    )
}

/// Digits for a raw pre-activation vector (`T_in` output).
pub fn quantize_pre_activation(z: &[f64], config: &FsqConfig) -> Result<QuantizedDigits> {
    if z.len() != config.fsq_dim() {
        return Err(Error::Shape("pre-activation length".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation {
            stage: "fsq input transform",
            layer: 0,
        });
    }
    Ok(digits_from_pre_activation(z, &config.levels))
}

pub fn fsq_quantize(sub: &[f64], codebook: &FsqCodebook) -> Result<QuantizedDigits> {
    codebook.quantize(sub)
}

pub fn fsq_forward_ste(sub: &[f64], codebook: &FsqCodebook) -> Result<SteOutput> {
    codebook.forward_ste(sub)
}

pub fn tokenize_item(e: &ItemEmbedding, codebook: &FsqCodebook) -> Result<ItemTokenSequence> {
    codebook.tokenize_item(e)
}

pub fn reconstruct(codes: &Matrix, codebook: &FsqCodebook) -> Result<Vec<f64>> {
    codebook.reconstruct(codes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub decoder: ReconDecoderConfig,
}

impl Default for QuantizerTraining {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 0.7,
            seed: 17,
            decoder: ReconDecoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantizerRun {
    pub codebook: FsqCodebook,
    /// Full-catalog loss before training, then after each epoch.
    pub loss_trace: Vec<f64>,
}

impl QuantizerRun {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("non-empty trace")
    }
}

/// Trains T_in, T_out and the reconstruction decoder with plain SGD on the
/// mean absolute reconstruction error.
pub fn train_quantizer(catalog: &EmbeddingCatalog, config: &FsqConfig, hyper: &QuantizerTraining) -> Result<QuantizerRun> {
    if catalog.is_empty() {
        return Err(Error::InsufficientData("empty embedding catalog".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut codebook = FsqCodebook::new(config.clone(), hyper.decoder, hyper.seed)?;
    codebook.check_catalog(catalog)?;
    codebook.standardize_input(catalog)?;
    let sgd = Sgd {
        learning_rate: hyper.learning_rate,
    };
    let all: Vec<&[f64]> = catalog.iter().map(|e| e.vector.as_slice()).collect();
    let mut trace = vec![codebook.reconstruction_loss(&all, CodeMode::Quantized)?];
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..all.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| all[i]).collect();
            let (_, grad) = codebook
                .reconstruction_loss_and_grad(&batch, CodeMode::Quantized)
                .map_err(|e| diverged(epoch, e))?;
            sgd.step(&mut codebook, &grad);
        }
        let loss = codebook
            .reconstruction_loss(&all, CodeMode::Quantized)
            .map_err(|e| diverged(epoch, e))?;
        if !loss.is_finite() || !codebook.all_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("reconstruction loss became {loss}"),
            });
        }
        trace.push(loss);
    }
    Ok(QuantizerRun {
        codebook,
        loss_trace: trace,
    })
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

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_codebook(levels: Vec<u32>) -> FsqCodebook {
        let cfg = FsqConfig::new(1, 2, levels).unwrap();
        FsqCodebook::new(cfg, ReconDecoderConfig { width: 4, layers: 1, heads: 1 }, 1).unwrap()
    }

    fn with_bias(levels: Vec<u32>, z: f64) -> FsqCodebook {
        let mut cb = toy_codebook(levels);
        cb.input.weight.fill_zero();
        cb.input.bias.data.iter_mut().for_each(|b| *b = z);
        cb
    }

    #[test]
    fn zero_pre_activation_rounds_half_away_from_zero() {
        // σ(0) = 0.5 and 7·0.5 = 3.5, which rounds to 4.
        let cb = with_bias(vec![8], 0.0);
        assert_eq!(cb.quantize(&[0.3, -0.2]).unwrap().0, vec![4]);
    }

    #[test]
    fn saturated_pre_activations_hit_level_bounds() {
        assert_eq!(with_bias(vec![8], -50.0).quantize(&[1.0, 1.0]).unwrap().0, vec![0]);
        assert_eq!(with_bias(vec![5], 50.0).quantize(&[1.0, 1.0]).unwrap().0, vec![4]);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let cb = toy_codebook(vec![4, 4]);
        assert!(matches!(
            cb.quantize(&[f64::NAN, 0.0]),
            Err(Error::NonFiniteActivation { .. })
        ));
        assert!(matches!(cb.quantize(&[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn ste_forward_equals_quantized_digits() {
        let cb = toy_codebook(vec![8, 6]);
        for sub in [[0.1, 0.7], [-2.0, 3.0], [0.0, 0.0]] {
            let ste = cb.forward_ste(&sub).unwrap();
            let digits = cb.quantize(&sub).unwrap();
            let as_f: Vec<f64> = digits.0.iter().map(|&d| d as f64).collect();
            assert_eq!(ste.values, as_f);
        }
    }

    #[test]
    fn ste_at_tie_keeps_smooth_slope() {
        let cb = with_bias(vec![8], 0.0);
        let ste = cb.forward_ste(&[0.0, 0.0]).unwrap();
        assert_eq!(ste.surrogate, vec![3.5]);
        assert_eq!(ste.values, vec![4.0]);
        assert!((ste.slope[0] - 7.0 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn ste_backward_matches_finite_differences_of_surrogate() {
        let cb = toy_codebook(vec![8, 5]);
        let sub = [0.4, -0.9];
        let upstream = [0.7, -1.3];
        let grad = cb.ste_backward(&sub, &upstream).unwrap();
        let eps = 1e-5;
        let surrogate_sum = |c: &FsqCodebook| -> f64 {
            let s = c.forward_ste(&sub).unwrap().surrogate;
            s.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        for i in 0..cb.input.weight.len() {
            let mut p = cb.clone();
            p.input.weight.data[i] += eps;
            let mut m = cb.clone();
            m.input.weight.data[i] -= eps;
            let fd = (surrogate_sum(&p) - surrogate_sum(&m)) / (2.0 * eps);
            let g = grad.weight.data[i];
            assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()), "w[{i}] {fd} vs {g}");
        }
    }

    #[test]
    fn reconstruct_shapes() {
        let cfg = FsqConfig::new(4, 16, vec![4, 3]).unwrap();
        let cb = FsqCodebook::new(cfg, ReconDecoderConfig { width: 8, layers: 1, heads: 2 }, 3).unwrap();
        let out = cb.reconstruct(&Matrix::zeros(4, 2)).unwrap();
        assert_eq!(out.len(), 16);
        assert!(cb.reconstruct(&Matrix::zeros(3, 2)).is_err());
        assert_eq!(cb.reconstruct_tokens(&[0, 1, 2, 11]).unwrap().len(), 16);
        assert!(cb.reconstruct_tokens(&[0, 1, 2, 12]).is_err());
    }

    #[test]
    fn identity_decoder_is_exact() {
        let dec = ReconDecoder::identity(3, 4, ReconDecoderConfig { width: 8, layers: 2, heads: 2 }).unwrap();
        let x = Matrix::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        assert_eq!(dec.forward(&x).0, x);
    }

    #[test]
    fn checkpoint_round_trip_preserves_tokens() {
        let cfg = FsqConfig::new(2, 8, vec![5, 4, 3]).unwrap();
        let mut cb = FsqCodebook::new(cfg, ReconDecoderConfig { width: 8, layers: 1, heads: 2 }, 5).unwrap();
        checkpoint::snap_to_f32(&mut cb);
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        let back = FsqCodebook::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, cb);
        buf.truncate(buf.len() - 3);
        assert!(FsqCodebook::read_from(&mut &buf[..]).is_err());
    }
}
