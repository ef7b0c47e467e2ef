//! Ranking metrics, zero-shot and cold-start protocols, data-fraction scaling
//! runs, and the power-law fit used to summarize them.
//!
//! Ranks come from exhaustive catalog scoring, so metrics never depend on a
//! beam width. Equal scores are ordered by token sequence and then item id;
//! the reported rank is the target's position in that total order.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::decoder::{rank_in_distribution, CatalogTrie};
use crate::embedding::EmbeddingCatalog;
use crate::error::{Error, Result};
use crate::model::{
    train_model, ItemTable, ModelConfig, ModelTraining, NextItemDistribution, NextItemPredictor, SequenceModel,
    TokenizedSequence,
};
use crate::tokenizer::FsqCodebook;

pub const CUTOFFS: [usize; 4] = [1, 3, 5, 10];

/// Data fractions of the scaling study.
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.05, 0.10, 0.25, 0.50, 1.0];

pub const TIE_CONVENTION: &str =
    "rank = position in total order (score desc, token sequence asc, item id asc)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub hit: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_cases: usize,
    pub tie_convention: String,
}

/// Hit@N is the fraction of ranks ≤ N; NDCG@N averages `1/log2(rank + 1)`
/// over ranks ≤ N (and 0 otherwise).
pub fn compute_metrics(ranks: &[usize], cutoffs: &[usize], protocol: &str) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::InsufficientData("no ranks to score".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::OutOfRange("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let mut hit = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &cut in cutoffs {
        let within = ranks.iter().filter(|&&r| r <= cut);
        hit.insert(cut, within.clone().count() as f64 / n);
        ndcg.insert(
            cut,
            within.map(|&r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / n,
        );
    }
    Ok(MetricsReport {
        protocol: protocol.to_string(),
        hit,
        ndcg,
        n_cases: ranks.len(),
        tie_convention: TIE_CONVENTION.to_string(),
    })
}

/// One ranking problem: a history and the item that followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub history: Vec<String>,
    pub target: String,
}

/// All items but the last form the history; the last is the target.
pub fn zero_shot_cases(data: &InteractionDataset) -> Vec<EvalCase> {
    data.sequences
        .iter()
        .map(|s| EvalCase {
            history: s.items[..s.items.len() - 1].to_vec(),
            target: s.items[s.items.len() - 1].clone(),
        })
        .collect()
}

/// Seeded prefix length uniform in {1, 2, 3}, capped at `len − 1`; the
/// target is the item right after the prefix.
pub fn cold_start_cases(data: &InteractionDataset, seed: u64) -> Vec<EvalCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.sequences
        .iter()
        .map(|s| {
            let drawn = rng.gen_range(1..=3usize);
            let len = drawn.min(s.items.len() - 1);
            EvalCase {
                history: s.items[..len].to_vec(),
                target: s.items[len].clone(),
            }
        })
        .collect()
}

/// Target-domain lookup tables built with a frozen codebook.
pub struct PreparedDomain {
    pub table: ItemTable,
    pub trie: CatalogTrie,
}

pub fn prepare_domain(codebook: &FsqCodebook, catalog: &EmbeddingCatalog) -> Result<PreparedDomain> {
    let tokens = codebook.tokenize_catalog(catalog)?;
    Ok(PreparedDomain {
        table: ItemTable::build(&tokens, catalog)?,
        trie: CatalogTrie::build(&tokens, codebook.config().sub_vectors)?,
    })
}

/// Exhaustive ranks of each case's target.
pub fn rank_cases<P: NextItemPredictor + ?Sized>(
    predictor: &P,
    domain: &PreparedDomain,
    cases: &[EvalCase],
) -> Result<Vec<usize>> {
    cases
        .iter()
        .map(|c| {
            if !domain.trie.contains_item(&c.target) {
                return Err(Error::UnknownItem(c.target.clone()));
            }
            let history = domain.table.sequence(&c.history)?;
            let dist = predictor.predict_next_item(&history)?;
            rank_in_distribution(&dist, &domain.trie, &c.target)
        })
        .collect()
}

pub fn evaluate_cases<P: NextItemPredictor + ?Sized>(
    predictor: &P,
    domain: &PreparedDomain,
    cases: &[EvalCase],
    protocol: &str,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    compute_metrics(&rank_cases(predictor, domain, cases)?, &CUTOFFS, protocol)
}

pub fn evaluate_zero_shot<P: NextItemPredictor + ?Sized>(
    predictor: &P,
    codebook: &FsqCodebook,
    catalog: &EmbeddingCatalog,
    target: &InteractionDataset,
) -> Result<MetricsReport> {
    let domain = prepare_domain(codebook, catalog)?;
    evaluate_cases(predictor, &domain, &zero_shot_cases(target), "zero-shot")
}

pub fn evaluate_cold_start<P: NextItemPredictor + ?Sized>(
    predictor: &P,
    codebook: &FsqCodebook,
    catalog: &EmbeddingCatalog,
    target: &InteractionDataset,
    seed: u64,
) -> Result<MetricsReport> {
    let domain = prepare_domain(codebook, catalog)?;
    evaluate_cases(predictor, &domain, &cold_start_cases(target, seed), "cold-start")
}

/// Independent uniform-random logits for every call; a ranking baseline.
#[derive(Debug)]
pub struct RandomPredictor {
    pub vocab: usize,
    pub tokens_per_item: usize,
    seed: u64,
    calls: AtomicU64,
}

impl RandomPredictor {
    pub fn new(vocab: usize, tokens_per_item: usize, seed: u64) -> Self {
        Self {
            vocab,
            tokens_per_item,
            seed,
            calls: AtomicU64::new(0),
        }
    }
}

impl NextItemPredictor for RandomPredictor {
    fn tokens_per_item(&self) -> usize {
        self.tokens_per_item
    }

    fn predict_next_item(&self, _history: &TokenizedSequence) -> Result<NextItemDistribution> {
        let call = self.calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ call.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(NextItemDistribution::from_logits(
            (0..self.tokens_per_item)
                .map(|_| (0..self.vocab).map(|_| rng.gen::<f64>() * 4.0).collect())
                .collect(),
        ))
    }
}

/// Coefficients of `loss ≈ a · x^(−b) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Coefficient of determination of the fitted curve on raw losses.
    pub r_squared: f64,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.a * x.powf(-self.b) + self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitOutcome {
    Fitted(PowerLawFit),
    InsufficientPoints { points: usize },
}

/// Ordinary least squares of `ln(y − c)` on `ln x`: returns (a, b).
fn log_linear(lx: &[f64], y: &[f64], c: f64) -> (f64, f64) {
    let ly: Vec<f64> = y.iter().map(|v| (v - c).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    (intercept.exp(), -slope)
}

/// Sum of squared `ln y − ln(a·x^(−b) + c)`.
fn log_residual_sse(lx: &[f64], y: &[f64], a: f64, b: f64, c: f64) -> f64 {
    lx.iter()
        .zip(y)
        .map(|(l, v)| {
            let fitted = a * (-b * l).exp() + c;
            if fitted > 0.0 && v > &0.0 {
                (v.ln() - fitted.ln()).powi(2)
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// Least squares on log residuals `ln y − ln ŷ`. The offset `c` is searched
/// below `min(y)` on a log-spaced grid of gaps `min(y) − c`, then refined by
/// golden section; for each `c`, `a` and `b` come from regressing
/// `ln(y − c)` on `ln x`. Losses must be positive.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<FitOutcome> {
    if x.len() != y.len() {
        return Err(Error::Shape("x and y lengths differ".into()));
    }
    if x.len() < 3 {
        return Ok(FitOutcome::InsufficientPoints { points: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) || x.iter().chain(y).any(|&v| v <= 0.0) {
        return Err(Error::OutOfRange("power-law fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let mean_lx = lx.iter().sum::<f64>() / lx.len() as f64;
    if lx.iter().all(|v| (v - mean_lx).abs() < 1e-12) {
        return Err(Error::OutOfRange("power-law fit needs distinct x values".into()));
    }
    let min_y = y.iter().copied().fold(f64::INFINITY, f64::min);
    let max_y = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max_y - min_y;
    if range <= 1e-15 * min_y.abs().max(1.0) {
        return Ok(FitOutcome::Fitted(PowerLawFit {
            a: 0.0,
            b: 0.0,
            c: min_y,
            r_squared: 1.0,
        }));
    }
    // t = ln(min_y − c)
    let sse_at = |t: f64| {
        let c = min_y - t.exp();
        let (a, b) = log_linear(&lx, y, c);
        log_residual_sse(&lx, y, a, b, c)
    };
    // c ranges from just below min(y) down to 0
    let (lo, hi) = ((range * 1e-6).ln(), min_y.ln());
    let steps = 400;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
        .collect();
    let best = (0..=steps)
        .min_by(|&i, &j| sse_at(grid[i]).total_cmp(&sse_at(grid[j])))
        .expect("grid is non-empty");
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let m1 = b - phi * (b - a);
        let m2 = a + phi * (b - a);
        if sse_at(m1) <= sse_at(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let t = (a + b) / 2.0;
    let c = min_y - t.exp();
    let (coef, exponent) = log_linear(&lx, y, c);
    let mut fit = PowerLawFit {
        a: coef,
        b: exponent,
        c,
        r_squared: 0.0,
    };
    let mean_y = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(&xi, &yi)| (yi - fit.predict(xi)).powi(2)).sum();
    fit.r_squared = 1.0 - ss_res / ss_tot;
    Ok(FitOutcome::Fitted(fit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub fraction: f64,
    pub sequences: usize,
    /// Scored target tokens seen during training.
    pub tokens: u64,
    /// Best eval loss reached before the stop rule fired.
    pub eval_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFailure {
    pub fraction: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub records: Vec<ScalingRecord>,
    pub failures: Vec<ScalingFailure>,
    pub fit: FitOutcome,
}

impl ScalingResult {
    /// `fraction tokens eval_loss` lines followed by the fit.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(w, "{:?} {} {:?}", r.fraction, r.tokens, r.eval_loss)?;
        }
        for f in &self.failures {
            writeln!(w, "# failed {:?}: {}", f.fraction, f.reason)?;
        }
        match &self.fit {
            FitOutcome::Fitted(f) => writeln!(w, "# fit a={:?} b={:?} c={:?} r2={:?}", f.a, f.b, f.c, f.r_squared),
            FitOutcome::InsufficientPoints { points } => writeln!(w, "# fit insufficient points ({points})"),
        }
    }
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::Config("no scaling fractions".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config("scaling fractions must lie in (0, 1]".into()));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("scaling fractions must be strictly increasing".into()));
    }
    Ok(())
}

/// Runs `train_fraction` for each fraction in turn. A failing fraction is
/// recorded and the rest still run; the fit uses the successful records.
pub fn run_scaling_with<F>(fractions: &[f64], mut train_fraction: F) -> Result<ScalingResult>
where
    F: FnMut(f64) -> Result<ScalingRecord>,
{
    check_fractions(fractions)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &f in fractions {
        match train_fraction(f) {
            Ok(r) if r.eval_loss.is_finite() => records.push(r),
            Ok(r) => failures.push(ScalingFailure {
                fraction: f,
                reason: format!("eval loss {}", r.eval_loss),
            }),
            Err(e) => failures.push(ScalingFailure {
                fraction: f,
                reason: e.to_string(),
            }),
        }
    }
    let x: Vec<f64> = records.iter().map(|r| r.tokens as f64).collect();
    let y: Vec<f64> = records.iter().map(|r| r.eval_loss).collect();
    let fit = fit_power_law(&x, &y)?;
    Ok(ScalingResult {
        records,
        failures,
        fit,
    })
}

/// First `ceil(fraction · n)` sequences of a seeded shuffle, so smaller
/// fractions are subsets of larger ones.
pub fn fraction_subset(train: &[TokenizedSequence], fraction: f64, seed: u64) -> Vec<TokenizedSequence> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((fraction * train.len() as f64).ceil() as usize).clamp(1, train.len().max(1));
    order[..n.min(train.len())].iter().map(|&i| train[i].clone()).collect()
}

/// One freshly initialized model per fraction, identical config and
/// hyperparameters, trained until the eval loss stalls.
pub fn run_scaling_experiment(
    fractions: &[f64],
    train: &[TokenizedSequence],
    eval: &[TokenizedSequence],
    config: ModelConfig,
    hyper: &ModelTraining,
    model_seed: u64,
) -> Result<ScalingResult> {
    if eval.is_empty() {
        return Err(Error::InsufficientData("scaling needs an evaluation set".into()));
    }
    let hyper = ModelTraining {
        early_stop: Some(hyper.early_stop.unwrap_or_default()),
        ..*hyper
    };
    run_scaling_with(fractions, |f| {
        let subset = fraction_subset(train, f, hyper.seed);
        let model = SequenceModel::new(config, model_seed)?;
        let (_, report) = train_model(model, &subset, eval, &hyper)?;
        Ok(ScalingRecord {
            fraction: f,
            sequences: subset.len(),
            tokens: report.tokens_seen,
            eval_loss: report.best_eval_loss,
            epochs: report.trace.len() - 1,
        })
    })
}
