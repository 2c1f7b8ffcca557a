//! Synthetic text source with known statistics, exact ("oracle") perplexity
//! and the steps-by-round benchmark grid.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::masking::TokenSequence;
use crate::model::DenoiserModel;
use crate::rng::{self, keyed_uniform};
use crate::sampler::{self, SamplerConfig};
use crate::schedule::Schedule;
use crate::{Error, Result};

/// Letters plus space; the mask symbol is appended after these.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz ";
/// How a mask token is rendered in text.
pub const MASK_CHAR: char = '_';
/// Floor applied to every transition probability before renormalisation.
pub const MIN_TRANSITION: f64 = 1e-4;
pub const DEFAULT_CONCENTRATION: f64 = 0.1;
pub const DEFAULT_BACKOFF_STRENGTH: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { symbols: ALPHABET.chars().collect() }
    }
}

impl Tokenizer {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.len() < 2 {
            return Err(Error::Domain("alphabet needs at least two symbols".into()));
        }
        let mut seen = symbols.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != symbols.len() || symbols.contains(&MASK_CHAR) {
            return Err(Error::Domain("alphabet symbols must be distinct and exclude the mask character".into()));
        }
        Ok(Self { symbols })
    }

    /// Number of clean symbols `A`.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    /// `K = A + 1`.
    pub fn vocab_extended(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mask = self.symbols.len() as u32;
        let ids = text
            .chars()
            .map(|c| {
                if c == MASK_CHAR {
                    Ok(mask)
                } else {
                    self.symbols
                        .iter()
                        .position(|&s| s == c)
                        .map(|p| p as u32)
                        .ok_or_else(|| Error::Domain(format!("character {c:?} is not in the alphabet")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        TokenSequence::new(ids, self.vocab_extended())
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        if seq.vocab() != self.vocab_extended() {
            return Err(Error::LengthMismatch { expected: self.vocab_extended(), actual: seq.vocab() });
        }
        Ok(seq.ids().iter().map(|&id| self.symbols.get(id as usize).copied().unwrap_or(MASK_CHAR)).collect())
    }
}

/// Stationary order-`k` Markov chain over `A` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    order: usize,
    alphabet: usize,
    /// Row `c` holds `P(next | context c)`; contexts are base-`A` numbers
    /// with the oldest symbol most significant.
    transitions: Vec<f64>,
    stationary: Vec<f64>,
}

/// Random source with the default row law.
pub fn make_source(seed: u64, order: usize, alphabet: usize) -> Result<MarkovSource> {
    make_source_with(seed, order, alphabet, DEFAULT_CONCENTRATION, DEFAULT_BACKOFF_STRENGTH)
}

/// Dirichlet-drawn transition rows.
///
/// First-order rows are `Dirichlet(concentration, ..., concentration)`. With
/// `backoff_strength > 0`, a row for a longer context is drawn from
/// `Dirichlet(backoff_strength · parent)`, where `parent` is the row of the
/// context with its oldest symbol dropped, so the chain keeps usable
/// lower-order structure. With `backoff_strength = 0` every row is an
/// independent `Dirichlet(concentration)` draw.
pub fn make_source_with(seed: u64, order: usize, alphabet: usize, concentration: f64, backoff_strength: f64) -> Result<MarkovSource> {
    check_shape(order, alphabet)?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::Domain(format!("concentration {concentration} must be positive")));
    }
    if !(backoff_strength >= 0.0 && backoff_strength.is_finite()) {
        return Err(Error::Domain(format!("backoff strength {backoff_strength} must be non-negative")));
    }
    let mut rng = rng::stream(seed, "markov-source");
    let flat = vec![concentration; alphabet];
    let mut level: Vec<Vec<f64>> = (0..alphabet).map(|_| dirichlet(&flat, &mut rng)).collect::<Result<_>>()?;
    for depth in 2..=order {
        let suffixes = alphabet.pow(depth as u32 - 1);
        let mut next = Vec::with_capacity(suffixes * alphabet);
        for _oldest in 0..alphabet {
            for suffix in 0..suffixes {
                let alpha: Vec<f64> = if backoff_strength > 0.0 {
                    level[suffix].iter().map(|p| (backoff_strength * p).max(1e-300)).collect()
                } else {
                    flat.clone()
                };
                next.push(dirichlet(&alpha, &mut rng)?);
            }
        }
        level = next;
    }
    let mut transitions = Vec::with_capacity(level.len() * alphabet);
    for mut row in level {
        row.iter_mut().for_each(|p| *p = p.max(MIN_TRANSITION));
        let sum: f64 = row.iter().sum();
        transitions.extend(row.iter().map(|p| p / sum));
    }
    MarkovSource::from_transitions(order, alphabet, transitions)
}

fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut row = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map(|g| g.sample(rng)).map_err(|e| Error::Domain(e.to_string())))
        .collect::<Result<Vec<f64>>>()?;
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        row.iter_mut().for_each(|p| *p /= sum);
    } else {
        row.fill(1.0 / alpha.len() as f64);
    }
    Ok(row)
}

fn check_shape(order: usize, alphabet: usize) -> Result<()> {
    if !(1..=3).contains(&order) {
        return Err(Error::Domain(format!("order {order} outside 1..=3")));
    }
    if alphabet < 2 {
        return Err(Error::Domain("alphabet needs at least two symbols".into()));
    }
    Ok(())
}

impl MarkovSource {
    pub fn from_transitions(order: usize, alphabet: usize, transitions: Vec<f64>) -> Result<Self> {
        check_shape(order, alphabet)?;
        let contexts = alphabet.pow(order as u32);
        if transitions.len() != contexts * alphabet {
            return Err(Error::LengthMismatch { expected: contexts * alphabet, actual: transitions.len() });
        }
        for (c, row) in transitions.chunks(alphabet).enumerate() {
            if row.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
                return Err(Error::Domain(format!("transition row {c} has a non-positive entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("transition row {c} sums to {sum}")));
            }
        }
        let mut source = Self { order, alphabet, transitions, stationary: Vec::new() };
        source.stationary = source.solve_stationary();
        Ok(source)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// Stationary distribution over contexts (length-`order` windows).
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    fn stationary_len(&self) -> usize {
        self.alphabet.pow(self.order as u32)
    }

    fn row(&self, context: usize) -> &[f64] {
        &self.transitions[context * self.alphabet..(context + 1) * self.alphabet]
    }

    fn shift(&self, context: usize, next: usize) -> usize {
        (context * self.alphabet + next) % self.stationary_len()
    }

    fn solve_stationary(&self) -> Vec<f64> {
        let n = self.stationary_len();
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        for _ in 0..200_000 {
            next.fill(0.0);
            for c in 0..n {
                let w = pi[c];
                for (x, p) in self.row(c).iter().enumerate() {
                    next[self.shift(c, x)] += w * p;
                }
            }
            let total: f64 = next.iter().sum();
            let mut change = 0.0;
            for (a, b) in pi.iter_mut().zip(&next) {
                let v = b / total;
                change += (v - *a).abs();
                *a = v;
            }
            if change < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Marginal of the first `len ≤ order` symbols of a stationary window.
    fn prefix_marginal(&self, len: usize) -> Vec<f64> {
        let block = self.alphabet.pow((self.order - len) as u32);
        self.stationary.chunks(block).map(|c| c.iter().sum()).collect()
    }

    /// Stationary single-symbol distribution.
    pub fn unigram(&self) -> Vec<f64> {
        self.prefix_marginal(1)
    }

    /// Exact entropy rate `H = Σ_c π(c) H(P(·|c))` in nats.
    pub fn entropy_rate(&self) -> f64 {
        (0..self.stationary_len()).map(|c| self.stationary[c] * entropy(self.row(c))).sum()
    }

    /// Exact expected per-token negative log-likelihood of a length-`len`
    /// sequence drawn from the source (the first `order` symbols follow the
    /// stationary marginals).
    pub fn sequence_entropy(&self, len: usize) -> f64 {
        if len == 0 {
            return 0.0;
        }
        let head = len.min(self.order);
        let total = entropy(&self.prefix_marginal(head)) + (len - head) as f64 * self.entropy_rate();
        total / len as f64
    }

    /// Log-probability of one clean sequence.
    pub fn log_prob(&self, ids: &[u32]) -> Result<f64> {
        let a = self.alphabet;
        if let Some(&bad) = ids.iter().find(|&&x| x as usize >= a) {
            return Err(if bad as usize == a {
                Error::Domain("mask token in a sequence scored by the source".into())
            } else {
                Error::TokenOutOfRange { id: bad, vocab: a }
            });
        }
        let head = ids.len().min(self.order);
        let mut prefix = 0usize;
        for &x in &ids[..head] {
            prefix = prefix * a + x as usize;
        }
        let mut lp = if head == 0 { 0.0 } else { self.prefix_marginal(head)[prefix].ln() };
        let mut context = prefix;
        for &x in &ids[head..] {
            lp += self.row(context)[x as usize].ln();
            context = self.shift(context, x as usize);
        }
        Ok(lp)
    }

    /// Draws one sequence of length `len` using `2·len` keyed uniforms.
    pub fn sample_keyed(&self, seed: u64, index: u64, len: usize) -> Vec<u32> {
        let a = self.alphabet;
        let mut out = Vec::with_capacity(len);
        let draw = |pos: usize| keyed_uniform(seed, &[index, pos as u64]);
        let head = len.min(self.order);
        if head > 0 {
            let marg = self.prefix_marginal(head);
            let mut p = categorical_linear(&marg, draw(0));
            let mut digits = vec![0u32; head];
            for d in digits.iter_mut().rev() {
                *d = (p % a) as u32;
                p /= a;
            }
            out.extend(digits);
        }
        let mut context = out.iter().fold(0usize, |c, &x| c * a + x as usize);
        for pos in head..len {
            let x = categorical_linear(self.row(context), draw(pos));
            out.push(x as u32);
            context = self.shift(context, x);
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<u32> {
        self.sample_keyed(rng.random(), 0, len)
    }

    /// `count` sequences of length `len`, reproducible for a given seed.
    pub fn corpus(&self, seed: u64, count: usize, len: usize) -> Vec<TokenSequence> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| TokenSequence::new(self.sample_keyed(seed, i, len), self.alphabet + 1).expect("ids below alphabet"))
            .collect()
    }
}

fn categorical_linear(probs: &[f64], u: f64) -> usize {
    let target = u * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if target < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Perplexity of samples under the true source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScore {
    pub ppl: f64,
    /// Mean per-token negative log-likelihood.
    pub nll: f64,
    /// Standard error of `nll`, treating sequences as independent units.
    pub nll_std_err: f64,
    pub tokens: usize,
}

pub fn oracle_score(samples: &[TokenSequence], source: &MarkovSource) -> Result<OracleScore> {
    if samples.is_empty() || samples.iter().all(|s| s.is_empty()) {
        return Err(Error::Precondition("no tokens to score".into()));
    }
    let per_seq = samples
        .iter()
        .map(|s| {
            if s.mask_count() > 0 {
                return Err(Error::Domain("mask token in a sample scored by the source".into()));
            }
            Ok((-source.log_prob(s.ids())?, s.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens: usize = per_seq.iter().map(|p| p.1).sum();
    let nll = per_seq.iter().map(|p| p.0).sum::<f64>() / tokens as f64;
    let n = per_seq.len() as f64;
    let mean_len = tokens as f64 / n;
    // ratio estimator variance
    let var = if per_seq.len() > 1 {
        per_seq.iter().map(|&(l, k)| (l - nll * k as f64).powi(2)).sum::<f64>() / (n - 1.0) / (mean_len * mean_len)
    } else {
        0.0
    };
    Ok(OracleScore { ppl: nll.exp(), nll, nll_std_err: (var / n).sqrt(), tokens })
}

/// `exp(mean per-token NLL)` under the source.
pub fn oracle_ppl(samples: &[TokenSequence], source: &MarkovSource) -> Result<f64> {
    oracle_score(samples, source).map(|s| s.ppl)
}

/// Total-variation distance between the samples' symbol frequencies and the
/// source's stationary unigram distribution. Masks are ignored.
pub fn unigram_tv(samples: &[TokenSequence], source: &MarkovSource) -> f64 {
    let mut counts = vec![0usize; source.alphabet()];
    let mut total = 0usize;
    for s in samples {
        for &x in s.ids() {
            if let Some(c) = counts.get_mut(x as usize) {
                *c += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return 1.0;
    }
    0.5 * counts.iter().zip(source.unigram()).map(|(&c, p)| (c as f64 / total as f64 - p).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    /// 0 for the teacher, `r` for the student after distillation round `r`.
    pub round: usize,
    pub steps: usize,
    pub ppl: f64,
    pub mask_residual: usize,
    pub unigram_tv: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "round,steps,ppl,mask_residual,unigram_tv";

    pub fn ppl(&self, round: usize, steps: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.round == round && r.steps == steps).map(|r| r.ppl)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{},{:.6}", r.round, r.steps, r.ppl, r.mask_residual, r.unigram_tv).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub steps: Vec<usize>,
    pub count: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

/// Scores one model at one step count.
pub fn evaluate_cell(model: &DenoiserModel, source: &MarkovSource, steps: usize, cfg: &BenchmarkConfig) -> Result<(EvalRow, OracleScore)> {
    let sampler_cfg = SamplerConfig::new(steps, cfg.schedule, rng::split_seed(cfg.seed, "benchmark-samples"))?;
    let samples = sampler::generate(model, &sampler_cfg, cfg.count)?;
    let mask_residual = samples.iter().map(|s| s.mask_count()).sum();
    let score = oracle_score(&samples, source)?;
    let row = EvalRow { round: 0, steps, ppl: score.ppl, mask_residual, unigram_tv: unigram_tv(&samples, source) };
    Ok((row, score))
}

/// Rows for the teacher (round 0) and each student round, over every step count.
pub fn run_benchmark(teacher: &DenoiserModel, students: &[DenoiserModel], source: &MarkovSource, cfg: &BenchmarkConfig) -> Result<EvalReport> {
    if cfg.steps.is_empty() || cfg.count == 0 {
        return Err(Error::Precondition("benchmark needs at least one step count and one sample".into()));
    }
    let mut rows = Vec::new();
    for (round, model) in std::iter::once(teacher).chain(students).enumerate() {
        for &steps in &cfg.steps {
            let (row, _) = evaluate_cell(model, source, steps, cfg)?;
            rows.push(EvalRow { round, ..row });
        }
    }
    Ok(EvalReport { rows })
}
