//! The denoiser: maps a partially masked sequence to per-position categorical
//! distributions over the clean vocabulary. No time input; the mask pattern
//! carries the noise level.

pub mod checkpoint;
pub mod loss;
mod network;
pub mod optim;
mod params;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

pub use params::{BlockParams, Params};

use crate::masking::TokenSequence;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Extended vocabulary `K` (clean symbols plus the mask).
    pub vocab: usize,
    pub seq_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab: 28, seq_len: 64, width: 64, depth: 2, heads: 2, ffn_mult: 4, init_std: 0.02 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 {
            return Err(Error::Domain(format!("vocab {} leaves fewer than two clean classes", self.vocab)));
        }
        if self.seq_len == 0 || self.width == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Domain("model dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Domain(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Domain("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Number of output classes: the clean vocabulary.
    pub fn classes(&self) -> usize {
        self.vocab - 1
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_mult
    }

    pub fn mask_id(&self) -> u32 {
        (self.vocab - 1) as u32
    }
}

/// Anything that can score a partially masked sequence.
pub trait Denoiser: Sync {
    fn seq_len(&self) -> usize;

    /// Extended vocabulary size `K`.
    fn vocab(&self) -> usize;

    /// Log-probabilities `(seq_len, K - 1)` of the clean token per position.
    fn log_probs(&self, z: &TokenSequence) -> Result<Array2<f64>>;

    /// [`Denoiser::log_probs`] for several sequences at once.
    fn log_probs_batch(&self, zs: &[&TokenSequence]) -> Result<Vec<Array2<f64>>> {
        zs.iter().map(|z| self.log_probs(z)).collect()
    }
}

/// Sequences per batched network call.
pub(crate) const FORWARD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    params: Params,
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self { params: Params::init(&config, rng), config })
    }

    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config);
        let shapes_match = expected
            .tensors()
            .iter()
            .zip(params.tensors())
            .all(|(a, b)| a.0 == b.0 && a.1 == b.1)
            && expected.blocks.len() == params.blocks.len();
        if !shapes_match {
            return Err(Error::Contract("parameter shapes do not match the model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub(crate) fn check_input(&self, z: &TokenSequence) -> Result<()> {
        if z.len() != self.config.seq_len {
            return Err(Error::LengthMismatch { expected: self.config.seq_len, actual: z.len() });
        }
        if let Some(&id) = z.ids().iter().find(|&&id| id as usize >= self.config.vocab) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab });
        }
        Ok(())
    }

    /// Logits `(seq_len, K - 1)` for one sequence.
    pub fn logits(&self, z: &TokenSequence) -> Result<Array2<f64>> {
        self.check_input(z)?;
        Ok(network::forward(&self.params, &self.config, &[z.ids()]).0)
    }

    /// Logits for each sequence, computed in parallel chunks.
    fn logits_many(&self, batch: &[&TokenSequence]) -> Result<Vec<Array2<f64>>> {
        batch.iter().try_for_each(|z| self.check_input(z))?;
        let l = self.config.seq_len;
        let chunks: Vec<Vec<Array2<f64>>> = batch
            .par_chunks(FORWARD_CHUNK)
            .map(|chunk| {
                let ids: Vec<&[u32]> = chunk.iter().map(|z| z.ids()).collect();
                let logits = network::forward(&self.params, &self.config, &ids).0;
                (0..chunk.len()).map(|b| logits.slice(s![b * l..(b + 1) * l, ..]).to_owned()).collect()
            })
            .collect();
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Batched logits.
    pub fn forward(&self, batch: &[TokenSequence]) -> Result<LogitsBatch> {
        let rows = self.logits_many(&batch.iter().collect::<Vec<_>>())?;
        let (l, c) = (self.config.seq_len, self.config.classes());
        let mut values = Array3::zeros((batch.len(), l, c));
        for (b, r) in rows.iter().enumerate() {
            values.index_axis_mut(Axis(0), b).assign(r);
        }
        Ok(LogitsBatch { values })
    }
}

impl Denoiser for DenoiserModel {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn log_probs(&self, z: &TokenSequence) -> Result<Array2<f64>> {
        Ok(log_softmax_rows(&self.logits(z)?.view()))
    }

    fn log_probs_batch(&self, zs: &[&TokenSequence]) -> Result<Vec<Array2<f64>>> {
        Ok(self.logits_many(zs)?.iter().map(|x| log_softmax_rows(&x.view())).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    /// `(batch, seq_len, K - 1)`
    pub values: Array3<f64>,
}

impl LogitsBatch {
    pub fn log_probs(&self) -> Array3<f64> {
        let mut out = self.values.clone();
        for mut row in out.lanes_mut(Axis(2)) {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| v - lse);
        }
        out
    }
}

pub fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
    out
}
