use std::hash::{DefaultHasher, Hasher};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// `width x 3*width`, columns ordered `[q | k | v]`.
    pub qkv_w: Array2<f64>,
    pub qkv_b: Array1<f64>,
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub ff1_w: Array2<f64>,
    pub ff1_b: Array1<f64>,
    pub ff2_w: Array2<f64>,
    pub ff2_b: Array1<f64>,
}

/// All trainable arrays of the denoiser. Gradients and optimizer moments use
/// the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `vocab x width`; includes a row for the mask token.
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    /// `width x (vocab - 1)`: the mask has no output logit.
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

macro_rules! for_each_tensor {
    ($self:expr, $f:expr, $as_slice:ident, $iter:ident) => {{
        let mut f = $f;
        f("tok_emb".to_string(), $self.tok_emb.shape().to_vec(), $self.tok_emb.$as_slice().unwrap());
        f("pos_emb".to_string(), $self.pos_emb.shape().to_vec(), $self.pos_emb.$as_slice().unwrap());
        for (i, b) in $self.blocks.$iter().enumerate() {
            f(format!("blocks.{i}.ln1_gain"), b.ln1_gain.shape().to_vec(), b.ln1_gain.$as_slice().unwrap());
            f(format!("blocks.{i}.ln1_bias"), b.ln1_bias.shape().to_vec(), b.ln1_bias.$as_slice().unwrap());
            f(format!("blocks.{i}.qkv_w"), b.qkv_w.shape().to_vec(), b.qkv_w.$as_slice().unwrap());
            f(format!("blocks.{i}.qkv_b"), b.qkv_b.shape().to_vec(), b.qkv_b.$as_slice().unwrap());
            f(format!("blocks.{i}.proj_w"), b.proj_w.shape().to_vec(), b.proj_w.$as_slice().unwrap());
            f(format!("blocks.{i}.proj_b"), b.proj_b.shape().to_vec(), b.proj_b.$as_slice().unwrap());
            f(format!("blocks.{i}.ln2_gain"), b.ln2_gain.shape().to_vec(), b.ln2_gain.$as_slice().unwrap());
            f(format!("blocks.{i}.ln2_bias"), b.ln2_bias.shape().to_vec(), b.ln2_bias.$as_slice().unwrap());
            f(format!("blocks.{i}.ff1_w"), b.ff1_w.shape().to_vec(), b.ff1_w.$as_slice().unwrap());
            f(format!("blocks.{i}.ff1_b"), b.ff1_b.shape().to_vec(), b.ff1_b.$as_slice().unwrap());
            f(format!("blocks.{i}.ff2_w"), b.ff2_w.shape().to_vec(), b.ff2_w.$as_slice().unwrap());
            f(format!("blocks.{i}.ff2_b"), b.ff2_b.shape().to_vec(), b.ff2_b.$as_slice().unwrap());
        }
        f("lnf_gain".to_string(), $self.lnf_gain.shape().to_vec(), $self.lnf_gain.$as_slice().unwrap());
        f("lnf_bias".to_string(), $self.lnf_bias.shape().to_vec(), $self.lnf_bias.$as_slice().unwrap());
        f("out_w".to_string(), $self.out_w.shape().to_vec(), $self.out_w.$as_slice().unwrap());
        f("out_b".to_string(), $self.out_b.shape().to_vec(), $self.out_b.$as_slice().unwrap());
    }};
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        let f = cfg.ffn_width();
        let block = || BlockParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            qkv_w: Array2::zeros((d, 3 * d)),
            qkv_b: Array1::zeros(3 * d),
            proj_w: Array2::zeros((d, d)),
            proj_b: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            ff1_w: Array2::zeros((d, f)),
            ff1_b: Array1::zeros(f),
            ff2_w: Array2::zeros((f, d)),
            ff2_b: Array1::zeros(d),
        };
        Self {
            tok_emb: Array2::zeros((cfg.vocab, d)),
            pos_emb: Array2::zeros((cfg.seq_len, d)),
            blocks: (0..cfg.depth).map(|_| block()).collect(),
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            out_w: Array2::zeros((d, cfg.classes())),
            out_b: Array1::zeros(cfg.classes()),
        }
    }

    /// Normal(0, `init_std`) for embeddings, feed-forward and output
    /// projections; fan-in scaled normal for attention; unit gains, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let small = Normal::new(0.0, cfg.init_std).expect("init std must be positive");
        let attn = Normal::new(0.0, 1.0 / (cfg.width as f64).sqrt()).unwrap();
        let mut fill = |a: &mut [f64], dist: &Normal<f64>| a.iter_mut().for_each(|v| *v = dist.sample(rng));
        fill(p.tok_emb.as_slice_mut().unwrap(), &small);
        fill(p.pos_emb.as_slice_mut().unwrap(), &small);
        for b in &mut p.blocks {
            b.ln1_gain.fill(1.0);
            b.ln2_gain.fill(1.0);
            fill(b.qkv_w.as_slice_mut().unwrap(), &attn);
            fill(b.proj_w.as_slice_mut().unwrap(), &attn);
            fill(b.ff1_w.as_slice_mut().unwrap(), &small);
            fill(b.ff2_w.as_slice_mut().unwrap(), &small);
        }
        p.lnf_gain.fill(1.0);
        fill(p.out_w.as_slice_mut().unwrap(), &small);
        p
    }

    /// `(name, shape, values)` in canonical order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for_each_tensor!(self, |n, s, v| out.push((n, s, v)), as_slice, iter);
        out
    }

    /// Mutable views in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for_each_tensor!(self, |_n: String, _s: Vec<usize>, v| out.push(v), as_slice_mut, iter_mut);
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// All values flattened in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for (_, _, v) in self.tensors() {
            if i < v.len() {
                return v[i];
            }
            i -= v.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for v in self.tensors_mut() {
            if i < v.len() {
                v[i] = value;
                return;
            }
            i -= v.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.2).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.tensors_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Hash of the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, _, v) in self.tensors() {
            h.write(name.as_bytes());
            for x in v {
                h.write_u64(x.to_bits());
            }
        }
        h.finish()
    }
}
