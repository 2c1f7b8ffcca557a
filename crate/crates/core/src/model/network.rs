//! Forward and backward passes of the bidirectional transformer. A batch of
//! sequences is stacked row-wise so the dense layers see one tall matrix;
//! attention runs per sequence. Pre-norm blocks: `x += Attn(LN(x)); x += FFN(LN(x))`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{BlockParams, Params};
use super::ModelConfig;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    /// indexed `sequence * heads + head`
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

pub(crate) struct Cache {
    ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).unwrap();
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let m1 = dxhat.mean_axis(Axis(1)).unwrap();
    let m2 = (&dxhat * &cache.xhat).mean_axis(Axis(1)).unwrap();
    let mut dx = dxhat - &m1.insert_axis(Axis(1)) - &(&cache.xhat * &m2.insert_axis(Axis(1)));
    dx *= &cache.rstd.view().insert_axis(Axis(1));
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// `c += a^T b`
fn acc_at_b(c: &mut Array2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, c);
}

fn block_forward(p: &BlockParams, cfg: &ModelConfig, x: &mut Array2<f64>) -> BlockCache {
    let d = cfg.width;
    let hd = cfg.head_width();
    let scale = 1.0 / (hd as f64).sqrt();

    let (h1, ln1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let qkv = h1.dot(&p.qkv_w) + &p.qkv_b;
    let l = cfg.seq_len;
    let batch = x.nrows() / l;
    let mut attn = Array2::zeros((x.nrows(), d));
    let mut probs = Vec::with_capacity(batch * cfg.heads);
    for b in 0..batch {
        let rows = b * l..(b + 1) * l;
        for h in 0..cfg.heads {
            let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![rows.clone(), d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let mut scores = q.dot(&k.t()) * scale;
            softmax_rows(&mut scores);
            attn.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&scores.dot(&v));
            probs.push(scores);
        }
    }
    *x += &(attn.dot(&p.proj_w) + &p.proj_b);

    let (h2, ln2) = layer_norm(x, &p.ln2_gain, &p.ln2_bias);
    let ff_pre = h2.dot(&p.ff1_w) + &p.ff1_b;
    let ff_act = ff_pre.mapv(gelu);
    *x += &(ff_act.dot(&p.ff2_w) + &p.ff2_b);

    BlockCache { ln1, h1, qkv, probs, attn, ln2, h2, ff_pre, ff_act }
}

/// Takes the gradient w.r.t. the block output, returns it w.r.t. the input.
fn block_backward(
    p: &BlockParams,
    g: &mut BlockParams,
    cfg: &ModelConfig,
    c: &BlockCache,
    dx_out: Array2<f64>,
) -> Array2<f64> {
    let d = cfg.width;
    let hd = cfg.head_width();
    let scale = 1.0 / (hd as f64).sqrt();

    // feed-forward branch
    acc_at_b(&mut g.ff2_w, &c.ff_act.view(), &dx_out.view());
    g.ff2_b += &dx_out.sum_axis(Axis(0));
    let mut dpre = dx_out.dot(&p.ff2_w.t());
    dpre.zip_mut_with(&c.ff_pre, |dv, &x| *dv *= gelu_grad(x));
    acc_at_b(&mut g.ff1_w, &c.h2.view(), &dpre.view());
    g.ff1_b += &dpre.sum_axis(Axis(0));
    let dh2 = dpre.dot(&p.ff1_w.t());
    let dx_mid = dx_out + layer_norm_backward(&dh2, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

    // attention branch
    acc_at_b(&mut g.proj_w, &c.attn.view(), &dx_mid.view());
    g.proj_b += &dx_mid.sum_axis(Axis(0));
    let dattn = dx_mid.dot(&p.proj_w.t());
    let l = cfg.seq_len;
    let mut dqkv = Array2::zeros((dattn.nrows(), 3 * d));
    for b in 0..dattn.nrows() / l {
        let rows = b * l..(b + 1) * l;
        for h in 0..cfg.heads {
            let (qc, kc, vc) = (h * hd..(h + 1) * hd, d + h * hd..d + (h + 1) * hd, 2 * d + h * hd..2 * d + (h + 1) * hd);
            let q = c.qkv.slice(s![rows.clone(), qc.clone()]);
            let k = c.qkv.slice(s![rows.clone(), kc.clone()]);
            let v = c.qkv.slice(s![rows.clone(), vc.clone()]);
            let probs = &c.probs[b * cfg.heads + h];
            let d_out = dattn.slice(s![rows.clone(), qc.clone()]);
            let dp = d_out.dot(&v.t());
            let dv = probs.t().dot(&d_out);
            let row_dot = (&dp * probs).sum_axis(Axis(1));
            let mut ds = dp - &row_dot.insert_axis(Axis(1));
            ds *= probs;
            ds *= scale;
            dqkv.slice_mut(s![rows.clone(), qc]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![rows.clone(), kc]).assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![rows.clone(), vc]).assign(&dv);
        }
    }
    acc_at_b(&mut g.qkv_w, &c.h1.view(), &dqkv.view());
    g.qkv_b += &dqkv.sum_axis(Axis(0));
    let dh1 = dqkv.dot(&p.qkv_w.t());
    dx_mid + layer_norm_backward(&dh1, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias)
}

/// Logits `(batch * seq_len, vocab - 1)`, sequence `b` occupying rows
/// `b * seq_len..(b + 1) * seq_len`. Ids must already be validated against
/// the config.
pub(crate) fn forward(p: &Params, cfg: &ModelConfig, batch: &[&[u32]]) -> (Array2<f64>, Cache) {
    let l = cfg.seq_len;
    let ids: Vec<usize> = batch.iter().flat_map(|seq| seq.iter().map(|&i| i as usize)).collect();
    let mut x = Array2::zeros((ids.len(), cfg.width));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&p.pos_emb.row(i % l));
        row += &p.tok_emb.row(id);
    }
    let blocks = p.blocks.iter().map(|b| block_forward(b, cfg, &mut x)).collect();
    let (hf, lnf) = layer_norm(&x, &p.lnf_gain, &p.lnf_bias);
    let logits = hf.dot(&p.out_w) + &p.out_b;
    (logits, Cache { ids, blocks, lnf, hf })
}

/// Accumulates parameter gradients for upstream `dlogits` into `g`.
pub(crate) fn backward(p: &Params, cfg: &ModelConfig, cache: &Cache, dlogits: &Array2<f64>, g: &mut Params) {
    acc_at_b(&mut g.out_w, &cache.hf.view(), &dlogits.view());
    g.out_b += &dlogits.sum_axis(Axis(0));
    let dhf = dlogits.dot(&p.out_w.t());
    let mut dx = layer_norm_backward(&dhf, &cache.lnf, &p.lnf_gain, &mut g.lnf_gain, &mut g.lnf_bias);
    for b in (0..cfg.depth).rev() {
        dx = block_backward(&p.blocks[b], &mut g.blocks[b], cfg, &cache.blocks[b], dx);
    }
    let l = cfg.seq_len;
    for (i, &id) in cache.ids.iter().enumerate() {
        let mut row = g.pos_emb.row_mut(i % l);
        row += &dx.row(i);
        let mut row = g.tok_emb.row_mut(id);
        row += &dx.row(i);
    }
}
