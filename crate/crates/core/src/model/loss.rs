//! Training losses and their gradients w.r.t. the student's logits, plus the
//! batched `loss_and_gradient` driver that backpropagates them.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::{log_softmax_rows, network, DenoiserModel, Params};
use crate::masking::{MaskIndicator, TokenSequence};
use crate::{Error, Result};

/// Smallest allowed sharpening temperature.
pub const MIN_TAU: f64 = 0.05;

/// Distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossVariant {
    /// `KL(student || sharpened teacher)` on positions masked in both views,
    /// plus cross-entropy to the data on positions only the teacher sees.
    Hybrid,
    /// `KL(teacher || student)` on positions masked in both views.
    KlFwd,
    /// `KL(student || teacher)` on positions masked in both views.
    KlBwd,
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "kl_fwd" => Ok(Self::KlFwd),
            "kl_bwd" => Ok(Self::KlBwd),
            other => Err(Error::Domain(format!("unknown loss variant '{other}'"))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hybrid => "hybrid",
            Self::KlFwd => "kl_fwd",
            Self::KlBwd => "kl_bwd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpec {
    /// Weighted cross-entropy on masked positions.
    PretrainCe,
    Mcd(LossVariant),
}

/// Per-row auxiliary inputs of a loss.
#[derive(Debug, Clone, PartialEq)]
pub enum RowAux {
    Pretrain { mask: MaskIndicator, weight: f64 },
    Distill { m_t: MaskIndicator, m_s: MaskIndicator, teacher_log_probs: Array2<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    /// What the student sees.
    pub input: TokenSequence,
    /// Clean data.
    pub target: TokenSequence,
    pub aux: RowAux,
}

/// `log_softmax(log_probs / tau)` per row.
pub fn sharpen_log_probs(log_probs: &ArrayView2<f64>, tau: f64) -> Array2<f64> {
    log_softmax_rows(&log_probs.mapv(|v| v / tau).view())
}

fn check_masks(len: usize, m_t: &MaskIndicator, m_s: &MaskIndicator) -> Result<()> {
    if m_t.len() != len || m_s.len() != len {
        return Err(Error::LengthMismatch { expected: len, actual: m_t.len().min(m_s.len()) });
    }
    if !m_s.is_subset_of(m_t) {
        return Err(Error::Contract("teacher mask m_s is not contained in student mask m_t".into()));
    }
    Ok(())
}

/// Loss of one row and its gradient w.r.t. the row's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLoss {
    pub kl: f64,
    pub ce: f64,
    pub dlogits: Array2<f64>,
}

impl RowLoss {
    pub fn total(&self) -> f64 {
        self.kl + self.ce
    }
}

/// `weight * sum_{masked i} -log p(x0_i)`.
pub fn pretrain_row(
    log_probs: &ArrayView2<f64>,
    x0: &TokenSequence,
    mask: &MaskIndicator,
    weight: f64,
) -> Result<RowLoss> {
    let (l, _) = log_probs.dim();
    if x0.len() != l || mask.len() != l {
        return Err(Error::LengthMismatch { expected: l, actual: x0.len().min(mask.len()) });
    }
    let mut dlogits = Array2::zeros(log_probs.raw_dim());
    let mut ce = 0.0;
    for i in (0..l).filter(|&i| mask.values()[i]) {
        let target = x0.ids()[i] as usize;
        ce -= log_probs[[i, target]];
        let mut row = dlogits.row_mut(i);
        row.assign(&log_probs.row(i).mapv(|v| weight * v.exp()));
        row[target] -= weight;
    }
    Ok(RowLoss { kl: 0.0, ce: weight * ce, dlogits })
}

/// `KL(q || p)` and its gradient w.r.t. the logits of `q`.
fn kl_student_teacher(q_lp: &ndarray::ArrayView1<f64>, p_lp: &ndarray::ArrayView1<f64>) -> (f64, ndarray::Array1<f64>) {
    let kl: f64 = q_lp.iter().zip(p_lp).map(|(&q, &p)| q.exp() * (q - p)).sum();
    let grad = ndarray::Zip::from(q_lp).and(p_lp).map_collect(|&q, &p| q.exp() * (q - p - kl));
    (kl, grad)
}

/// `KL(p || q)` and its gradient w.r.t. the logits of `q`.
fn kl_teacher_student(q_lp: &ndarray::ArrayView1<f64>, p_lp: &ndarray::ArrayView1<f64>) -> (f64, ndarray::Array1<f64>) {
    let kl: f64 = q_lp
        .iter()
        .zip(p_lp)
        .map(|(&q, &p)| if p == f64::NEG_INFINITY { 0.0 } else { p.exp() * (p - q) })
        .sum();
    let grad = ndarray::Zip::from(q_lp).and(p_lp).map_collect(|&q, &p| q.exp() - p.exp());
    (kl, grad)
}

/// Consistency loss of one row given student log-probs at `z_t` and the
/// (already sharpened) teacher log-probs at `z_s`. Each term is averaged
/// over its contributing positions; positions visible to the student
/// contribute nothing.
pub fn mcd_row(
    student_lp: &ArrayView2<f64>,
    teacher_lp: &ArrayView2<f64>,
    x0: &TokenSequence,
    m_t: &MaskIndicator,
    m_s: &MaskIndicator,
    variant: LossVariant,
) -> Result<RowLoss> {
    let (l, _) = student_lp.dim();
    if teacher_lp.dim() != student_lp.dim() {
        return Err(Error::Contract("teacher and student logits differ in shape".into()));
    }
    if x0.len() != l {
        return Err(Error::LengthMismatch { expected: l, actual: x0.len() });
    }
    check_masks(l, m_t, m_s)?;

    let both: Vec<usize> = (0..l).filter(|&i| m_s.values()[i]).collect();
    let teacher_only: Vec<usize> = (0..l).filter(|&i| m_t.values()[i] && !m_s.values()[i]).collect();

    let mut dlogits = Array2::zeros(student_lp.raw_dim());
    let mut kl = 0.0;
    if !both.is_empty() {
        let w = 1.0 / both.len() as f64;
        for &i in &both {
            let (q, p) = (student_lp.row(i), teacher_lp.row(i));
            let (v, g) = match variant {
                LossVariant::Hybrid | LossVariant::KlBwd => kl_student_teacher(&q, &p),
                LossVariant::KlFwd => kl_teacher_student(&q, &p),
            };
            kl += w * v;
            dlogits.row_mut(i).scaled_add(w, &g);
        }
    }
    let mut ce = 0.0;
    if variant == LossVariant::Hybrid && !teacher_only.is_empty() {
        let w = 1.0 / teacher_only.len() as f64;
        for &i in &teacher_only {
            let target = x0.ids()[i] as usize;
            ce -= w * student_lp[[i, target]];
            let mut row = dlogits.row_mut(i);
            row.scaled_add(w, &student_lp.row(i).mapv(f64::exp));
            row[target] -= w;
        }
    }
    Ok(RowLoss { kl, ce, dlogits })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McdLoss {
    pub total: f64,
    pub kl: f64,
    pub ce: f64,
}

/// Consistency loss for one sequence from raw logits. The teacher is
/// sharpened with temperature `tau` and never receives gradients.
pub fn loss_mcd(
    student_logits: &ArrayView2<f64>,
    teacher_logits: &ArrayView2<f64>,
    x0: &TokenSequence,
    m_t: &MaskIndicator,
    m_s: &MaskIndicator,
    tau: f64,
    variant: LossVariant,
) -> Result<McdLoss> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain(format!("temperature {tau} outside (0, 1]")));
    }
    let student = log_softmax_rows(student_logits);
    let teacher = sharpen_log_probs(teacher_logits, tau);
    let r = mcd_row(&student.view(), &teacher.view(), x0, m_t, m_s, variant)?;
    Ok(McdLoss { total: r.total(), kl: r.kl, ce: r.ce })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub loss_kl: f64,
    pub loss_ce: f64,
    pub grad: Params,
}

const CHUNK: usize = super::FORWARD_CHUNK;

fn row_loss(model: &DenoiserModel, row: &TrainRow, spec: LossSpec, logits: &Array2<f64>) -> Result<RowLoss> {
    let lp = log_softmax_rows(&logits.view());
    match (spec, &row.aux) {
        (LossSpec::PretrainCe, RowAux::Pretrain { mask, weight }) => pretrain_row(&lp.view(), &row.target, mask, *weight),
        (LossSpec::Mcd(variant), RowAux::Distill { m_t, m_s, teacher_log_probs }) => {
            if teacher_log_probs.dim() != (model.config.seq_len, model.config.classes()) {
                return Err(Error::Contract("teacher log-probs have the wrong shape".into()));
            }
            mcd_row(&lp.view(), &teacher_log_probs.view(), &row.target, m_t, m_s, variant)
        }
        _ => Err(Error::Contract(format!("row auxiliary inputs do not match loss {spec:?}"))),
    }
}

/// Mean loss over the batch and its exact gradient w.r.t. every parameter.
pub fn loss_and_gradient(model: &DenoiserModel, batch: &[TrainRow], spec: LossSpec) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    for row in batch {
        model.check_input(&row.input)?;
        model.check_input(&row.target)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<(Params, f64, f64)> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, rows)| -> Result<(Params, f64, f64)> {
            let mut grad = Params::zeros(&model.config);
            let (mut kl, mut ce) = (0.0, 0.0);
            let l = model.config.seq_len;
            let ids: Vec<&[u32]> = rows.iter().map(|r| r.input.ids()).collect();
            let (logits, cache) = network::forward(&model.params, &model.config, &ids);
            let mut dlogits = Array2::zeros(logits.raw_dim());
            for (j, row) in rows.iter().enumerate() {
                let span = s![j * l..(j + 1) * l, ..];
                let r = row_loss(model, row, spec, &logits.slice(span).to_owned())?;
                if !r.total().is_finite() {
                    return Err(Error::NonFiniteLoss { row: c * CHUNK + j });
                }
                dlogits.slice_mut(span).assign(&(r.dlogits * scale));
                kl += r.kl;
                ce += r.ce;
            }
            network::backward(&model.params, &model.config, &cache, &dlogits, &mut grad);
            Ok((grad, kl, ce))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = chunks.into_iter();
    let (mut grad, mut kl, mut ce) = iter.next().expect("non-empty batch");
    for (g, k, c) in iter {
        grad.add_assign(&g);
        kl += k;
        ce += c;
    }
    let (loss_kl, loss_ce) = (kl * scale, ce * scale);
    Ok(LossOutput { loss: loss_kl + loss_ce, loss_kl, loss_ce, grad })
}

/// Mean loss only (no backward pass).
pub fn loss_only(model: &DenoiserModel, batch: &[TrainRow], spec: LossSpec) -> Result<f64> {
    let logits = model.forward(&batch.iter().map(|r| r.input.clone()).collect::<Vec<_>>())?;
    let mut total = 0.0;
    for (b, row) in batch.iter().enumerate() {
        let r = row_loss(model, row, spec, &logits.values.index_axis(Axis(0), b).to_owned())?;
        total += r.total();
    }
    Ok(total / batch.len() as f64)
}
