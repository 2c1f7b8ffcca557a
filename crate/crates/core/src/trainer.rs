//! Teacher pretraining on the forward masking process and round-based
//! consistency distillation with hard teacher resets.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::masking::{coupled_pair, forward_sample, LockNoise, MaskIndicator, TokenSequence};
use crate::model::loss::{loss_and_gradient, sharpen_log_probs, LossSpec, LossVariant, RowAux, TrainRow, MIN_TAU};
use crate::model::optim::{Adam, AdamConfig};
use crate::model::{log_softmax_rows, DenoiserModel};
use crate::rng;
use crate::schedule::Schedule;
use crate::{Error, Result};

/// Training sequences, sampled uniformly with replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct DataStream {
    sequences: Vec<TokenSequence>,
}

impl DataStream {
    pub fn new(sequences: Vec<TokenSequence>) -> Result<Self> {
        let first = sequences.first().ok_or_else(|| Error::Precondition("empty training corpus".into()))?;
        let (len, vocab) = (first.len(), first.vocab());
        if let Some(bad) = sequences.iter().find(|s| s.len() != len || s.vocab() != vocab) {
            return Err(Error::LengthMismatch { expected: len, actual: bad.len() });
        }
        if sequences.iter().any(|s| s.mask_count() > 0) {
            return Err(Error::Domain("training corpus contains mask tokens".into()));
        }
        Ok(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &TokenSequence {
        &self.sequences[rng.random_range(0..self.sequences.len())]
    }
}

/// Uniform on `(lo, 1]`.
fn uniform_open_closed<R: Rng + ?Sized>(lo: f64, rng: &mut R) -> f64 {
    lo + (1.0 - lo) * (1.0 - rng.random::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 32,
            optimizer: AdamConfig { lr: 2e-3, warmup: 200, grad_clip: Some(1.0), ..AdamConfig::default() },
            schedule: Schedule::linear(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const PRETRAIN_CSV_HEADER: &str = "step,loss,grad_norm";

pub fn pretrain_csv(rows: &[PretrainRow]) -> String {
    let mut out = format!("{PRETRAIN_CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.step, r.loss, r.grad_norm).unwrap();
    }
    out
}

fn pretrain_batch<R: Rng + ?Sized>(data: &DataStream, batch: usize, schedule: &Schedule, rng: &mut R) -> Result<Vec<TrainRow>> {
    (0..batch)
        .map(|_| {
            let x0 = data.draw(rng).clone();
            let t = uniform_open_closed(schedule.t_min, rng);
            let z = forward_sample(&x0, schedule.gamma(t)?, rng)?;
            let weight = schedule.elbo_weight(t)? / x0.len() as f64;
            Ok(TrainRow { aux: RowAux::Pretrain { mask: MaskIndicator::of(&z), weight }, input: z, target: x0 })
        })
        .collect()
}

/// Trains `model` in place on the masked-diffusion objective. On error the
/// model holds the last parameters that produced a finite loss.
pub fn pretrain_teacher(
    data: &DataStream,
    model: &mut DenoiserModel,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(&PretrainRow),
) -> Result<Vec<PretrainRow>> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Precondition("pretraining needs at least one step and one row per batch".into()));
    }
    let mut adam = Adam::new(cfg.optimizer.clone(), model.params())?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let rows = pretrain_batch(data, cfg.batch, &cfg.schedule, rng)?;
        let out = loss_and_gradient(model, &rows, LossSpec::PretrainCe).map_err(|e| match e {
            Error::NonFiniteLoss { row } => Error::Diverged { step, reason: format!("non-finite loss in batch row {row}") },
            other => other,
        })?;
        let mut next = model.params().clone();
        let grad_norm = adam.step(&mut next, &out.grad);
        if !next.is_finite() {
            return Err(Error::Diverged { step, reason: "non-finite parameters after update".into() });
        }
        *model.params_mut() = next;
        let row = PretrainRow { step, loss: out.loss, grad_norm };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

/// Mean cross-entropy over masked positions at a fixed signal level.
pub fn masked_cross_entropy(model: &DenoiserModel, data: &[TokenSequence], gamma: f64, seed: u64) -> Result<f64> {
    let parts = data
        .par_iter()
        .enumerate()
        .map(|(i, x0)| -> Result<(f64, usize)> {
            let u = LockNoise::new((0..x0.len()).map(|p| rng::keyed_uniform(seed, &[i as u64, p as u64])).collect())?;
            let (z, m) = crate::masking::mask_locked(x0, &u, gamma)?;
            let lp = log_softmax_rows(&model.logits(&z)?.view());
            let mut ce = 0.0;
            for p in (0..x0.len()).filter(|&p| m.values()[p]) {
                ce -= lp[[p, x0.ids()[p] as usize]];
            }
            Ok((ce, m.count()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (ce, n) = parts.iter().fold((0.0, 0usize), |(a, b), &(c, d)| (a + c, b + d));
    if n == 0 {
        return Err(Error::Precondition("no masked positions".into()));
    }
    Ok(ce / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub rounds: usize,
    pub iters_per_round: usize,
    pub delta0: f64,
    pub lr: f64,
    pub warmup: usize,
    pub tau_init: f64,
    pub tau_step: f64,
    pub loss_variant: LossVariant,
    pub batch: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub schedule: Schedule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            iters_per_round: 2000,
            delta0: 1.0 / 512.0,
            lr: 3e-4,
            warmup: 100,
            tau_init: 0.96,
            tau_step: 0.03,
            loss_variant: LossVariant::Hybrid,
            batch: 32,
            seed: 0,
            grad_clip: Some(1.0),
            schedule: Schedule::linear(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Domain("distillation needs at least one round".into()));
        }
        if !(self.delta0 > 0.0 && self.delta0 < 1.0) {
            return Err(Error::Domain(format!("delta0 {} outside (0, 1)", self.delta0)));
        }
        if self.delta(self.rounds) >= 1.0 {
            return Err(Error::Domain(format!(
                "delta0 * 2^(rounds-1) = {} leaves no room for t in (delta, 1]",
                self.delta(self.rounds)
            )));
        }
        if !(self.tau_init > 0.0 && self.tau_init <= 1.0) || !(self.tau_step >= 0.0) {
            return Err(Error::Domain("tau_init must lie in (0, 1] and tau_step must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Domain("batch must be positive".into()));
        }
        self.optimizer().validate()
    }

    /// Time gap used in `round` (1-based): `δ0 · 2^(round−1)`.
    pub fn delta(&self, round: usize) -> f64 {
        self.delta0 * 2f64.powi(round.saturating_sub(1) as i32)
    }

    /// Sharpening temperature of `round` (1-based), clamped below.
    pub fn tau(&self, round: usize) -> f64 {
        (self.tau_init - self.tau_step * round.saturating_sub(1) as f64).max(MIN_TAU)
    }

    fn optimizer(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, warmup: self.warmup, grad_clip: self.grad_clip, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillRow {
    pub round: usize,
    pub step: usize,
    pub delta: f64,
    pub tau: f64,
    pub loss_total: f64,
    pub loss_kl: f64,
    pub loss_ce: f64,
    pub grad_norm: f64,
}

pub const DISTILL_CSV_HEADER: &str = "round,step,delta,tau,loss_total,loss_kl,loss_ce,grad_norm";

impl DistillRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round, self.step, self.delta, self.tau, self.loss_total, self.loss_kl, self.loss_ce, self.grad_norm
        )
    }
}

pub fn distill_csv(rows: &[DistillRow]) -> String {
    let mut out = format!("{DISTILL_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Student, frozen teacher snapshot and optimiser state.
#[derive(Debug, Clone)]
pub struct TrainState {
    student: DenoiserModel,
    teacher: DenoiserModel,
    optimizer: Adam,
    round: usize,
    step: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Student and teacher both start from the pretrained model.
    pub fn new(pretrained: &DenoiserModel, cfg: &DistillConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            student: pretrained.clone(),
            teacher: pretrained.clone(),
            optimizer: Adam::new(cfg.optimizer(), pretrained.params())?,
            round: 0,
            step: 0,
            rng: rng::stream(cfg.seed, "distill"),
        })
    }

    pub fn student(&self) -> &DenoiserModel {
        &self.student
    }

    pub fn teacher(&self) -> &DenoiserModel {
        &self.teacher
    }

    /// Rounds started so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Optimiser steps taken so far, across rounds.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Hard reset: the teacher becomes a copy of the current student.
    pub fn begin_round(&mut self) {
        self.teacher = self.student.clone();
        self.round += 1;
    }
}

fn distill_batch(state: &mut TrainState, cfg: &DistillConfig, data: &DataStream, delta: f64, tau: f64) -> Result<Vec<TrainRow>> {
    let mut pairs = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let x0 = data.draw(&mut state.rng).clone();
        let u = LockNoise::sample(x0.len(), &mut state.rng);
        let t = uniform_open_closed(delta, &mut state.rng);
        let s = (t - delta).max(0.0);
        let pair = coupled_pair(&x0, &u, cfg.schedule.gamma(t)?, cfg.schedule.gamma(s)?)?;
        if !pair.m_s.is_subset_of(&pair.m_t) {
            return Err(Error::Contract("coupled pair violates mask nesting".into()));
        }
        pairs.push((x0, pair));
    }
    let teacher = &state.teacher;
    pairs
        .into_par_iter()
        .map(|(x0, pair)| {
            let lp = log_softmax_rows(&teacher.logits(&pair.z_s)?.view());
            Ok(TrainRow {
                input: pair.z_t,
                target: x0,
                aux: RowAux::Distill { m_t: pair.m_t, m_s: pair.m_s, teacher_log_probs: sharpen_log_probs(&lp.view(), tau) },
            })
        })
        .collect()
}

/// Runs `iters_per_round` optimiser steps against the current teacher.
pub fn mcd_round(
    state: &mut TrainState,
    cfg: &DistillConfig,
    data: &DataStream,
    mut on_step: impl FnMut(&DistillRow),
) -> Result<Vec<DistillRow>> {
    if state.round == 0 {
        return Err(Error::Precondition("begin_round must be called before the first round".into()));
    }
    let (delta, tau) = (cfg.delta(state.round), cfg.tau(state.round));
    let frozen = state.teacher.params().fingerprint();
    let mut log = Vec::with_capacity(cfg.iters_per_round);
    for _ in 0..cfg.iters_per_round {
        let rows = distill_batch(state, cfg, data, delta, tau)?;
        let step = state.step + 1;
        let out = loss_and_gradient(&state.student, &rows, LossSpec::Mcd(cfg.loss_variant)).map_err(|e| match e {
            Error::NonFiniteLoss { row } => Error::Diverged { step, reason: format!("non-finite loss in batch row {row}") },
            other => other,
        })?;
        let mut next = state.student.params().clone();
        let grad_norm = state.optimizer.step(&mut next, &out.grad);
        if !next.is_finite() {
            return Err(Error::Diverged { step, reason: "non-finite parameters after update".into() });
        }
        *state.student.params_mut() = next;
        state.step = step;
        let row = DistillRow {
            round: state.round,
            step,
            delta,
            tau,
            loss_total: out.loss,
            loss_kl: out.loss_kl,
            loss_ce: out.loss_ce,
            grad_norm,
        };
        on_step(&row);
        log.push(row);
    }
    if state.teacher.params().fingerprint() != frozen {
        return Err(Error::Contract("teacher parameters changed within a round".into()));
    }
    Ok(log)
}

/// Result of a full distillation run.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// Student snapshot at the end of each round, in order.
    pub students: Vec<DenoiserModel>,
    pub metrics: Vec<DistillRow>,
}

/// All rounds: hard reset, `M` iterations, then `on_round_end(round, student)`
/// (used to write per-round checkpoints before the next round starts).
pub fn run_distillation(
    teacher: &DenoiserModel,
    cfg: &DistillConfig,
    data: &DataStream,
    mut on_step: impl FnMut(&DistillRow),
    mut on_round_end: impl FnMut(usize, &DenoiserModel) -> Result<()>,
) -> Result<DistillOutcome> {
    if data.sequences()[0].len() != teacher.config().seq_len || data.sequences()[0].vocab() != teacher.config().vocab {
        return Err(Error::Contract("corpus does not match the teacher's sequence length or vocabulary".into()));
    }
    let mut state = TrainState::new(teacher, cfg)?;
    let mut students = Vec::with_capacity(cfg.rounds);
    let mut metrics = Vec::new();
    for _ in 0..cfg.rounds {
        state.begin_round();
        metrics.extend(mcd_round(&mut state, cfg, data, &mut on_step)?);
        on_round_end(state.round, &state.student)?;
        students.push(state.student.clone());
    }
    Ok(DistillOutcome { students, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::loss::loss_mcd;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn tiny() -> (DenoiserModel, DataStream) {
        let cfg = ModelConfig { vocab: 6, seq_len: 8, width: 8, depth: 1, heads: 2, ffn_mult: 2, init_std: 0.1 };
        let model = DenoiserModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seqs = (0..20).map(|_| TokenSequence::new((0..8).map(|_| rng.random_range(0..5)).collect(), 6).unwrap()).collect();
        (model, DataStream::new(seqs).unwrap())
    }

    fn small_cfg(rounds: usize, iters: usize) -> DistillConfig {
        DistillConfig { rounds, iters_per_round: iters, batch: 4, warmup: 0, lr: 1e-3, ..DistillConfig::default() }
    }

    #[test]
    fn paper_delta_and_tau_sequences() {
        let cfg = DistillConfig { rounds: 5, ..DistillConfig::default() };
        cfg.validate().unwrap();
        let deltas: Vec<f64> = (1..=5).map(|r| cfg.delta(r)).collect();
        assert_eq!(deltas, vec![1.0 / 512.0, 1.0 / 256.0, 1.0 / 128.0, 1.0 / 64.0, 1.0 / 32.0]);
        let taus: Vec<f64> = (1..=5).map(|r| cfg.tau(r)).collect();
        for (a, b) in taus.iter().zip([0.96, 0.93, 0.90, 0.87, 0.84]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(DistillConfig { tau_step: 0.5, ..cfg.clone() }.tau(4), MIN_TAU);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DistillConfig { rounds: 0, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig { delta0: 0.0, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig { delta0: 0.25, rounds: 3, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig { tau_init: 1.5, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig { batch: 0, ..DistillConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_iterations_leave_the_student_unchanged() {
        let (model, data) = tiny();
        let cfg = small_cfg(2, 0);
        let out = run_distillation(&model, &cfg, &data, |_| {}, |_, _| Ok(())).unwrap();
        assert!(out.metrics.is_empty());
        assert!(out.students.iter().all(|s| s == &model));
    }

    #[test]
    fn teacher_is_reset_at_round_start_only() {
        let (model, data) = tiny();
        let cfg = small_cfg(2, 3);
        let mut state = TrainState::new(&model, &cfg).unwrap();
        state.begin_round();
        let before = state.teacher().params().fingerprint();
        mcd_round(&mut state, &cfg, &data, |_| {}).unwrap();
        assert_eq!(state.teacher().params().fingerprint(), before);
        assert_ne!(state.student().params().fingerprint(), before);
        state.begin_round();
        assert_eq!(state.teacher(), state.student());
        assert_eq!(state.round(), 2);
    }

    #[test]
    fn metrics_decompose_and_are_reproducible() {
        let (model, data) = tiny();
        let cfg = small_cfg(2, 3);
        let mut ends = vec![];
        let a = run_distillation(&model, &cfg, &data, |_| {}, |r, _| {
            ends.push(r);
            Ok(())
        })
        .unwrap();
        assert_eq!(ends, vec![1, 2]);
        let b = run_distillation(&model, &cfg, &data, |_| {}, |_, _| Ok(())).unwrap();
        assert_eq!(distill_csv(&a.metrics), distill_csv(&b.metrics));
        assert_eq!(a.metrics.len(), 6);
        for r in &a.metrics {
            assert!((r.loss_total - r.loss_kl - r.loss_ce).abs() < 1e-9);
            assert!(r.loss_kl >= 0.0);
        }
        assert_eq!(a.metrics[3].delta, 2.0 * a.metrics[0].delta);
        assert!(distill_csv(&a.metrics).starts_with("round,step,delta,tau,loss_total,loss_kl,loss_ce,grad_norm\n"));
    }

    #[test]
    fn self_distillation_at_zero_gap_and_unit_temperature_is_zero() {
        let (model, data) = tiny();
        let x0 = &data.sequences()[0];
        let u = LockNoise::sample(8, &mut ChaCha8Rng::seed_from_u64(5));
        let pair = coupled_pair(x0, &u, 0.4, 0.4).unwrap();
        let logits = model.logits(&pair.z_t).unwrap();
        let teacher = model.logits(&pair.z_s).unwrap();
        let loss = loss_mcd(&logits.view(), &teacher.view(), x0, &pair.m_t, &pair.m_s, 1.0, LossVariant::Hybrid).unwrap();
        assert!(loss.total.abs() < 1e-12);
    }

    #[test]
    fn pretraining_rejects_zero_steps_and_reduces_loss() {
        let (mut model, data) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PretrainConfig { steps: 0, ..PretrainConfig::default() };
        assert!(pretrain_teacher(&data, &mut model, &cfg, &mut rng, |_| {}).is_err());
        let before = masked_cross_entropy(&model, data.sequences(), 0.5, 1).unwrap();
        let cfg = PretrainConfig {
            steps: 150,
            batch: 8,
            optimizer: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            ..PretrainConfig::default()
        };
        let log = pretrain_teacher(&data, &mut model, &cfg, &mut rng, |_| {}).unwrap();
        assert_eq!(log.len(), 150);
        let after = masked_cross_entropy(&model, data.sequences(), 0.5, 1).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn corpus_validation() {
        assert!(DataStream::new(vec![]).is_err());
        let a = TokenSequence::new(vec![0, 1], 4).unwrap();
        let b = TokenSequence::new(vec![0, 1, 2], 4).unwrap();
        assert!(DataStream::new(vec![a.clone(), b]).is_err());
        assert!(DataStream::new(vec![TokenSequence::new(vec![3, 1], 4).unwrap()]).is_err());
        assert_eq!(DataStream::new(vec![a]).unwrap().len(), 1);
    }
}
