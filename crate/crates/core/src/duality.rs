//! Latent Gaussian states, the projection onto the masked discrete state, and
//! Monte Carlo checks that the projected process is the masked process.
//!
//! The full `K`-dimensional noise only ever lives in this module. Production
//! code (masking, training, sampling) uses the scalar `u = F_Y(Y)` per token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::rng;
use crate::schedule::{coefficients_from_ratio, CalibratedSchedule, Schedule};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiscreteOutcome {
    Signal,
    Mask,
}

/// `w_t = alpha_t * onehot(k) + sigma_t * eps` in `R^K`; the last coordinate
/// is the mask dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    w: Vec<f64>,
    signal_index: usize,
}

impl LatentState {
    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn signal_index(&self) -> usize {
        self.signal_index
    }

    pub fn mask_index(&self) -> usize {
        self.w.len() - 1
    }

    fn refill(&mut self, k: usize, epsilon: &[f64], alpha: f64, sigma: f64) {
        self.w.clear();
        self.w.extend(epsilon.iter().map(|e| sigma * e));
        self.w[k] += alpha;
        self.signal_index = k;
    }
}

fn check_signal_index(k: usize, dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::Domain(format!("latent dimension {dim} < 2")));
    }
    if k >= dim - 1 {
        return Err(Error::Domain(format!(
            "signal index {k} must be below the mask index {}",
            dim - 1
        )));
    }
    Ok(())
}

/// Latent state at time `t` for clean token `k` and noise `epsilon`.
pub fn make_latent(k: usize, epsilon: &[f64], cal: &CalibratedSchedule, t: f64) -> Result<LatentState> {
    if epsilon.len() != cal.vocab_extended {
        return Err(Error::LengthMismatch { expected: cal.vocab_extended, actual: epsilon.len() });
    }
    let (alpha, sigma) = cal.latent_coefficients(t)?;
    make_latent_with(k, epsilon, alpha, sigma)
}

/// Latent state for explicit coefficients.
pub fn make_latent_with(k: usize, epsilon: &[f64], alpha: f64, sigma: f64) -> Result<LatentState> {
    check_signal_index(k, epsilon.len())?;
    let mut state = LatentState { w: Vec::with_capacity(epsilon.len()), signal_index: k };
    state.refill(k, epsilon, alpha, sigma);
    Ok(state)
}

/// Signal iff the signal coordinate strictly dominates every other one.
/// Exact ties resolve to the mask.
pub fn project(state: &LatentState) -> DiscreteOutcome {
    let k = state.signal_index;
    let wk = state.w[k];
    let dominated = state
        .w
        .iter()
        .enumerate()
        .any(|(j, &wj)| j != k && wj >= wk);
    if dominated {
        DiscreteOutcome::Mask
    } else {
        DiscreteOutcome::Signal
    }
}

/// `Y = max_{j != k} eps_j - eps_k`.
pub fn noise_margin(epsilon: &[f64], k: usize) -> f64 {
    let competitor = epsilon
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &e)| e)
        .fold(f64::NEG_INFINITY, f64::max);
    competitor - epsilon[k]
}

/// A fixed noise draw and the scalar that locks its whole trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySeed {
    pub epsilon: Vec<f64>,
    pub signal_index: usize,
    pub derived_y: f64,
    pub derived_u: f64,
}

impl TrajectorySeed {
    pub fn new(epsilon: Vec<f64>, signal_index: usize, cal: &CalibratedSchedule) -> Result<Self> {
        if epsilon.len() != cal.vocab_extended {
            return Err(Error::LengthMismatch { expected: cal.vocab_extended, actual: epsilon.len() });
        }
        check_signal_index(signal_index, epsilon.len())?;
        let derived_y = noise_margin(&epsilon, signal_index);
        let derived_u = cal.cdf(derived_y)?;
        Ok(Self { epsilon, signal_index, derived_y, derived_u })
    }
}

/// Threshold rule on the locked scalar: signal iff `gamma > u`.
pub fn threshold_state(u: f64, gamma: f64) -> DiscreteOutcome {
    if gamma > u {
        DiscreteOutcome::Signal
    } else {
        DiscreteOutcome::Mask
    }
}

/// State at time `t` of the trajectory locked by `seed`. No fresh randomness.
pub fn locked_discrete_state(seed: &TrajectorySeed, cal: &CalibratedSchedule, t: f64) -> Result<DiscreteOutcome> {
    if !(seed.derived_u > 0.0 && seed.derived_u < 1.0) {
        return Err(Error::Domain(format!("locked scalar {} outside (0, 1)", seed.derived_u)));
    }
    Ok(threshold_state(seed.derived_u, cal.gamma(t)?))
}

/// Interior grid `t_i = (i + 1/2) / n`. Endpoints are excluded because the
/// latent path clamps gamma there.
pub fn midpoint_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

const SHARD: usize = 4096;

fn draw_noise<R: Rng>(rng: &mut R, eps: &mut [f64]) -> usize {
    for e in eps.iter_mut() {
        *e = rng.sample(StandardNormal);
    }
    rng.random_range(0..eps.len() - 1)
}

fn shard_rng(seed: u64, label: &str, shard: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(rng::split_seed(seed, label));
    r.set_stream(shard as u64);
    r
}

/// Empirical unmask rate at one grid time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticRow {
    pub t: f64,
    pub gamma: f64,
    pub ratio: f64,
    pub empirical: f64,
    pub std_err: f64,
}

impl StaticRow {
    pub fn abs_dev(&self) -> f64 {
        (self.empirical - self.gamma).abs()
    }

    /// Within three binomial standard errors of gamma.
    pub fn within_bound(&self) -> bool {
        self.abs_dev() <= 3.0 * self.std_err
    }
}

/// Static duality: fraction of projections that keep the signal, per time.
/// One noise draw per sample is shared across the whole grid, so every row
/// is an independent-sample binomial estimate of its own gamma.
pub fn static_duality(cal: &CalibratedSchedule, n_samples: usize, times: &[f64], rng_seed: u64) -> Result<Vec<StaticRow>> {
    let dim = cal.vocab_extended;
    let coeffs = times
        .iter()
        .map(|&t| {
            let ratio = cal.ratio(t)?;
            Ok((t, cal.gamma(t)?, ratio, coefficients_from_ratio(ratio)))
        })
        .collect::<Result<Vec<_>>>()?;
    let shards = n_samples.div_ceil(SHARD);
    let counts = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut r = shard_rng(rng_seed, "duality-static", shard);
            let n = SHARD.min(n_samples - shard * SHARD);
            let mut eps = vec![0.0; dim];
            let mut state = LatentState { w: Vec::with_capacity(dim), signal_index: 0 };
            let mut hits = vec![0u64; coeffs.len()];
            for _ in 0..n {
                let k = draw_noise(&mut r, &mut eps);
                for (h, &(_, _, _, (alpha, sigma))) in hits.iter_mut().zip(&coeffs) {
                    state.refill(k, &eps, alpha, sigma);
                    if project(&state) == DiscreteOutcome::Signal {
                        *h += 1;
                    }
                }
            }
            hits
        })
        .reduce(
            || vec![0u64; coeffs.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let n = n_samples as f64;
    Ok(coeffs
        .iter()
        .zip(counts)
        .map(|(&(t, gamma, ratio, _), c)| StaticRow {
            t,
            gamma,
            ratio,
            empirical: c as f64 / n,
            std_err: (gamma * (1.0 - gamma) / n).sqrt(),
        })
        .collect())
}

/// Agreement between the full projection and the scalar threshold along
/// locked trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LockingSummary {
    pub trajectories: usize,
    pub comparisons: usize,
    pub disagreements: usize,
    /// Disagreements further than the CDF tolerance from the decision boundary.
    pub disagreements_outside_tolerance: usize,
    /// Locked trajectories that unmask after having been masked.
    pub nesting_violations: usize,
    /// Trajectories whose projection path switches state more than once.
    pub multi_switch: usize,
}

impl LockingSummary {
    pub fn agreement_rate(&self) -> f64 {
        if self.comparisons == 0 {
            return 1.0;
        }
        1.0 - self.disagreements as f64 / self.comparisons as f64
    }

    fn merge(mut self, o: Self) -> Self {
        self.trajectories += o.trajectories;
        self.comparisons += o.comparisons;
        self.disagreements += o.disagreements;
        self.disagreements_outside_tolerance += o.disagreements_outside_tolerance;
        self.nesting_violations += o.nesting_violations;
        self.multi_switch += o.multi_switch;
        self
    }
}

/// Compares `project(make_latent(k, eps, t))` with `gamma_t > F_Y(Y)` for
/// `n_traj` random noise draws over `times` (must be increasing).
pub fn check_locking(cal: &CalibratedSchedule, n_traj: usize, times: &[f64], rng_seed: u64) -> Result<LockingSummary> {
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("locking grid must be strictly increasing".into()));
    }
    let dim = cal.vocab_extended;
    let coeffs = times
        .iter()
        .map(|&t| Ok((cal.gamma(t)?, cal.latent_coefficients(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let shards = n_traj.div_ceil(SHARD);
    let partial = (0..shards)
        .into_par_iter()
        .map(|shard| -> Result<LockingSummary> {
            let mut r = shard_rng(rng_seed, "duality-locking", shard);
            let n = SHARD.min(n_traj - shard * SHARD);
            let mut summary = LockingSummary::default();
            let mut eps = vec![0.0; dim];
            let mut state = LatentState { w: Vec::with_capacity(dim), signal_index: 0 };
            for _ in 0..n {
                let k = draw_noise(&mut r, &mut eps);
                let seed = TrajectorySeed::new(eps.clone(), k, cal)?;
                summary.trajectories += 1;
                let mut prev_projected = None;
                let mut switches = 0;
                let mut seen_mask = false;
                let mut nested = true;
                for &(gamma, (alpha, sigma)) in &coeffs {
                    state.refill(k, &eps, alpha, sigma);
                    let projected = project(&state);
                    let locked = threshold_state(seed.derived_u, gamma);
                    summary.comparisons += 1;
                    if projected != locked {
                        summary.disagreements += 1;
                        if (seed.derived_u - gamma).abs() > cal.cdf_tolerance {
                            summary.disagreements_outside_tolerance += 1;
                        }
                    }
                    if let Some(p) = prev_projected {
                        if p != projected {
                            switches += 1;
                        }
                    }
                    prev_projected = Some(projected);
                    match locked {
                        DiscreteOutcome::Mask => seen_mask = true,
                        DiscreteOutcome::Signal if seen_mask => nested = false,
                        DiscreteOutcome::Signal => {}
                    }
                }
                if switches > 1 {
                    summary.multi_switch += 1;
                }
                if !nested {
                    summary.nesting_violations += 1;
                }
            }
            Ok(summary)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(partial.into_iter().fold(LockingSummary::default(), LockingSummary::merge))
}

/// Batch result of all duality checks for one `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub vocab_extended: usize,
    pub n_samples: usize,
    pub rows: Vec<StaticRow>,
    pub locking: LockingSummary,
}

pub const MAX_LOCKING_TRAJECTORIES: usize = 10_000;
pub const MAX_DISAGREEMENT_RATE: f64 = 1e-3;

impl DualityReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(StaticRow::within_bound)
            && 1.0 - self.locking.agreement_rate() <= MAX_DISAGREEMENT_RATE
            && self.locking.disagreements_outside_tolerance == 0
            && self.locking.nesting_violations == 0
            && self.locking.multi_switch == 0
    }

    pub const CSV_HEADER: &'static str = "K,t,gamma,ratio,empirical,std_err,abs_dev,within_3se";

    /// Data rows followed by a `#`-prefixed summary line.
    pub fn csv_body(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.vocab_extended,
                r.t,
                r.gamma,
                r.ratio,
                r.empirical,
                r.std_err,
                r.abs_dev(),
                r.within_bound()
            ));
        }
        let l = &self.locking;
        out.push_str(&format!(
            "# summary K={} n_samples={} locking_trajectories={} locking_comparisons={} locking_agreement={} disagreements={} outside_tolerance={} nesting_violations={} multi_switch={} pass={}\n",
            self.vocab_extended,
            self.n_samples,
            l.trajectories,
            l.comparisons,
            l.agreement_rate(),
            l.disagreements,
            l.disagreements_outside_tolerance,
            l.nesting_violations,
            l.multi_switch,
            self.passed()
        ));
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_body())
    }
}

pub const MIN_REPORT_SAMPLES: usize = 10_000;

/// Runs the static, locking and nesting checks. Deterministic in `rng_seed`.
pub fn verify_duality_report(
    vocab_extended: usize,
    schedule: Schedule,
    n_samples: usize,
    t_grid: usize,
    rng_seed: u64,
) -> Result<DualityReport> {
    if n_samples < MIN_REPORT_SAMPLES {
        return Err(Error::Precondition(format!(
            "n_samples = {n_samples} below the minimum of {MIN_REPORT_SAMPLES}"
        )));
    }
    if t_grid == 0 {
        return Err(Error::Precondition("t_grid must be positive".into()));
    }
    let cal = CalibratedSchedule::new(schedule, vocab_extended)?;
    let times = midpoint_grid(t_grid);
    let rows = static_duality(&cal, n_samples, &times, rng_seed)?;
    let locking = check_locking(&cal, n_samples.min(MAX_LOCKING_TRAJECTORIES), &times, rng_seed)?;
    Ok(DualityReport { vocab_extended, n_samples, rows, locking })
}
