//! Discrete signal schedules and the latent SNR calibration.
//!
//! A token stays clean at time `t` with probability `gamma(t)`. In the latent
//! picture it stays clean iff `alpha/sigma > Y`, where
//! `Y = max_{j != k} eps_j - eps_k` for `K` iid standard normals. Choosing
//! `alpha/sigma = F_Y^{-1}(gamma(t))` makes both descriptions agree.

use std::f64::consts::FRAC_PI_2;
use std::sync::OnceLock;

use crate::normal;
use crate::quadrature::{integrate_adaptive, GaussHermite};
use crate::{Error, Result};

pub const DEFAULT_CDF_TOLERANCE: f64 = 1e-10;

/// Bounds applied to gamma before it goes through `F_Y^{-1}`.
pub const GAMMA_CLAMP: f64 = 1e-6;

const PRIMARY_NODES: usize = 160;
const CHECK_NODES: usize = 128;
const FALLBACK_RANGE: f64 = 12.0;
const FALLBACK_PANELS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Domain(format!("unknown schedule kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Smallest time used when sampling training noise levels.
    pub t_min: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear()
    }
}

impl Schedule {
    pub fn linear() -> Self {
        Self { kind: ScheduleKind::Linear, t_min: 1e-3 }
    }

    pub fn cosine() -> Self {
        Self { kind: ScheduleKind::Cosine, t_min: 1e-3 }
    }

    pub fn new(kind: ScheduleKind, t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 0.5) {
            return Err(Error::Domain(format!("t_min {t_min} outside (0, 0.5)")));
        }
        Ok(Self { kind, t_min })
    }

    /// Probability that a token is still clean at time `t`.
    pub fn gamma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(self.gamma_unchecked(t))
    }

    pub(crate) fn gamma_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::Cosine => {
                if t >= 1.0 {
                    0.0
                } else {
                    (FRAC_PI_2 * t).cos()
                }
            }
        }
    }

    /// Inverse of [`Schedule::gamma`].
    pub fn time_of_gamma(&self, gamma: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Domain(format!("signal level {gamma} outside [0, 1]")));
        }
        Ok(match self.kind {
            ScheduleKind::Linear => 1.0 - gamma,
            ScheduleKind::Cosine => gamma.acos() / FRAC_PI_2,
        })
    }

    /// Continuous-time ELBO weight `-γ'(t) / (1 - γ(t))` (equal to `1/t` for
    /// the linear schedule).
    pub fn elbo_weight(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain(format!("time {t} outside (0, 1]")));
        }
        Ok(match self.kind {
            ScheduleKind::Linear => 1.0 / t,
            ScheduleKind::Cosine => {
                let a = FRAC_PI_2 * t;
                FRAC_PI_2 * a.sin() / (1.0 - a.cos())
            }
        })
    }
}

/// Free-function form of [`Schedule::gamma`].
pub fn gamma(schedule: &Schedule, t: f64) -> Result<f64> {
    schedule.gamma(t)
}

fn hermite_rules() -> &'static (GaussHermite, GaussHermite) {
    static RULES: OnceLock<(GaussHermite, GaussHermite)> = OnceLock::new();
    RULES.get_or_init(|| (GaussHermite::new(PRIMARY_NODES), GaussHermite::new(CHECK_NODES)))
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Domain(format!("K = {k}: need at least one competitor dimension")));
    }
    Ok(())
}

/// `F_Y(y) = P(max_{j != k} eps_j - eps_k < y) = E[Phi(X + y)^(K-1)]`.
pub fn cdf_y(y: f64, k: usize) -> Result<f64> {
    cdf_y_tol(y, k, DEFAULT_CDF_TOLERANCE)
}

pub fn cdf_y_tol(y: f64, k: usize, tol: f64) -> Result<f64> {
    check_k(k)?;
    if !y.is_finite() {
        return Err(Error::Domain(format!("y = {y} is not finite")));
    }
    Ok(cdf_y_raw(y, k, tol))
}

fn cdf_y_raw(y: f64, k: usize, tol: f64) -> f64 {
    let power = (k - 1) as f64;
    let integrand = |x: f64| (power * normal::ln_cdf(x + y)).exp();
    let (primary, check) = hermite_rules();
    let a = primary.expect(integrand);
    let b = check.expect(integrand);
    if (a - b).abs() <= 1e-2 * tol {
        return a.clamp(0.0, 1.0);
    }
    // Steep integrand (large K or far tails): fall back to adaptive quadrature
    // of phi(x) * Phi(x + y)^(K-1) on a truncated window.
    let v = integrate_adaptive(
        |x| normal::pdf(x) * integrand(x),
        -FALLBACK_RANGE,
        FALLBACK_RANGE,
        FALLBACK_PANELS,
        1e-2 * tol,
    );
    v.clamp(0.0, 1.0)
}

/// `F_Y^{-1}(gamma)` by bracketed bisection on the monotone CDF.
pub fn inv_cdf_y(gamma: f64, k: usize) -> Result<f64> {
    inv_cdf_y_tol(gamma, k, DEFAULT_CDF_TOLERANCE)
}

pub fn inv_cdf_y_tol(gamma: f64, k: usize, tol: f64) -> Result<f64> {
    check_k(k)?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("gamma = {gamma} must lie strictly inside (0, 1)")));
    }
    let f = |y: f64| cdf_y_raw(y, k, tol);
    let target_tol = 0.1 * tol;

    let mut lo = -1.0;
    let mut hi = 1.0;
    let mut f_lo = f(lo);
    while f_lo >= gamma {
        hi = lo;
        lo *= 2.0;
        f_lo = f(lo);
        if lo < -1e6 {
            return Err(Error::Domain(format!("could not bracket F_Y^-1({gamma})")));
        }
    }
    let mut f_hi = f(hi);
    while f_hi <= gamma {
        lo = hi;
        hi *= 2.0;
        f_hi = f(hi);
        if hi > 1e6 {
            return Err(Error::Domain(format!("could not bracket F_Y^-1({gamma})")));
        }
    }
    let mut best = (lo, (f_lo - gamma).abs());
    if (f_hi - gamma).abs() < best.1 {
        best = (hi, (f_hi - gamma).abs());
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        let err = (fm - gamma).abs();
        if err < best.1 {
            best = (mid, err);
        }
        if err <= target_tol {
            break;
        }
        if fm < gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.0)
}

/// A schedule together with the latent calibration for a fixed `K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedSchedule {
    pub schedule: Schedule,
    /// Extended vocabulary size: clean vocabulary plus the mask.
    pub vocab_extended: usize,
    pub cdf_tolerance: f64,
}

impl CalibratedSchedule {
    pub fn new(schedule: Schedule, vocab_extended: usize) -> Result<Self> {
        Self::with_tolerance(schedule, vocab_extended, DEFAULT_CDF_TOLERANCE)
    }

    pub fn with_tolerance(schedule: Schedule, vocab_extended: usize, cdf_tolerance: f64) -> Result<Self> {
        check_k(vocab_extended)?;
        if !(cdf_tolerance > 0.0 && cdf_tolerance < 1e-3) {
            return Err(Error::Domain(format!("cdf tolerance {cdf_tolerance} out of range")));
        }
        Ok(Self { schedule, vocab_extended, cdf_tolerance })
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        self.schedule.gamma(t)
    }

    pub fn cdf(&self, y: f64) -> Result<f64> {
        cdf_y_tol(y, self.vocab_extended, self.cdf_tolerance)
    }

    pub fn inv_cdf(&self, gamma: f64) -> Result<f64> {
        inv_cdf_y_tol(gamma, self.vocab_extended, self.cdf_tolerance)
    }

    /// Latent signal-to-noise ratio `alpha/sigma` at time `t`.
    pub fn ratio(&self, t: f64) -> Result<f64> {
        let g = self.gamma(t)?.clamp(GAMMA_CLAMP, 1.0 - GAMMA_CLAMP);
        self.inv_cdf(g)
    }

    /// Variance-preserving `(alpha, sigma)` at time `t`.
    pub fn latent_coefficients(&self, t: f64) -> Result<(f64, f64)> {
        Ok(coefficients_from_ratio(self.ratio(t)?))
    }
}

pub fn coefficients_from_ratio(r: f64) -> (f64, f64) {
    let norm = (1.0 + r * r).sqrt();
    (r / norm, 1.0 / norm)
}

/// Free-function form of [`CalibratedSchedule::latent_coefficients`].
pub fn latent_coefficients(cal: &CalibratedSchedule, t: f64) -> Result<(f64, f64)> {
    cal.latent_coefficients(t)
}

/// One row of a calibration table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRow {
    pub t: f64,
    pub gamma: f64,
    pub ratio: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Calibration on the uniform grid `t = i / (points - 1)`.
pub fn calibration_table(cal: &CalibratedSchedule, points: usize) -> Result<Vec<CalibrationRow>> {
    if points < 2 {
        return Err(Error::Precondition("calibration table needs at least two points".into()));
    }
    (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            let gamma = cal.gamma(t)?;
            let ratio = cal.ratio(t)?;
            let (alpha, sigma) = coefficients_from_ratio(ratio);
            Ok(CalibrationRow { t, gamma, ratio, alpha, sigma })
        })
        .collect()
}

/// Calibration row at a given signal level rather than a given time.
pub fn calibration_row_at_gamma(cal: &CalibratedSchedule, gamma: f64) -> Result<CalibrationRow> {
    let t = cal.schedule.time_of_gamma(gamma)?;
    let ratio = cal.inv_cdf(gamma)?;
    let (alpha, sigma) = coefficients_from_ratio(ratio);
    Ok(CalibrationRow { t, gamma, ratio, alpha, sigma })
}

pub fn calibration_csv(rows: &[CalibrationRow]) -> String {
    let mut out = String::from("t,gamma,ratio,alpha,sigma\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.t, r.gamma, r.ratio, r.alpha, r.sigma));
    }
    out
}
