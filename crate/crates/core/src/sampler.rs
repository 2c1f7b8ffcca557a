//! Ancestral reverse sampling on a uniform time grid.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::masking::TokenSequence;
use crate::model::Denoiser;
use crate::rng::keyed_uniform;
use crate::schedule::Schedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(steps: usize, schedule: Schedule, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("sampler needs at least one step".into()));
        }
        Ok(Self { steps, schedule, seed })
    }

    /// `t_i = 1 - i/N` for `i = 0..=N`.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.steps as f64;
        (0..=self.steps).map(|i| if i == self.steps { 0.0 } else { 1.0 - i as f64 / n }).collect()
    }
}

/// Probability that a masked token is revealed when moving from `gamma_t` to `gamma_s`.
pub fn unmask_probability(gamma_t: f64, gamma_s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma_t) || !(0.0..=1.0).contains(&gamma_s) {
        return Err(Error::Domain(format!("signal levels ({gamma_t}, {gamma_s}) outside [0, 1]")));
    }
    if gamma_s < gamma_t {
        return Err(Error::Ordering { gamma_t, gamma_s });
    }
    if gamma_t >= 1.0 {
        return Err(Error::InconsistentState("masked positions at a noise level with no masking".into()));
    }
    Ok((gamma_s - gamma_t) / (1.0 - gamma_t))
}

/// Inverse-CDF draw from unnormalised log-weights given a uniform in `[0, 1)`.
pub fn categorical_from_uniform(log_probs: &[f64], u: f64) -> usize {
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_probs.iter().map(|&v| (v - max).exp()).collect();
    let target = u * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    // rounding left `target` at the top edge; take the last class with mass
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn check_shape(model: &dyn Denoiser, z: &TokenSequence) -> Result<()> {
    if z.len() != model.seq_len() || z.vocab() != model.vocab() {
        return Err(Error::LengthMismatch { expected: model.seq_len(), actual: z.len() });
    }
    Ok(())
}

/// Positions revealed by the step `gamma_t -> gamma_s`.
fn reveal_set<F>(z_t: &TokenSequence, gamma_t: f64, gamma_s: f64, draw: &mut F) -> Result<Vec<usize>>
where
    F: FnMut(usize, u64) -> f64,
{
    if z_t.mask_count() == 0 {
        if gamma_s < gamma_t {
            return Err(Error::Ordering { gamma_t, gamma_s });
        }
        return Ok(Vec::new());
    }
    let p = unmask_probability(gamma_t, gamma_s)?;
    Ok((0..z_t.len()).filter(|&i| z_t.is_masked(i) && draw(i, 0) < p).collect())
}

fn fill_revealed<F>(z: &mut TokenSequence, reveal: &[usize], lp: &Array2<f64>, draw: &mut F)
where
    F: FnMut(usize, u64) -> f64,
{
    let ids = z.ids_mut();
    for &i in reveal {
        let row = lp.row(i);
        ids[i] = categorical_from_uniform(row.as_slice().expect("contiguous rows"), draw(i, 1)) as u32;
    }
}

fn step_with<F>(model: &dyn Denoiser, z_t: &TokenSequence, gamma_t: f64, gamma_s: f64, mut draw: F) -> Result<TokenSequence>
where
    F: FnMut(usize, u64) -> f64,
{
    check_shape(model, z_t)?;
    let reveal = reveal_set(z_t, gamma_t, gamma_s, &mut draw)?;
    let mut z_s = z_t.clone();
    if !reveal.is_empty() {
        let lp = model.log_probs(z_t)?;
        fill_revealed(&mut z_s, &reveal, &lp, &mut draw);
    }
    Ok(z_s)
}

/// One reverse step: each masked position is revealed independently with
/// probability `(γ_s − γ_t)/(1 − γ_t)` and, if revealed, drawn from the
/// model's distribution given `z_t`. Visible positions are copied.
pub fn reverse_step<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    z_t: &TokenSequence,
    gamma_t: f64,
    gamma_s: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    // draws are consumed position by position: the reveal decision for all
    // positions first, then one categorical draw per revealed position
    step_with(model, z_t, gamma_t, gamma_s, |_, _| rng.random::<f64>())
}

/// Generates one sequence; randomness is keyed by `(seed, index, step, position)`.
pub fn generate_one(model: &dyn Denoiser, cfg: &SamplerConfig, index: u64) -> Result<TokenSequence> {
    if cfg.steps == 0 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    let grid = cfg.time_grid();
    let mut z = TokenSequence::all_masked(model.seq_len(), model.vocab());
    for step in 0..cfg.steps {
        let gamma_t = cfg.schedule.gamma(grid[step])?;
        let gamma_s = cfg.schedule.gamma(grid[step + 1])?;
        let before = z.mask_count();
        z = step_with(model, &z, gamma_t, gamma_s, keyed_draw(cfg, index, step))?;
        debug_assert!(z.mask_count() <= before);
    }
    residual_check(&z)?;
    Ok(z)
}

fn keyed_draw(cfg: &SamplerConfig, index: u64, step: usize) -> impl FnMut(usize, u64) -> f64 + '_ {
    move |i, which| keyed_uniform(cfg.seed, &[index, step as u64, i as u64, which])
}

fn residual_check(z: &TokenSequence) -> Result<()> {
    if z.mask_count() > 0 {
        return Err(Error::InconsistentState(format!("{} masked positions remain after the final step", z.mask_count())));
    }
    Ok(())
}

/// Runs sequences `first..first + n` in lockstep so each step makes one
/// batched model call. Identical output to [`generate_one`] per index.
fn generate_chunk(model: &dyn Denoiser, cfg: &SamplerConfig, first: u64, n: usize) -> Result<Vec<TokenSequence>> {
    let grid = cfg.time_grid();
    let mut zs = vec![TokenSequence::all_masked(model.seq_len(), model.vocab()); n];
    for step in 0..cfg.steps {
        let gamma_t = cfg.schedule.gamma(grid[step])?;
        let gamma_s = cfg.schedule.gamma(grid[step + 1])?;
        let mut reveals = Vec::with_capacity(n);
        for (j, z) in zs.iter().enumerate() {
            reveals.push(reveal_set(z, gamma_t, gamma_s, &mut keyed_draw(cfg, first + j as u64, step))?);
        }
        let active: Vec<usize> = (0..n).filter(|&j| !reveals[j].is_empty()).collect();
        if active.is_empty() {
            continue;
        }
        let inputs: Vec<&TokenSequence> = active.iter().map(|&j| &zs[j]).collect();
        let lps = model.log_probs_batch(&inputs)?;
        for (&j, lp) in active.iter().zip(&lps) {
            fill_revealed(&mut zs[j], &reveals[j], lp, &mut keyed_draw(cfg, first + j as u64, step));
        }
    }
    zs.iter().try_for_each(residual_check)?;
    Ok(zs)
}

/// Generates `count` sequences in parallel; output is independent of thread scheduling.
pub fn generate(model: &dyn Denoiser, cfg: &SamplerConfig, count: usize) -> Result<Vec<TokenSequence>> {
    if count == 0 {
        return Err(Error::Precondition("count must be at least 1".into()));
    }
    if cfg.steps == 0 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    check_shape(model, &TokenSequence::all_masked(model.seq_len(), model.vocab()))?;
    let starts: Vec<u64> = (0..count as u64).step_by(GENERATE_CHUNK).collect();
    let chunks = starts
        .into_par_iter()
        .map(|first| generate_chunk(model, cfg, first, GENERATE_CHUNK.min(count - first as usize)))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

const GENERATE_CHUNK: usize = 32;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    /// Always predicts a fixed clean sequence with certainty.
    struct Oracle {
        x0: Vec<u32>,
        vocab: usize,
    }

    impl Denoiser for Oracle {
        fn seq_len(&self) -> usize {
            self.x0.len()
        }
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn log_probs(&self, _z: &TokenSequence) -> Result<Array2<f64>> {
            let mut lp = Array2::from_elem((self.x0.len(), self.vocab - 1), f64::NEG_INFINITY);
            for (i, &x) in self.x0.iter().enumerate() {
                lp[[i, x as usize]] = 0.0;
            }
            Ok(lp)
        }
    }

    /// Uniform over the clean vocabulary.
    struct Flat {
        len: usize,
        vocab: usize,
    }

    impl Denoiser for Flat {
        fn seq_len(&self) -> usize {
            self.len
        }
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn log_probs(&self, _z: &TokenSequence) -> Result<Array2<f64>> {
            Ok(Array2::from_elem((self.len, self.vocab - 1), -((self.vocab - 1) as f64).ln()))
        }
    }

    #[test]
    fn grid_endpoints() {
        let cfg = SamplerConfig::new(4, Schedule::linear(), 0).unwrap();
        assert_eq!(cfg.time_grid(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(SamplerConfig::new(0, Schedule::linear(), 0).is_err());
    }

    #[test]
    fn oracle_denoiser_is_reproduced_at_any_step_count() {
        let oracle = Oracle { x0: vec![3, 1, 4, 1, 5, 0, 2, 6], vocab: 8 };
        for steps in [1, 2, 3, 8, 50] {
            for sched in [Schedule::linear(), Schedule::cosine()] {
                let cfg = SamplerConfig::new(steps, sched, 9).unwrap();
                for z in generate(&oracle, &cfg, 5).unwrap() {
                    assert_eq!(z.ids(), &oracle.x0[..]);
                }
            }
        }
    }

    #[test]
    fn equal_levels_change_nothing_and_full_level_reveals_everything() {
        let m = Flat { len: 16, vocab: 5 };
        let z = TokenSequence::all_masked(16, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(reverse_step(&m, &z, 0.3, 0.3, &mut rng).unwrap(), z);
        let out = reverse_step(&m, &z, 0.3, 1.0, &mut rng).unwrap();
        assert_eq!(out.mask_count(), 0);
    }

    #[test]
    fn inconsistent_and_misordered_levels_are_errors() {
        let m = Flat { len: 4, vocab: 5 };
        let z = TokenSequence::all_masked(4, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(reverse_step(&m, &z, 1.0, 1.0, &mut rng), Err(Error::InconsistentState(_))));
        assert!(matches!(reverse_step(&m, &z, 0.5, 0.4, &mut rng), Err(Error::Ordering { .. })));
    }

    #[test]
    fn visible_tokens_are_never_changed_and_masks_never_grow() {
        let m = Flat { len: 32, vocab: 6 };
        let cfg = SamplerConfig::new(7, Schedule::cosine(), 1).unwrap();
        let grid = cfg.time_grid();
        let mut z = TokenSequence::all_masked(32, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for w in grid.windows(2) {
            let next = reverse_step(&m, &z, cfg.schedule.gamma(w[0]).unwrap(), cfg.schedule.gamma(w[1]).unwrap(), &mut rng).unwrap();
            assert!(next.mask_count() <= z.mask_count());
            for i in (0..32).filter(|&i| !z.is_masked(i)) {
                assert_eq!(next.ids()[i], z.ids()[i]);
            }
            z = next;
        }
        assert_eq!(z.mask_count(), 0);
    }

    #[test]
    fn generation_is_seeded() {
        let m = Flat { len: 12, vocab: 9 };
        let a = generate(&m, &SamplerConfig::new(3, Schedule::linear(), 5).unwrap(), 4).unwrap();
        let b = generate(&m, &SamplerConfig::new(3, Schedule::linear(), 5).unwrap(), 4).unwrap();
        let c = generate(&m, &SamplerConfig::new(3, Schedule::linear(), 6).unwrap(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|z| z.mask_count() == 0));
    }

    #[test]
    fn lockstep_batches_match_single_sequence_generation() {
        use crate::model::{DenoiserModel, ModelConfig};
        let cfg_m = ModelConfig { vocab: 7, seq_len: 10, width: 8, depth: 1, heads: 2, ffn_mult: 2, init_std: 0.5 };
        let m = DenoiserModel::new(cfg_m, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        let cfg = SamplerConfig::new(5, Schedule::cosine(), 11).unwrap();
        let all = generate(&m, &cfg, 70).unwrap();
        assert_eq!(all.len(), 70);
        for (i, z) in all.iter().enumerate() {
            assert_eq!(z, &generate_one(&m, &cfg, i as u64).unwrap());
        }
    }

    #[test]
    fn categorical_inverse_cdf() {
        let lp = [0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()];
        assert_eq!(categorical_from_uniform(&lp, 0.0), 0);
        assert_eq!(categorical_from_uniform(&lp, 0.19), 0);
        assert_eq!(categorical_from_uniform(&lp, 0.21), 1);
        assert_eq!(categorical_from_uniform(&lp, 0.71), 2);
        assert_eq!(categorical_from_uniform(&[0.0, f64::NEG_INFINITY], 0.999_999_999), 0);
    }
}
