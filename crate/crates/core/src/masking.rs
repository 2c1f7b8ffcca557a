//! Production masking path: the deterministic mask operator driven by one
//! locked uniform per token, coupled student/teacher views, and the
//! independent forward corruption used for pretraining.

use rand::Rng;

use crate::{Error, Result};

/// Token ids over an extended vocabulary of size `vocab`; id `vocab - 1` is
/// the mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    vocab: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Domain(format!("vocabulary size {vocab} < 2")));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(Self { ids, vocab })
    }

    /// Clean data: ids must avoid the mask.
    pub fn clean(ids: Vec<u32>, vocab: usize) -> Result<Self> {
        let seq = Self::new(ids, vocab)?;
        if seq.mask_count() > 0 {
            return Err(Error::Contract("clean sequence contains the mask id".into()));
        }
        Ok(seq)
    }

    pub fn all_masked(len: usize, vocab: usize) -> Self {
        Self { ids: vec![(vocab - 1) as u32; len], vocab }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mask_id(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.ids[i] == self.mask_id()
    }

    pub fn mask_count(&self) -> usize {
        let m = self.mask_id();
        self.ids.iter().filter(|&&id| id == m).count()
    }

    pub(crate) fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }
}

/// One uniform in `[0, 1)` per position, fixed for a whole trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LockNoise(Vec<f64>);

impl LockNoise {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = u.iter().find(|v| !(0.0..1.0).contains(*v)) {
            return Err(Error::Domain(format!("lock noise value {bad} outside [0, 1)")));
        }
        Ok(Self(u))
    }

    pub fn sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        Self((0..len).map(|_| rng.random::<f64>()).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `true` where the position is masked.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskIndicator(Vec<bool>);

impl MaskIndicator {
    pub fn new(m: Vec<bool>) -> Self {
        Self(m)
    }

    pub fn values(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    /// Elementwise `self <= other`.
    pub fn is_subset_of(&self, other: &MaskIndicator) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    pub fn of(seq: &TokenSequence) -> Self {
        Self((0..seq.len()).map(|i| seq.is_masked(i)).collect())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// `z[i] = mask if u[i] > gamma else x0[i]`.
pub fn mask_locked(x0: &TokenSequence, u: &LockNoise, gamma_t: f64) -> Result<(TokenSequence, MaskIndicator)> {
    if u.len() != x0.len() {
        return Err(Error::LengthMismatch { expected: x0.len(), actual: u.len() });
    }
    check_gamma(gamma_t)?;
    let mask_id = x0.mask_id();
    let m: Vec<bool> = u.values().iter().map(|&ui| ui > gamma_t).collect();
    let ids = x0
        .ids()
        .iter()
        .zip(&m)
        .map(|(&id, &masked)| if masked { mask_id } else { id })
        .collect();
    Ok((TokenSequence { ids, vocab: x0.vocab }, MaskIndicator(m)))
}

/// Student view at `t` and teacher view at `s < t`, both from the same `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub z_t: TokenSequence,
    pub z_s: TokenSequence,
    pub m_t: MaskIndicator,
    pub m_s: MaskIndicator,
}

pub fn coupled_pair(x0: &TokenSequence, u: &LockNoise, gamma_t: f64, gamma_s: f64) -> Result<CoupledPair> {
    check_gamma(gamma_s)?;
    if gamma_s < gamma_t {
        return Err(Error::Ordering { gamma_t, gamma_s });
    }
    let (z_t, m_t) = mask_locked(x0, u, gamma_t)?;
    let (z_s, m_s) = mask_locked(x0, u, gamma_s)?;
    debug_assert!(m_s.is_subset_of(&m_t));
    Ok(CoupledPair { z_t, z_s, m_t, m_s })
}

/// Independent corruption: each position masked with probability `1 - gamma`.
pub fn forward_sample<R: Rng + ?Sized>(x0: &TokenSequence, gamma_t: f64, rng: &mut R) -> Result<TokenSequence> {
    check_gamma(gamma_t)?;
    let mask_id = x0.mask_id();
    let ids = x0
        .ids()
        .iter()
        .map(|&id| if rng.random::<f64>() >= gamma_t { mask_id } else { id })
        .collect();
    Ok(TokenSequence { ids, vocab: x0.vocab })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const M: u32 = 9;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::clean(ids.to_vec(), 10).unwrap()
    }

    #[test]
    fn sequences_validate_ids() {
        assert!(matches!(TokenSequence::new(vec![1, 10], 10), Err(Error::TokenOutOfRange { id: 10, .. })));
        assert!(TokenSequence::clean(vec![1, 9], 10).is_err());
        assert!(TokenSequence::new(vec![1, 9], 10).is_ok());
        assert!(LockNoise::new(vec![0.2, 1.0]).is_err());
    }

    #[test]
    fn mask_locked_threshold_example() {
        let x0 = seq(&[3, 1, 4]);
        let u = LockNoise::new(vec![0.2, 0.9, 0.5]).unwrap();
        let (z, m) = mask_locked(&x0, &u, 0.5).unwrap();
        assert_eq!(z.ids(), &[3, M, 4]);
        assert_eq!(m.values(), &[false, true, false]);
    }

    #[test]
    fn mask_locked_endpoints() {
        let x0 = seq(&[3, 1, 4, 0]);
        let u = LockNoise::new(vec![0.0, 0.999_999, 0.5, 0.25]).unwrap();
        let (z, m) = mask_locked(&x0, &u, 1.0).unwrap();
        assert_eq!(z, x0);
        assert_eq!(m.count(), 0);
        let (z, _) = mask_locked(&x0, &LockNoise::new(vec![1e-12, 0.9, 0.5, 0.25]).unwrap(), 0.0).unwrap();
        assert_eq!(z.mask_count(), 4);
    }

    #[test]
    fn mask_locked_rejects_bad_inputs() {
        let x0 = seq(&[3, 1]);
        let u = LockNoise::new(vec![0.1]).unwrap();
        assert!(matches!(mask_locked(&x0, &u, 0.5), Err(Error::LengthMismatch { .. })));
        let u = LockNoise::new(vec![0.1, 0.2]).unwrap();
        assert!(matches!(mask_locked(&x0, &u, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn coupled_pair_example() {
        let x0 = seq(&[3, 1, 4]);
        let u = LockNoise::new(vec![0.2, 0.9, 0.5]).unwrap();
        let p = coupled_pair(&x0, &u, 0.4, 0.6).unwrap();
        assert_eq!(p.m_t.values(), &[false, true, true]);
        assert_eq!(p.m_s.values(), &[false, true, false]);
        assert_eq!(p.z_s.ids(), &[3, M, 4]);
        let same = coupled_pair(&x0, &u, 0.4, 0.4).unwrap();
        assert_eq!(same.z_t, same.z_s);
        assert!(matches!(coupled_pair(&x0, &u, 0.6, 0.4), Err(Error::Ordering { .. })));
    }

    #[test]
    fn forward_sample_endpoints() {
        let x0 = seq(&[3, 1, 4, 1, 5]);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(forward_sample(&x0, 1.0, &mut r).unwrap(), x0);
        assert_eq!(forward_sample(&x0, 0.0, &mut r).unwrap().mask_count(), 5);
    }

    proptest! {
        #[test]
        fn nesting_and_visible_tokens(
            ids in prop::collection::vec(0u32..9, 1..40),
            seed in any::<u64>(),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let (gt, gs) = if a <= b { (a, b) } else { (b, a) };
            let x0 = seq(&ids);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let u = LockNoise::sample(ids.len(), &mut r);
            let p = coupled_pair(&x0, &u, gt, gs).unwrap();
            prop_assert!(p.m_s.is_subset_of(&p.m_t));
            for (view, m) in [(&p.z_t, &p.m_t), (&p.z_s, &p.m_s)] {
                prop_assert_eq!(&MaskIndicator::of(view), m);
                for i in 0..ids.len() {
                    if !m.values()[i] {
                        prop_assert_eq!(view.ids()[i], ids[i]);
                    }
                }
            }
            // pure function
            prop_assert_eq!(mask_locked(&x0, &u, gt).unwrap(), mask_locked(&x0, &u, gt).unwrap());
        }

        #[test]
        fn increasing_noise_never_unmasks(
            ids in prop::collection::vec(0u32..9, 1..30),
            seed in any::<u64>(),
            mut gammas in prop::collection::vec(0.0f64..=1.0, 2..8),
        ) {
            gammas.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let x0 = seq(&ids);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let u = LockNoise::sample(ids.len(), &mut r);
            let mut prev = MaskIndicator::new(vec![false; ids.len()]);
            for g in gammas {
                let (_, m) = mask_locked(&x0, &u, g).unwrap();
                prop_assert!(prev.is_subset_of(&m));
                prev = m;
            }
        }
    }
}
