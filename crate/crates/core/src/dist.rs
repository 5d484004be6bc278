//! Next-token conditional distributions, stored in natural-log domain.
//!
//! Every ordering over tokens (rank, top-k set, nucleus) uses the same rule:
//! descending probability, ties broken by ascending token id.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

pub type TokenId = u32;

/// A dense, zero-based vocabulary `0..size`. The id `size` is reserved as
/// the beginning-of-sequence pad and is never a predicted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::param(format!("vocabulary size must be >= 2, got {size}")));
        }
        if size >= TokenId::MAX as usize {
            return Err(Error::param("vocabulary too large for 32-bit token ids"));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos_id(&self) -> TokenId {
        self.size as TokenId
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::OutOfVocabulary { token, vocab_size: self.size })
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> {
        0..self.size as TokenId
    }
}

/// A probability distribution over the vocabulary, held as natural-log
/// probabilities. Zero mass is `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondDist<F: Scalar> {
    logp: Vec<F>,
}

impl<F: Scalar> CondDist<F> {
    /// Builds from log-probabilities, checking normalization.
    pub fn from_log_probs(logp: Vec<F>) -> Result<Self> {
        if logp.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 entries, got {}",
                logp.len()
            )));
        }
        if let Some(bad) = logp.iter().find(|x| x.is_nan() || **x > F::lit(F::NORM_TOL)) {
            return Err(Error::InvalidDistribution(format!("log-probability {bad} is not <= 0")));
        }
        let total = log_sum_exp(&logp);
        if !(total.abs().as_f64() <= F::NORM_TOL) {
            return Err(Error::InvalidDistribution(format!(
                "log-sum-exp is {total}, expected 0"
            )));
        }
        Ok(Self { logp })
    }

    /// Builds from linear probabilities, checking normalization.
    pub fn from_probs(probs: &[F]) -> Result<Self> {
        if let Some(bad) = probs.iter().find(|x| x.is_nan() || **x < F::zero()) {
            return Err(Error::InvalidDistribution(format!("probability {bad} is negative")));
        }
        let sum: F = probs.iter().copied().sum();
        if !((sum - F::one()).abs().as_f64() <= F::NORM_TOL) {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {sum}")));
        }
        Self::from_log_probs(probs.iter().map(|p| p.ln()).collect())
    }

    /// Softmax of raw logits.
    pub fn from_logits(logits: &[F]) -> Result<Self> {
        if logits.iter().any(|x| x.is_nan() || *x == F::infinity()) {
            return Err(Error::InvalidDistribution("logits contain NaN or +inf".into()));
        }
        let z = log_sum_exp(logits);
        if !z.is_finite() {
            return Err(Error::InvalidDistribution("all logits are -inf".into()));
        }
        Self::from_log_probs(logits.iter().map(|&l| l - z).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        let lp = -F::from_count(n).ln();
        Self::from_log_probs(vec![lp; n])
    }

    /// Wraps log-probabilities that are normalized by construction.
    pub(crate) fn from_log_probs_unchecked(logp: Vec<F>) -> Self {
        debug_assert!((log_sum_exp(&logp).abs().as_f64()) <= F::NORM_TOL.max(1e-6));
        Self { logp }
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn log_probs(&self) -> &[F] {
        &self.logp
    }

    pub fn log_prob(&self, token: TokenId) -> F {
        self.logp[token as usize]
    }

    pub fn prob(&self, token: TokenId) -> F {
        self.logp[token as usize].exp()
    }

    /// Linear-domain view.
    pub fn probs(&self) -> Vec<F> {
        self.logp.iter().map(|x| x.exp()).collect()
    }

    /// Number of tokens with nonzero mass.
    pub fn support(&self) -> usize {
        self.logp.iter().filter(|x| **x > F::neg_infinity()).count()
    }

    /// `true` when `a` precedes `b` in the canonical ordering.
    fn order(&self, a: usize, b: usize) -> Ordering {
        self.logp[b]
            .partial_cmp(&self.logp[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }

    /// Token ids in canonical order (most probable first).
    pub fn ranking(&self) -> Vec<TokenId> {
        let mut idx: Vec<usize> = (0..self.logp.len()).collect();
        idx.sort_by(|&a, &b| self.order(a, b));
        idx.into_iter().map(|i| i as TokenId).collect()
    }

    /// 1-based rank of `token` in the canonical order.
    pub fn rank_of(&self, token: TokenId) -> usize {
        let t = token as usize;
        1 + (0..self.logp.len())
            .filter(|&u| u != t && self.order(u, t) == Ordering::Less)
            .count()
    }

    /// Log of the total mass of the `k` most probable tokens. `k >= len`
    /// covers the whole vocabulary.
    pub fn log_top_k_mass(&self, k: usize) -> F {
        if k >= self.logp.len() {
            return log_sum_exp(&self.logp);
        }
        let ranking = self.ranking();
        let top: Vec<F> = ranking[..k].iter().map(|&t| self.logp[t as usize]).collect();
        log_sum_exp(&top)
    }

    /// Size of the nucleus: the shortest prefix of the canonical order whose
    /// cumulative mass reaches `p`.
    pub fn nucleus_size(&self, p: F) -> usize {
        let slack = F::epsilon() * F::from_count(4 * self.logp.len());
        let mut cum = F::zero();
        for (i, t) in self.ranking().into_iter().enumerate() {
            cum = cum + self.prob(t);
            if cum >= p - slack {
                return i + 1;
            }
        }
        self.logp.len()
    }

    /// Entropy in nats, `-Σ p log p`, with `0 log 0 = 0`.
    pub fn entropy(&self) -> F {
        -self.log_moments().0
    }

    /// `(Σ p log p, Σ p (log p)^2)`.
    pub fn log_moments(&self) -> (F, F) {
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for &lp in &self.logp {
            let p = lp.exp();
            if p > F::zero() {
                m1 = m1 + p * lp;
                m2 = m2 + p * lp * lp;
            }
        }
        (m1, m2)
    }

    /// Argmax under the canonical ordering.
    pub fn argmax(&self) -> TokenId {
        (0..self.logp.len())
            .min_by(|&a, &b| self.order(a, b))
            .expect("distribution is non-empty") as TokenId
    }
}
