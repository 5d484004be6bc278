//! Decoding-strategy transforms, seeded samplers and the exhaustive
//! sequence enumerator.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Label, SequenceRecord};
use crate::dist::{CondDist, TokenId};
use crate::error::{Error, Result};
use crate::lm::ToyLm;
use crate::scalar::{log_sum_exp, log_sum_exp_scaled, Scalar};

/// Name of the pseudo-random generator recorded in output metadata.
pub const GENERATOR: &str = "chacha8/seed_from_u64/inverse-cdf";

/// Default bound on `N^T` for [`enumerate_seq_dist`].
pub const DEFAULT_ENUM_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodingStrategy {
    Pure,
    Temperature { tau: f64 },
    TopK { k: usize },
    TopP { p: f64 },
}

impl DecodingStrategy {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match *self {
            DecodingStrategy::Pure => Ok(()),
            DecodingStrategy::Temperature { tau } => check_tau(tau),
            DecodingStrategy::TopK { k } => {
                if k == 0 || k > vocab_size {
                    Err(Error::param(format!("k must be in [1, {vocab_size}], got {k}")))
                } else {
                    Ok(())
                }
            }
            DecodingStrategy::TopP { p } => check_top_p(p),
        }
    }

    /// Per-step transform of a conditional distribution.
    pub fn apply<F: Scalar>(&self, dist: &CondDist<F>) -> Result<CondDist<F>> {
        match *self {
            DecodingStrategy::Pure => Ok(dist.clone()),
            DecodingStrategy::Temperature { tau } => temper(dist, F::lit(tau)),
            DecodingStrategy::TopK { k } => truncate_topk(dist, k),
            DecodingStrategy::TopP { p } => truncate_topp(dist, F::lit(p)),
        }
    }

    /// Metadata recorded on generated sequences. Top-k is reported as
    /// disabled explicitly unless it is the active strategy.
    pub fn meta(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        m.insert("strategy".into(), Value::from(self.to_string()));
        match *self {
            DecodingStrategy::Pure => {}
            DecodingStrategy::Temperature { tau } => {
                m.insert("tau".into(), tau.into());
            }
            DecodingStrategy::TopK { k } => {
                m.insert("k".into(), k.into());
            }
            DecodingStrategy::TopP { p } => {
                m.insert("p".into(), p.into());
            }
        }
        if !matches!(self, DecodingStrategy::TopK { .. }) {
            m.insert("top_k".into(), Value::Null);
        }
        m
    }
}

impl fmt::Display for DecodingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodingStrategy::Pure => f.write_str("pure"),
            DecodingStrategy::Temperature { .. } => f.write_str("temperature"),
            DecodingStrategy::TopK { .. } => f.write_str("top_k"),
            DecodingStrategy::TopP { .. } => f.write_str("top_p"),
        }
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("tau must be in (0, 1], got {tau}")))
    }
}

pub(crate) fn check_top_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("p must be in (0, 1], got {p}")))
    }
}

/// Temperature transform: `q_v ∝ p_v^(1/τ)`, computed as
/// `log p_v / τ − LSE(log p / τ)`.
pub fn temper<F: Scalar>(dist: &CondDist<F>, tau: F) -> Result<CondDist<F>> {
    check_tau(tau.as_f64())?;
    if tau == F::one() {
        return Ok(dist.clone());
    }
    let inv = tau.recip();
    let z = log_sum_exp_scaled(dist.log_probs(), inv);
    Ok(CondDist::from_log_probs_unchecked(
        dist.log_probs().iter().map(|&lp| lp * inv - z).collect(),
    ))
}

fn restrict<F: Scalar>(dist: &CondDist<F>, keep: &[TokenId]) -> CondDist<F> {
    let kept: Vec<F> = keep.iter().map(|&t| dist.log_prob(t)).collect();
    let z = log_sum_exp(&kept);
    let mut out = vec![F::neg_infinity(); dist.len()];
    for (&t, &lp) in keep.iter().zip(&kept) {
        out[t as usize] = lp - z;
    }
    CondDist::from_log_probs_unchecked(out)
}

/// Top-k truncation with renormalization.
pub fn truncate_topk<F: Scalar>(dist: &CondDist<F>, k: usize) -> Result<CondDist<F>> {
    if k == 0 || k > dist.len() {
        return Err(Error::param(format!("k must be in [1, {}], got {k}", dist.len())));
    }
    if k == dist.len() {
        return Ok(dist.clone());
    }
    Ok(restrict(dist, &dist.ranking()[..k]))
}

/// Nucleus truncation: the shortest canonical prefix with mass `>= p`.
pub fn truncate_topp<F: Scalar>(dist: &CondDist<F>, p: F) -> Result<CondDist<F>> {
    check_top_p(p.as_f64())?;
    let size = dist.nucleus_size(p);
    if size == dist.len() {
        return Ok(dist.clone());
    }
    Ok(restrict(dist, &dist.ranking()[..size]))
}

/// Inverse-CDF draw in token-id order from one uniform variate.
pub fn draw<F: Scalar, R: Rng + ?Sized>(dist: &CondDist<F>, rng: &mut R) -> TokenId {
    let u = F::lit(rng.random::<f64>());
    let mut cum = F::zero();
    let mut last = 0;
    for (t, &lp) in dist.log_probs().iter().enumerate() {
        if lp == F::neg_infinity() {
            continue;
        }
        cum = cum + lp.exp();
        last = t;
        if u < cum {
            return t as TokenId;
        }
    }
    last as TokenId
}

/// Continues `prompt` by `length` tokens under `strategy`, drawing from `rng`.
pub fn sample_tokens<F: Scalar, R: Rng + ?Sized>(
    model: &ToyLm<F>,
    strategy: &DecodingStrategy,
    length: usize,
    prompt: &[TokenId],
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let mut ctx = prompt.to_vec();
    for _ in 0..length {
        let step = strategy.apply(model.cond_dist(&ctx)?)?;
        ctx.push(draw(&step, rng));
    }
    Ok(ctx.split_off(prompt.len()))
}

/// Seeded autoregressive sample. The record holds `prompt ++ continuation`
/// with `meta.prompt_len` marking the unscored prefix.
pub fn sample_sequence<F: Scalar>(
    model: &ToyLm<F>,
    strategy: &DecodingStrategy,
    length: usize,
    prompt: &[TokenId],
    seed: u64,
) -> Result<SequenceRecord> {
    if length == 0 {
        return Err(Error::param("length must be >= 1"));
    }
    strategy.validate(model.vocab_size())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cont = sample_tokens(model, strategy, length, prompt, &mut rng)?;
    let mut tokens = prompt.to_vec();
    tokens.extend(cont);
    let mut rec = SequenceRecord::new(format!("{strategy}-{seed}"), Label::Machine, tokens);
    rec.meta = strategy.meta();
    rec.meta.insert("seed".into(), seed.into());
    rec.meta.insert("generator".into(), GENERATOR.into());
    rec.meta.insert("prompt_len".into(), prompt.len().into());
    Ok(rec)
}

/// Exact distribution over all length-`T` continuations. Sequences of zero
/// probability are omitted. Entries are in lexicographic order.
#[derive(Debug, Clone)]
pub struct ExactSeqDist<F: Scalar> {
    length: usize,
    entries: Vec<(Vec<TokenId>, F)>,
}

impl<F: Scalar> ExactSeqDist<F> {
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(sequence, log-probability)` pairs.
    pub fn entries(&self) -> &[(Vec<TokenId>, F)] {
        &self.entries
    }

    pub fn log_prob(&self, seq: &[TokenId]) -> F {
        self.entries
            .binary_search_by(|(s, _)| s.as_slice().cmp(seq))
            .map_or(F::neg_infinity(), |i| self.entries[i].1)
    }

    pub fn prob(&self, seq: &[TokenId]) -> F {
        self.log_prob(seq).exp()
    }

    /// Total probability, summed in entry order.
    pub fn total(&self) -> F {
        self.entries.iter().map(|(_, lp)| lp.exp()).sum()
    }
}

pub(crate) fn check_cap(vocab_size: usize, length: usize, cap: u128) -> Result<()> {
    let required = (vocab_size as u128).checked_pow(length as u32).unwrap_or(u128::MAX);
    if required > cap {
        Err(Error::CapExceeded { required, cap })
    } else {
        Ok(())
    }
}

pub fn enumerate_seq_dist<F: Scalar>(
    model: &ToyLm<F>,
    strategy: &DecodingStrategy,
    length: usize,
) -> Result<ExactSeqDist<F>> {
    enumerate_seq_dist_capped(model, strategy, length, DEFAULT_ENUM_CAP)
}

pub fn enumerate_seq_dist_capped<F: Scalar>(
    model: &ToyLm<F>,
    strategy: &DecodingStrategy,
    length: usize,
    cap: u128,
) -> Result<ExactSeqDist<F>> {
    if length == 0 {
        return Err(Error::param("length must be >= 1"));
    }
    strategy.validate(model.vocab_size())?;
    check_cap(model.vocab_size(), length, cap)?;
    let mut entries = Vec::new();
    let mut prefix = Vec::with_capacity(length);
    recurse(model, strategy, length, &mut prefix, F::zero(), &mut entries)?;
    Ok(ExactSeqDist { length, entries })
}

fn recurse<F: Scalar>(
    model: &ToyLm<F>,
    strategy: &DecodingStrategy,
    length: usize,
    prefix: &mut Vec<TokenId>,
    acc: F,
    out: &mut Vec<(Vec<TokenId>, F)>,
) -> Result<()> {
    if prefix.len() == length {
        out.push((prefix.clone(), acc));
        return Ok(());
    }
    let step = strategy.apply(model.row(&model.context_key(prefix)))?;
    for (t, &lp) in step.log_probs().iter().enumerate() {
        if lp == F::neg_infinity() {
            continue;
        }
        prefix.push(t as TokenId);
        recurse(model, strategy, length, prefix, acc + lp, out)?;
        prefix.pop();
    }
    Ok(())
}
