//! Per-token and per-sequence detection statistics.
//!
//! All per-sequence values are per-token means in natural-log units; the raw
//! sums `log P(w)` and `log ε_τ(w)` are exposed separately for the posterior
//! computations.

use std::ops::Range;

use serde::Serialize;

use crate::decode::{check_tau, check_top_p};
use crate::dist::{CondDist, TokenId};
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, log_sum_exp_scaled, Scalar};

/// Scoring temperature, top-k size and nucleus threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams<F: Scalar> {
    pub tau: F,
    pub k: usize,
    pub p: F,
}

impl<F: Scalar> ScoreParams<F> {
    pub fn new(tau: F, k: usize, p: F) -> Result<Self> {
        check_tau(tau.as_f64())?;
        check_top_p(p.as_f64())?;
        if k == 0 {
            return Err(Error::param("k must be >= 1"));
        }
        Ok(Self { tau, k, p })
    }
}

impl<F: Scalar> Default for ScoreParams<F> {
    fn default() -> Self {
        Self { tau: F::lit(0.8), k: 50, p: F::lit(0.9) }
    }
}

/// Everything measured at one position of a scored sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenScore<F: Scalar> {
    pub token: TokenId,
    /// `log p(w_i | w_<i)`.
    pub logprob: F,
    /// 1-based rank under (descending probability, ascending id).
    pub rank: usize,
    pub rank_exact: bool,
    /// `-Σ p log p` in nats.
    pub entropy: F,
    /// `log Σ_v p(v | w_<i)^(1/τ)`.
    pub log_tempnorm_step: F,
    pub topk_mass: F,
    pub topp_mass: F,
    pub nucleus_size: usize,
    /// `Σ p log p`.
    pub mu_tilde_step: F,
    /// `Σ p (log p)^2 − (Σ p log p)^2`.
    pub var_step: F,
    pub tau: F,
    pub k: usize,
    pub p: F,
    /// Probability mass the provider did not report; zero for full rows.
    pub residual_mass: F,
    /// `false` when the observed token had zero probability.
    pub valid: bool,
}

impl<F: Scalar> TokenScore<F> {
    pub fn in_top_k(&self, k: usize) -> bool {
        self.rank <= k
    }

    pub fn in_nucleus(&self) -> bool {
        self.rank <= self.nucleus_size
    }

    pub fn is_exact(&self) -> bool {
        self.residual_mass == F::zero() && self.rank_exact
    }
}

/// Scores `token` as drawn from `row`.
///
/// The TempNorm step is `LSE(l/τ) − LSE(l)/τ`, which is exactly zero at
/// `τ = 1` and tolerates rows that are normalized only up to rounding.
pub fn score_token<F: Scalar>(row: &CondDist<F>, token: TokenId, params: &ScoreParams<F>) -> TokenScore<F> {
    let lp = row.log_probs();
    let inv_tau = params.tau.recip();
    let log_tempnorm_step = log_sum_exp_scaled(lp, inv_tau) - log_sum_exp(lp) * inv_tau;
    let (m1, m2) = row.log_moments();
    let var = (m2 - m1 * m1).max(F::zero());
    let logprob = row.log_prob(token);
    let nucleus_size = row.nucleus_size(params.p);
    let ranking = row.ranking();
    let topp: Vec<F> = ranking[..nucleus_size].iter().map(|&t| row.log_prob(t)).collect();
    TokenScore {
        token,
        logprob,
        rank: row.rank_of(token),
        rank_exact: true,
        entropy: -m1,
        log_tempnorm_step,
        topk_mass: row.log_top_k_mass(params.k).exp(),
        topp_mass: log_sum_exp(&topp).exp(),
        nucleus_size,
        mu_tilde_step: m1,
        var_step: var,
        tau: params.tau,
        k: params.k,
        p: params.p,
        residual_mass: F::zero(),
        valid: logprob > F::neg_infinity(),
    }
}

/// Scores a sequence given the per-position conditionals that produced it.
pub fn score_tokens<F: Scalar>(
    rows: &[CondDist<F>],
    tokens: &[TokenId],
    params: &ScoreParams<F>,
) -> Result<Vec<TokenScore<F>>> {
    if rows.len() != tokens.len() {
        return Err(Error::param(format!(
            "{} rows for {} tokens",
            rows.len(),
            tokens.len()
        )));
    }
    rows.iter()
        .zip(tokens)
        .map(|(row, &t)| {
            if t as usize >= row.len() {
                return Err(Error::OutOfVocabulary { token: t, vocab_size: row.len() });
            }
            Ok(score_token(row, t, params))
        })
        .collect()
}

fn unscorable(reason: impl Into<String>) -> Error {
    Error::Unscorable { id: String::new(), reason: reason.into() }
}

fn check_scorable<F: Scalar>(scores: &[TokenScore<F>]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty("token scores"));
    }
    if let Some(i) = scores.iter().position(|s| !s.valid) {
        return Err(unscorable(format!("token at position {i} has zero probability")));
    }
    Ok(())
}

fn mean<F: Scalar>(scores: &[TokenScore<F>], f: impl Fn(&TokenScore<F>) -> F) -> Result<F> {
    check_scorable(scores)?;
    let sum: F = scores.iter().map(f).sum();
    Ok(sum / F::from_count(scores.len()))
}

fn check_tau_matches<F: Scalar>(scores: &[TokenScore<F>], tau: F) -> Result<()> {
    if scores.iter().any(|s| s.tau != tau) {
        return Err(Error::param(format!("scores were computed at a different tau than {tau}")));
    }
    Ok(())
}

pub fn per_token_loglikelihood<F: Scalar>(scores: &[TokenScore<F>]) -> Result<F> {
    mean(scores, |s| s.logprob)
}

pub fn per_token_logrank<F: Scalar>(scores: &[TokenScore<F>]) -> Result<F> {
    mean(scores, |s| F::from_count(s.rank).ln())
}

pub fn per_token_entropy<F: Scalar>(scores: &[TokenScore<F>]) -> Result<F> {
    mean(scores, |s| s.entropy)
}

/// `(1/T) Σ_i log Σ_v p(v | w_<i)^(1/τ)`.
pub fn log_tempnorm<F: Scalar>(scores: &[TokenScore<F>], tau: F) -> Result<F> {
    check_tau_matches(scores, tau)?;
    mean(scores, |s| s.log_tempnorm_step)
}

/// `(1/T)(log ε_τ − (1/τ − 1) log P)`. Negative values point to temperature
/// sampling.
///
/// Evaluated from the raw sums so that its sign agrees exactly with the
/// log-odds used by [`crate::bayes::posterior_temperature`].
pub fn temptest<F: Scalar>(scores: &[TokenScore<F>], tau: F) -> Result<F> {
    check_tau_matches(scores, tau)?;
    let log_eps = raw_log_tempnorm(scores)?;
    let log_p = raw_log_likelihood(scores)?;
    Ok(temptest_log_odds(log_p, log_eps, tau) / F::from_count(scores.len()))
}

/// `log ε_τ − (1/τ − 1) log P`, the un-normalized TempTest numerator.
pub fn temptest_log_odds<F: Scalar>(raw_log_p: F, raw_log_eps: F, tau: F) -> F {
    raw_log_eps - (tau.recip() - F::one()) * raw_log_p
}

/// Analytic Fast-DetectGPT: `(loglik − μ̃) / σ̃`, with
/// `σ̃ = sqrt((1/T²) Σ_i Var_p[log p])`.
pub fn fastdetect_analytic<F: Scalar>(scores: &[TokenScore<F>]) -> Result<F> {
    let ll = per_token_loglikelihood(scores)?;
    let mu = mean(scores, |s| s.mu_tilde_step)?;
    let var = mean(scores, |s| s.var_step)?;
    let sigma = (var / F::from_count(scores.len())).sqrt();
    if !(sigma > F::zero()) {
        return Err(unscorable("every conditional is degenerate, sigma is zero"));
    }
    Ok((ll - mu) / sigma)
}

fn geo_mean<F: Scalar>(scores: &[TokenScore<F>], span: Range<usize>, f: impl Fn(&TokenScore<F>) -> F) -> Result<F> {
    if span.start >= span.end {
        return Err(Error::Empty("span"));
    }
    if span.end > scores.len() {
        return Err(Error::param(format!("span {span:?} exceeds {} scores", scores.len())));
    }
    let part = &scores[span];
    let sum: F = part.iter().map(|s| f(s).ln()).sum();
    Ok((sum / F::from_count(part.len())).exp())
}

/// Geometric mean of top-k set mass over `span`.
pub fn geo_mean_topk_mass<F: Scalar>(scores: &[TokenScore<F>], span: Range<usize>) -> Result<F> {
    geo_mean(scores, span, |s| s.topk_mass)
}

/// Geometric mean of nucleus mass over `span`.
pub fn geo_mean_topp_mass<F: Scalar>(scores: &[TokenScore<F>], span: Range<usize>) -> Result<F> {
    geo_mean(scores, span, |s| s.topp_mass)
}

/// `log P(w) = Σ log p(w_i | w_<i)`.
pub fn raw_log_likelihood<F: Scalar>(scores: &[TokenScore<F>]) -> Result<F> {
    check_scorable(scores)?;
    Ok(scores.iter().map(|s| s.logprob).sum())
}

/// `log ε_τ(w)`.
pub fn raw_log_tempnorm<F: Scalar>(scores: &[TokenScore<F>]) -> Result<F> {
    check_scorable(scores)?;
    Ok(scores.iter().map(|s| s.log_tempnorm_step).sum())
}

/// `log ε_k(w)`, the log product of top-k masses.
pub fn raw_log_topk_mass<F: Scalar>(scores: &[TokenScore<F>]) -> Result<F> {
    check_scorable(scores)?;
    Ok(scores.iter().map(|s| s.topk_mass.ln()).sum())
}

/// Aggregate statistics for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceScore<F: Scalar> {
    pub id: String,
    pub len: usize,
    pub per_token_loglik: F,
    pub per_token_logrank: F,
    pub per_token_entropy: F,
    pub log_tempnorm: F,
    pub temptest: F,
    /// `None` when every conditional is degenerate.
    pub fastdetect_analytic: Option<F>,
    pub tau_used: F,
    pub k_used: usize,
    pub p_used: F,
    pub geo_mean_topk_mass: F,
    pub geo_mean_topp_mass: F,
    pub raw_log_likelihood: F,
    pub raw_log_tempnorm: F,
    /// `false` if any token came from a truncated provider row.
    pub exact: bool,
    pub rank_exact: bool,
}

impl<F: Scalar> SequenceScore<F> {
    pub fn from_token_scores(id: impl Into<String>, scores: &[TokenScore<F>]) -> Result<Self> {
        let id = id.into();
        let tag = |e: Error| match e {
            Error::Unscorable { reason, .. } => Error::Unscorable { id: id.clone(), reason },
            other => other,
        };
        check_scorable(scores).map_err(tag)?;
        let first = &scores[0];
        let (tau, k, p) = (first.tau, first.k, first.p);
        if scores.iter().any(|s| s.k != k || s.p != p) {
            return Err(Error::param("token scores disagree on k or p"));
        }
        let fastdetect = match fastdetect_analytic(scores) {
            Ok(v) => Some(v),
            Err(Error::Unscorable { .. }) => None,
            Err(e) => return Err(e),
        };
        let all = 0..scores.len();
        Ok(Self {
            len: scores.len(),
            per_token_loglik: per_token_loglikelihood(scores)?,
            per_token_logrank: per_token_logrank(scores)?,
            per_token_entropy: per_token_entropy(scores)?,
            log_tempnorm: log_tempnorm(scores, tau)?,
            temptest: temptest(scores, tau)?,
            fastdetect_analytic: fastdetect,
            tau_used: tau,
            k_used: k,
            p_used: p,
            geo_mean_topk_mass: geo_mean_topk_mass(scores, all.clone())?,
            geo_mean_topp_mass: geo_mean_topp_mass(scores, all)?,
            raw_log_likelihood: raw_log_likelihood(scores)?,
            raw_log_tempnorm: raw_log_tempnorm(scores)?,
            exact: scores.iter().all(|s| s.residual_mass == F::zero()),
            rank_exact: scores.iter().all(|s| s.rank_exact),
            id,
        })
    }
}
