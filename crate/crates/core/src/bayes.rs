//! Closed-form posteriors for the fair-coin detection games, exact KL
//! divergences, the top-k rejection constant and a Monte Carlo simulator.
//!
//! Temperature game: a coin picks pure sampling `P` or temperature sampling
//! `Q_τ`. Given `w`, the posterior of the temperature branch is
//! `1 / (P(w)^(1−1/τ) ε_τ(w) + 1)`.
//!
//! Top-k game: a coin picks rejection sampling `P/C` restricted to the
//! top-k set or top-k sampling `Q_k = P / ε_k`. The posterior of the top-k
//! branch is `1 / (1 + ε_k(w) / C)`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decode::{
    check_cap, enumerate_seq_dist_capped, sample_tokens, DecodingStrategy, DEFAULT_ENUM_CAP,
};
use crate::dist::TokenId;
use crate::error::{Error, Result};
use crate::lm::ToyLm;
use crate::scalar::{logistic_complement, Scalar};
use crate::stats::{raw_log_topk_mass, score_tokens, temptest_log_odds, ScoreParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PosteriorResult<F: Scalar> {
    /// `P(temperature | w)`.
    pub posterior_temp: F,
    pub raw_log_p: F,
    pub raw_log_eps: F,
    pub tau: F,
    pub prior_machine: F,
    /// Log-odds against the temperature branch; the posterior is
    /// `1 / (1 + exp(log_odds))`.
    pub log_odds: F,
    pub decision_threshold_c: F,
}

impl<F: Scalar> PosteriorResult<F> {
    /// `posterior > c`, decided in the log-odds domain so that rounding of
    /// the posterior itself cannot flip the outcome.
    pub fn exceeds(&self, c: F) -> bool {
        self.log_odds < (c.recip() - F::one()).ln()
    }

    pub fn is_temperature(&self) -> bool {
        self.exceeds(self.decision_threshold_c)
    }
}

fn check_open_unit<F: Scalar>(name: &str, x: F) -> Result<()> {
    if x > F::zero() && x < F::one() {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must be in (0, 1), got {x}")))
    }
}

/// Posterior that `w` came from temperature sampling, given raw
/// `log P(w)` and `log ε_τ(w)`.
pub fn posterior_temperature<F: Scalar>(
    raw_log_p: F,
    raw_log_eps: F,
    tau: F,
    prior_machine: F,
) -> Result<PosteriorResult<F>> {
    if tau == F::one() {
        return Err(Error::param(
            "tau = 1 makes both branches identical; the posterior equals the prior",
        ));
    }
    check_open_unit("tau", tau)?;
    check_open_unit("prior", prior_machine)?;
    let prior_log_odds = (prior_machine / (F::one() - prior_machine)).ln();
    let log_odds = temptest_log_odds(raw_log_p, raw_log_eps, tau) - prior_log_odds;
    Ok(PosteriorResult {
        posterior_temp: logistic_complement(log_odds),
        raw_log_p,
        raw_log_eps,
        tau,
        prior_machine,
        log_odds,
        decision_threshold_c: F::lit(0.5),
    })
}

/// Whether a TempTest score of a length-`len` sequence puts the fair-prior
/// posterior strictly above `c`: `temptest < log(1/c − 1) / len`.
pub fn threshold_equivalence<F: Scalar>(temptest: F, len: usize, c: F) -> Result<bool> {
    check_open_unit("C", c)?;
    if len == 0 {
        return Err(Error::Empty("sequence"));
    }
    Ok(temptest < (c.recip() - F::one()).ln() / F::from_count(len))
}

/// Exact `(KL(P‖Q_τ), KL(Q_τ‖P))` over length-`len` sequences.
pub fn kl_pure_vs_temp<F: Scalar>(model: &ToyLm<F>, tau: F, len: usize) -> Result<(F, F)> {
    kl_pure_vs_temp_capped(model, tau, len, DEFAULT_ENUM_CAP)
}

pub fn kl_pure_vs_temp_capped<F: Scalar>(model: &ToyLm<F>, tau: F, len: usize, cap: u128) -> Result<(F, F)> {
    let pure = enumerate_seq_dist_capped(model, &DecodingStrategy::Pure, len, cap)?;
    let temp = enumerate_seq_dist_capped(
        model,
        &DecodingStrategy::Temperature { tau: tau.as_f64() },
        len,
        cap,
    )?;
    Ok((kl(&pure, &temp), kl(&temp, &pure)))
}

fn kl<F: Scalar>(a: &crate::decode::ExactSeqDist<F>, b: &crate::decode::ExactSeqDist<F>) -> F {
    a.entries()
        .iter()
        .map(|(w, la)| la.exp() * (*la - b.log_prob(w)))
        .sum()
}

/// Pure-sampling mass of the length-`len` top-k set: sequences whose every
/// token lies in its step's top-k set.
pub fn rejection_constant_topk<F: Scalar>(model: &ToyLm<F>, k: usize, len: usize) -> Result<F> {
    rejection_constant_topk_capped(model, k, len, DEFAULT_ENUM_CAP)
}

pub fn rejection_constant_topk_capped<F: Scalar>(model: &ToyLm<F>, k: usize, len: usize, cap: u128) -> Result<F> {
    if k == 0 || k > model.vocab_size() {
        return Err(Error::param(format!("k must be in [1, {}], got {k}", model.vocab_size())));
    }
    if len == 0 {
        return Err(Error::param("length must be >= 1"));
    }
    check_cap(model.vocab_size(), len, cap)?;
    let mut prefix = Vec::with_capacity(len);
    Ok(in_set_mass(model, k, len, &mut prefix))
}

fn in_set_mass<F: Scalar>(model: &ToyLm<F>, k: usize, len: usize, prefix: &mut Vec<TokenId>) -> F {
    if prefix.len() == len {
        return F::one();
    }
    let row = model.row(&model.context_key(prefix)).clone();
    let mut total = F::zero();
    for &t in &row.ranking()[..k] {
        prefix.push(t);
        total = total + row.prob(t) * in_set_mass(model, k, len, prefix);
        prefix.pop();
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TopKPosterior<F: Scalar> {
    /// Product of the top-k set masses along the sequence.
    pub eps_k: F,
    /// Rejection constant.
    pub c: F,
    /// `P(top-k | w) = 1 / (1 + eps_k / c)`.
    pub posterior: F,
}

impl<F: Scalar> TopKPosterior<F> {
    pub fn new(eps_k: F, c: F) -> Result<Self> {
        if !(eps_k > F::zero() && eps_k <= F::one() + F::lit(F::NORM_TOL)) {
            return Err(Error::param(format!("eps_k must be in (0, 1], got {eps_k}")));
        }
        if !(c > F::zero()) {
            return Err(Error::param(format!("C must be > 0, got {c}")));
        }
        Ok(Self { eps_k, c, posterior: logistic_complement(eps_k.ln() - c.ln()) })
    }
}

/// Top-k posterior for a sequence known to lie in the top-k set.
pub fn posterior_topk<F: Scalar>(model: &ToyLm<F>, w: &[TokenId], k: usize) -> Result<TopKPosterior<F>> {
    if w.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let rows = model.rows_for(&[], w)?;
    let params = ScoreParams { tau: F::one(), k, p: F::one() };
    let scores = score_tokens(&rows, w, &params)?;
    if let Some(i) = scores.iter().position(|s| !s.in_top_k(k)) {
        return Err(Error::param(format!(
            "token {} at position {i} is outside its top-{k} set",
            w[i]
        )));
    }
    let eps_k = raw_log_topk_mass(&scores)?.exp();
    TopKPosterior::new(eps_k, rejection_constant_topk(model, k, w.len())?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CoinflipCell {
    pub total: u64,
    pub temperature: u64,
}

impl CoinflipCell {
    pub fn fraction(&self) -> f64 {
        self.temperature as f64 / self.total as f64
    }
}

/// Empirical posterior table from the fair-coin experiment.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CoinflipTable {
    pub n: u64,
    pub cells: BTreeMap<Vec<TokenId>, CoinflipCell>,
}

impl CoinflipTable {
    pub fn fraction(&self, w: &[TokenId]) -> Option<f64> {
        self.cells.get(w).map(CoinflipCell::fraction)
    }
}

/// Draws `n` sequences, each from pure or temperature sampling by a fair
/// coin. The coin and both branches use independent ChaCha streams of the
/// same seed.
pub fn simulate_coinflip<F: Scalar>(
    model: &ToyLm<F>,
    tau: F,
    len: usize,
    n: u64,
    seed: u64,
) -> Result<CoinflipTable> {
    if n == 0 {
        return Err(Error::param("n must be >= 1"));
    }
    if len == 0 {
        return Err(Error::param("length must be >= 1"));
    }
    let temp = DecodingStrategy::Temperature { tau: tau.as_f64() };
    temp.validate(model.vocab_size())?;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let (mut coin, mut pure_rng, mut temp_rng) = (stream(1), stream(2), stream(3));
    let mut table = CoinflipTable { n, cells: BTreeMap::new() };
    for _ in 0..n {
        let heads = rand::Rng::random_bool(&mut coin, 0.5);
        let w = if heads {
            sample_tokens(model, &DecodingStrategy::Pure, len, &[], &mut pure_rng)?
        } else {
            sample_tokens(model, &temp, len, &[], &mut temp_rng)?
        };
        let cell = table.cells.entry(w).or_default();
        cell.total += 1;
        if !heads {
            cell.temperature += 1;
        }
    }
    Ok(table)
}

/// Best accuracy of any single-threshold rule, in either direction, on
/// weighted points `(score, machine_mass, human_mass)`.
pub fn best_threshold_accuracy<F: Scalar>(points: &[(F, F, F)]) -> F {
    let mut pts: Vec<(F, F, F)> = points.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are not NaN"));
    // Group equal scores: a threshold can only fall between groups.
    let mut groups: Vec<(F, F)> = Vec::new();
    let mut last: Option<F> = None;
    for (s, m, h) in pts {
        match (last, groups.last_mut()) {
            (Some(l), Some(g)) if l == s => {
                g.0 = g.0 + m;
                g.1 = g.1 + h;
            }
            _ => groups.push((m, h)),
        }
        last = Some(s);
    }
    let total_m: F = groups.iter().map(|g| g.0).sum();
    let total_h: F = groups.iter().map(|g| g.1).sum();
    // Cut after `j` groups; "below is machine" scores machine mass below and
    // human mass above, and the reverse rule scores the complement.
    let mut best = F::zero();
    let (mut below_m, mut below_h) = (F::zero(), F::zero());
    for j in 0..=groups.len() {
        if j > 0 {
            below_m = below_m + groups[j - 1].0;
            below_h = below_h + groups[j - 1].1;
        }
        let low_is_machine = below_m + (total_h - below_h);
        let high_is_machine = below_h + (total_m - below_m);
        best = best.max(low_is_machine).max(high_is_machine);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> ToyLm<f64> {
        ToyLm::context_free(&[0.8, 0.2]).unwrap()
    }

    #[test]
    fn posterior_two_point() {
        let b = posterior_temperature(0.2f64.ln(), 0.68f64.ln(), 0.5, 0.5).unwrap();
        assert!((b.posterior_temp - 1.0 / 4.4).abs() < 1e-15);
        assert!((b.posterior_temp - 0.227273).abs() < 1e-6);
        assert!(!b.is_temperature());
        let a = posterior_temperature(0.8f64.ln(), 0.68f64.ln(), 0.5, 0.5).unwrap();
        assert!((a.posterior_temp - 1.0 / 1.85).abs() < 1e-15);
        assert!((a.posterior_temp - 0.540541).abs() < 1e-6);
        assert!(a.is_temperature());
    }

    #[test]
    fn posterior_uniform_is_half() {
        // Uniform N=4, T=3, tau=0.5: log eps = 3 (1 - 2) ln 4, log P = -3 ln 4.
        let lp = -3.0 * 4f64.ln();
        let le = 3.0 * (1.0 - 2.0) * 4f64.ln();
        let r = posterior_temperature(lp, le, 0.5, 0.5).unwrap();
        assert!((r.posterior_temp - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_rejects_tau_one_and_bad_prior() {
        assert!(posterior_temperature(-1.0, 0.0, 1.0, 0.5).is_err());
        assert!(posterior_temperature(-1.0, -0.1, 0.5, 0.0).is_err());
        assert!(posterior_temperature(-1.0, -0.1, 0.5, 1.0).is_err());
    }

    #[test]
    fn prior_scales_odds() {
        let r = posterior_temperature(0.2f64.ln(), 0.68f64.ln(), 0.5, 0.75).unwrap();
        // odds(temp) = 3 * Q/P = 3 * (0.04/0.68) / 0.2
        let odds = 3.0 * (0.04 / 0.68) / 0.2;
        assert!((r.posterior_temp - odds / (1.0 + odds)).abs() < 1e-14);
    }

    #[test]
    fn threshold_equivalence_cases() {
        assert!(threshold_equivalence(-0.162519, 1, 0.5).unwrap());
        assert!(!threshold_equivalence(1.223775, 1, 0.5).unwrap());
        assert!(!threshold_equivalence(0.0, 1, 0.5).unwrap());
        // C = 0.2: offset ln 4 / T.
        assert!(threshold_equivalence(0.5, 2, 0.2).unwrap());
        assert!(!threshold_equivalence(0.7, 2, 0.2).unwrap());
        assert!(threshold_equivalence(0.0, 1, 1.0).is_err());
    }

    #[test]
    fn general_c_matches_posterior() {
        let lm = ToyLm::<f64>::random(3, 1, 1.2, 8).unwrap();
        let w = [2, 0, 1, 1];
        let rows = lm.rows_for(&[], &w).unwrap();
        let p = ScoreParams::new(0.6, 2, 0.9).unwrap();
        let s = score_tokens(&rows, &w, &p).unwrap();
        let tt = crate::stats::temptest(&s, 0.6).unwrap();
        let post = posterior_temperature(
            crate::stats::raw_log_likelihood(&s).unwrap(),
            crate::stats::raw_log_tempnorm(&s).unwrap(),
            0.6,
            0.5,
        )
        .unwrap();
        for c in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let by_stat = threshold_equivalence(tt, 4, c).unwrap();
            assert_eq!(by_stat, post.posterior_temp > c, "C = {c}");
        }
    }

    #[test]
    fn kl_two_point() {
        let (pq, qp) = kl_pure_vs_temp(&two_point(), 0.5, 1).unwrap();
        let q: [f64; 2] = [0.64 / 0.68, 0.04 / 0.68];
        let p: [f64; 2] = [0.8, 0.2];
        let oracle_pq: f64 = (0..2).map(|i| p[i] * (p[i] / q[i]).ln()).sum();
        let oracle_qp: f64 = (0..2).map(|i| q[i] * (q[i] / p[i]).ln()).sum();
        assert!((pq - oracle_pq).abs() < 1e-14);
        assert!((qp - oracle_qp).abs() < 1e-14);
        assert!((pq - 0.114740).abs() < 1e-6);
        assert!((qp - 0.080972).abs() < 1e-6);
    }

    #[test]
    fn kl_degenerate_cases() {
        let (a, b) = kl_pure_vs_temp(&two_point(), 1.0, 2).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        let u = ToyLm::<f64>::context_free(&[0.25; 4]).unwrap();
        let (a, b) = kl_pure_vs_temp(&u, 0.4, 3).unwrap();
        assert!(a.abs() < 1e-14 && b.abs() < 1e-14);
    }

    #[test]
    fn rejection_constant_examples() {
        let lm = ToyLm::<f64>::context_free(&[0.5, 0.3, 0.2]).unwrap();
        assert!((rejection_constant_topk(&lm, 2, 1).unwrap() - 0.8).abs() < 1e-15);
        assert!((rejection_constant_topk(&lm, 3, 4).unwrap() - 1.0).abs() < 1e-14);
        assert!((rejection_constant_topk(&lm, 2, 2).unwrap() - 0.64).abs() < 1e-15);
        assert!(rejection_constant_topk(&lm, 0, 2).is_err());
        assert!(matches!(
            rejection_constant_topk_capped(&lm, 2, 3, 26),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn topk_posterior_context_free() {
        let lm = ToyLm::<f64>::context_free(&[0.5, 0.3, 0.2]).unwrap();
        let r = posterior_topk(&lm, &[0], 2).unwrap();
        assert!((r.eps_k - 0.8).abs() < 1e-15);
        assert!((r.c - 0.8).abs() < 1e-15);
        assert!((r.posterior - 0.5).abs() < 1e-15);
        let r = posterior_topk(&lm, &[1, 0, 1], 2).unwrap();
        assert!((r.posterior - 0.5).abs() < 1e-12);
        assert!(posterior_topk(&lm, &[2], 2).is_err());
    }

    #[test]
    fn topk_posterior_context_dependent() {
        // Order-1 model whose top-2 masses are 0.6 after token 0 and 0.98
        // after token 1. Oracle: two-branch conditioning by enumeration.
        let row = |p: &[f64]| crate::dist::CondDist::from_probs(p).unwrap();
        let lm = ToyLm::<f64>::from_rows(
            3,
            1,
            [
                (vec![3], row(&[0.5, 0.3, 0.2])),
                (vec![0], row(&[0.35, 0.25, 0.4])),
                (vec![1], row(&[0.49, 0.49, 0.02])),
                (vec![2], row(&[0.4, 0.3, 0.3])),
            ],
        )
        .unwrap();
        let len = 3;
        let topk = crate::decode::enumerate_seq_dist(&lm, &DecodingStrategy::TopK { k: 2 }, len).unwrap();
        let pure = crate::decode::enumerate_seq_dist(&lm, &DecodingStrategy::Pure, len).unwrap();
        let c: f64 = topk.entries().iter().map(|(w, _)| pure.prob(w)).sum();
        for (w, lq) in topk.entries() {
            let q = lq.exp();
            let p = pure.prob(w) / c;
            let oracle = q / (p + q);
            let r = posterior_topk(&lm, w, 2).unwrap();
            assert!((r.posterior - oracle).abs() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn coinflip_small_n_and_tau_one() {
        let t = simulate_coinflip(&two_point(), 0.5, 1, 1, 3).unwrap();
        assert_eq!(t.cells.len(), 1);
        let f = t.cells.values().next().unwrap().fraction();
        assert!(f == 0.0 || f == 1.0);

        let t = simulate_coinflip(&two_point(), 1.0, 2, 40_000, 5).unwrap();
        for (w, cell) in &t.cells {
            if cell.total > 2000 {
                let se = (0.25 / cell.total as f64).sqrt();
                assert!((cell.fraction() - 0.5).abs() < 4.0 * se, "{w:?} {cell:?}");
            }
        }
        assert!(simulate_coinflip(&two_point(), 0.5, 1, 0, 3).is_err());
    }

    #[test]
    fn coinflip_is_deterministic() {
        let a = simulate_coinflip(&two_point(), 0.5, 2, 500, 9).unwrap();
        let b = simulate_coinflip(&two_point(), 0.5, 2, 500, 9).unwrap();
        assert_eq!(a.cells, b.cells);
    }

    #[test]
    fn best_threshold_accuracy_brute_force() {
        let pts = [(0.1, 0.3, 0.0), (0.5, 0.0, 0.2), (0.5, 0.1, 0.1), (0.9, 0.1, 0.2)];
        // Brute force over every cut point and both directions.
        let mut cuts: Vec<f64> = vec![f64::NEG_INFINITY, f64::INFINITY];
        cuts.extend([0.3, 0.7]);
        let mut best: f64 = 0.0;
        for &t in &cuts {
            let low: f64 = pts.iter().map(|&(s, m, h)| if s < t { m } else { h }).sum();
            let high: f64 = pts.iter().map(|&(s, m, h)| if s > t { m } else { h }).sum();
            best = best.max(low).max(high);
        }
        assert!((best_threshold_accuracy(&pts) - best).abs() < 1e-15);
    }
}
