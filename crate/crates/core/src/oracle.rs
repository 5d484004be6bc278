//! Self-check suite: compares the closed-form statistics and posteriors
//! against exhaustive enumeration on small random models.
//!
//! Every check reports `lhs` (the quantity under test), `rhs` (the
//! reference), their absolute difference and a pass flag.

use serde::{Deserialize, Serialize};

use crate::bayes::{kl_pure_vs_temp, posterior_temperature, posterior_topk};
use crate::decode::{enumerate_seq_dist, DecodingStrategy};
use crate::error::Result;
use crate::lm::ToyLm;
use crate::stats::{raw_log_likelihood, raw_log_tempnorm, score_tokens, temptest, ScoreParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub taus: Vec<f64>,
    pub vocab_sizes: Vec<usize>,
    pub orders: Vec<usize>,
    pub lengths: Vec<usize>,
    pub models_per_shape: u64,
    pub sharpness: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.5, 0.8],
            vocab_sizes: vec![2, 3, 4],
            orders: vec![0, 1, 2],
            lengths: vec![1, 3, 5],
            models_per_shape: 2,
            sharpness: 1.5,
            k: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        let abs_err = (lhs - rhs).abs();
        Self { name: name.into(), lhs, rhs, abs_err, pass: abs_err <= tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub config: OracleConfig,
    pub checks: Vec<Check>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Scalar spot values on the context-free two-token model `(0.8, 0.2)`
/// at `τ = 0.5`, checked against hand-derived closed forms.
fn spot_checks(out: &mut Vec<Check>) -> Result<()> {
    let lm = ToyLm::<f64>::context_free(&[0.8, 0.2])?;
    // Q = (0.64, 0.04) / 0.68.
    let (q0, q1): (f64, f64) = (0.64 / 0.68, 0.04 / 0.68);
    let (kl_pq, kl_qp) = kl_pure_vs_temp(&lm, 0.5, 1)?;
    let want_pq = 0.8 * (0.8 / q0).ln() + 0.2 * (0.2 / q1).ln();
    let want_qp = q0 * (q0 / 0.8).ln() + q1 * (q1 / 0.2).ln();
    out.push(Check::new("spot: KL(P||Q) two-point", kl_pq, want_pq, 1e-12));
    out.push(Check::new("spot: KL(Q||P) two-point", kl_qp, want_qp, 1e-12));
    let params = ScoreParams::new(0.5, 2, 1.0)?;
    for (t, q, p) in [(0u32, q0, 0.8), (1, q1, 0.2)] {
        let s = score_tokens(&lm.rows_for(&[], &[t])?, &[t], &params)?;
        let post = posterior_temperature(raw_log_likelihood(&s)?, raw_log_tempnorm(&s)?, 0.5, 0.5)?;
        out.push(Check::new(format!("spot: posterior of [{t}]"), post.posterior_temp, q / (p + q), 1e-12));
    }
    Ok(())
}

/// Runs every check.
pub fn run_oracle_suite(config: &OracleConfig) -> Result<OracleReport> {
    let mut checks = Vec::new();
    spot_checks(&mut checks)?;
    let mut model_seed = config.seed;
    for &n in &config.vocab_sizes {
        for &order in &config.orders {
            for _ in 0..config.models_per_shape {
                model_seed += 1;
                let lm = ToyLm::<f64>::random(n, order, config.sharpness, model_seed)?;
                let tag = format!("N={n} order={order} seed={model_seed}");
                for &len in &config.lengths {
                    for &tau in &config.taus {
                        model_checks(&lm, tau, len, &format!("{tag} T={len} tau={tau}"), &mut checks)?;
                    }
                    if config.k <= n {
                        topk_checks(&lm, config.k, len, &format!("{tag} T={len} k={}", config.k), &mut checks)?;
                    }
                }
            }
        }
    }
    Ok(OracleReport { config: config.clone(), checks })
}

fn model_checks(lm: &ToyLm<f64>, tau: f64, len: usize, tag: &str, out: &mut Vec<Check>) -> Result<()> {
    let pure = enumerate_seq_dist(lm, &DecodingStrategy::Pure, len)?;
    let temp = enumerate_seq_dist(lm, &DecodingStrategy::Temperature { tau }, len)?;
    let params = ScoreParams::new(tau, 2, 1.0)?;
    let (mut ratio_err, mut post_err, mut sign_mismatch) = (0f64, 0f64, 0u32);
    let (mut e_p, mut e_q, mut bayes, mut thresh) = (0f64, 0f64, 0f64, 0f64);
    for (w, lp) in pure.entries() {
        let s = score_tokens(&lm.rows_for(&[], w)?, w, &params)?;
        let tt = temptest(&s, tau)?;
        let lq = temp.log_prob(w);
        ratio_err = ratio_err.max((tt - (lp - lq) / len as f64).abs());
        let (p, q) = (lp.exp(), lq.exp());
        e_p += p * tt;
        e_q += q * tt;
        bayes += 0.5 * p.max(q);
        thresh += 0.5 * if tt < 0.0 { q } else { p };
        if tau < 1.0 {
            let post = posterior_temperature(raw_log_likelihood(&s)?, raw_log_tempnorm(&s)?, tau, 0.5)?;
            post_err = post_err.max((post.posterior_temp - q / (p + q)).abs());
            if post.is_temperature() != (tt < 0.0) {
                sign_mismatch += 1;
            }
        }
    }
    let (kl_pq, kl_qp) = kl_pure_vs_temp(lm, tau, len)?;
    out.push(Check::new(format!("{tag}: pure total mass"), pure.total(), 1.0, 1e-9));
    out.push(Check::new(format!("{tag}: temptest log-ratio max error"), ratio_err, 0.0, 1e-9));
    out.push(Check::new(format!("{tag}: posterior vs enumeration max error"), post_err, 0.0, 1e-12));
    out.push(Check::new(format!("{tag}: sign-equivalence mismatches"), sign_mismatch as f64, 0.0, 0.0));
    out.push(Check::new(format!("{tag}: E_P[temptest] = KL(P||Q)/T"), e_p, kl_pq / len as f64, 1e-9));
    out.push(Check::new(format!("{tag}: E_Q[temptest] = -KL(Q||P)/T"), e_q, -kl_qp / len as f64, 1e-9));
    out.push(Check::new(format!("{tag}: threshold-0 accuracy = Bayes accuracy"), thresh, bayes, 1e-9));
    Ok(())
}

fn topk_checks(lm: &ToyLm<f64>, k: usize, len: usize, tag: &str, out: &mut Vec<Check>) -> Result<()> {
    let pure = enumerate_seq_dist(lm, &DecodingStrategy::Pure, len)?;
    let topk = enumerate_seq_dist(lm, &DecodingStrategy::TopK { k }, len)?;
    // Rejection branch P(w)/C over sequences the top-k sampler can emit.
    let c: f64 = topk.entries().iter().map(|(w, _)| pure.prob(w)).sum();
    let mut err = 0f64;
    for (w, lq) in topk.entries() {
        let (q, r) = (lq.exp(), pure.prob(w) / c);
        let post = posterior_topk(lm, w, k)?;
        err = err.max((post.posterior - q / (q + r)).abs());
    }
    out.push(Check::new(format!("{tag}: top-k posterior vs two-branch max error"), err, 0.0, 1e-9));
    Ok(())
}
