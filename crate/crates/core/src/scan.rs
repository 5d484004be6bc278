//! Scanning long documents for runs of tokens inside the top-k set (or the
//! nucleus) and scoring each run by the geometric mean of its set masses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::{geo_mean_topk_mass, geo_mean_topp_mass, TokenScore};

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_MIN_RUN: usize = 30;

/// Inclusive token-index range of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub start: usize,
    pub end: usize,
}

impl Run {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Suspicious,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuspiciousSpan<F: Scalar> {
    pub start: usize,
    pub end: usize,
    #[serde(skip)]
    pub length: usize,
    pub geo_mass: F,
    pub verdict: Verdict,
}

/// Which truncation set a token must lie in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    TopK(usize),
    /// The nucleus recorded on each token score.
    Nucleus,
}

impl Membership {
    fn contains<F: Scalar>(&self, s: &TokenScore<F>) -> bool {
        match *self {
            Membership::TopK(k) => s.in_top_k(k),
            Membership::Nucleus => s.in_nucleus(),
        }
    }
}

/// Maximal runs of consecutive member tokens of length `>= min_run`, in
/// order of start position.
pub fn find_runs<F: Scalar>(scores: &[TokenScore<F>], membership: Membership, min_run: usize) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, s) in scores.iter().enumerate() {
        match (membership.contains(s), start) {
            (true, None) => start = Some(i),
            (false, Some(st)) => {
                if i - st >= min_run.max(1) {
                    runs.push(Run { start: st, end: i - 1 });
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(st) = start {
        if scores.len() - st >= min_run.max(1) {
            runs.push(Run { start: st, end: scores.len() - 1 });
        }
    }
    runs
}

pub fn find_topk_runs<F: Scalar>(scores: &[TokenScore<F>], k: usize, min_run: usize) -> Vec<Run> {
    find_runs(scores, Membership::TopK(k), min_run)
}

pub fn find_nucleus_runs<F: Scalar>(scores: &[TokenScore<F>], min_run: usize) -> Vec<Run> {
    find_runs(scores, Membership::Nucleus, min_run)
}

fn check_threshold<F: Scalar>(c: F) -> Result<()> {
    if c > F::zero() && c < F::one() {
        Ok(())
    } else {
        Err(Error::param(format!("threshold C must be in (0, 1), got {c}")))
    }
}

fn verdict<F: Scalar>(geo_mass: F, c: F) -> Verdict {
    if geo_mass < c {
        Verdict::Suspicious
    } else {
        Verdict::Clean
    }
}

/// Geometric-mean top-k mass of `run`; suspicious iff below `threshold_c`.
/// The scores must have been computed with the same `k`.
pub fn classify_span<F: Scalar>(run: Run, scores: &[TokenScore<F>], k: usize, threshold_c: F) -> Result<SuspiciousSpan<F>> {
    check_threshold(threshold_c)?;
    if scores.get(run.start).is_some_and(|s| s.k != k) {
        return Err(Error::param(format!(
            "scores carry top-{} masses, asked for top-{k}",
            scores[run.start].k
        )));
    }
    let geo_mass = geo_mean_topk_mass(scores, run.start..run.end + 1)?;
    Ok(SuspiciousSpan {
        start: run.start,
        end: run.end,
        length: run.len(),
        geo_mass,
        verdict: verdict(geo_mass, threshold_c),
    })
}

pub fn classify_nucleus_span<F: Scalar>(run: Run, scores: &[TokenScore<F>], threshold_c: F) -> Result<SuspiciousSpan<F>> {
    check_threshold(threshold_c)?;
    let geo_mass = geo_mean_topp_mass(scores, run.start..run.end + 1)?;
    Ok(SuspiciousSpan {
        start: run.start,
        end: run.end,
        length: run.len(),
        geo_mass,
        verdict: verdict(geo_mass, threshold_c),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocumentScan<F: Scalar> {
    pub id: String,
    pub spans: Vec<SuspiciousSpan<F>>,
    pub flagged: bool,
}

pub fn scan_document<F: Scalar>(
    id: impl Into<String>,
    scores: &[TokenScore<F>],
    k: usize,
    min_run: usize,
    threshold_c: F,
) -> Result<DocumentScan<F>> {
    let spans = find_topk_runs(scores, k, min_run)
        .into_iter()
        .map(|r| classify_span(r, scores, k, threshold_c))
        .collect::<Result<Vec<_>>>()?;
    let flagged = spans.iter().any(|s| s.verdict == Verdict::Suspicious);
    Ok(DocumentScan { id: id.into(), spans, flagged })
}

pub fn scan_document_nucleus<F: Scalar>(
    id: impl Into<String>,
    scores: &[TokenScore<F>],
    min_run: usize,
    threshold_c: F,
) -> Result<DocumentScan<F>> {
    let spans = find_nucleus_runs(scores, min_run)
        .into_iter()
        .map(|r| classify_nucleus_span(r, scores, threshold_c))
        .collect::<Result<Vec<_>>>()?;
    let flagged = spans.iter().any(|s| s.verdict == Verdict::Suspicious);
    Ok(DocumentScan { id: id.into(), spans, flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::CondDist;
    use crate::stats::{score_token, ScoreParams};

    /// Scores whose ranks follow `ranks` over a uniform-ish 100-token row.
    fn with_ranks(ranks: &[usize], k: usize) -> Vec<TokenScore<f64>> {
        let row = CondDist::<f64>::uniform(100).unwrap();
        let p = ScoreParams::new(0.8, k, 0.5).unwrap();
        ranks.iter().map(|&r| score_token(&row, (r - 1) as u32, &p)).collect()
    }

    #[test]
    fn all_rank_one_is_one_span() {
        let s = with_ranks(&[1; 50], 50);
        assert_eq!(find_topk_runs(&s, 50, 30), vec![Run { start: 0, end: 49 }]);
    }

    #[test]
    fn alternating_has_no_span() {
        let ranks: Vec<usize> = (0..60).map(|i| if i % 2 == 0 { 1 } else { 51 }).collect();
        assert!(find_topk_runs(&with_ranks(&ranks, 50), 50, 30).is_empty());
    }

    #[test]
    fn hand_fixture() {
        let ranks: Vec<usize> = (0..61).map(|i| if (35..40).contains(&i) { 80 } else { 3 }).collect();
        let s = with_ranks(&ranks, 50);
        assert_eq!(find_topk_runs(&s, 50, 30), vec![Run { start: 0, end: 34 }]);
        assert_eq!(find_topk_runs(&s, 50, 21).len(), 2);
    }

    #[test]
    fn classify_by_threshold() {
        let row = CondDist::<f64>::from_probs(&[0.35, 0.35, 0.3]).unwrap();
        let p = ScoreParams::new(0.8, 2, 0.5).unwrap();
        let s = vec![score_token(&row, 0, &p); 4];
        let run = Run { start: 0, end: 3 };
        let sp = classify_span(run, &s, 2, 0.8).unwrap();
        assert!((sp.geo_mass - 0.7).abs() < 1e-12);
        assert_eq!(sp.verdict, Verdict::Suspicious);
        assert_eq!(classify_span(run, &s, 2, 0.6).unwrap().verdict, Verdict::Clean);
        assert!(classify_span(run, &s, 2, 1.0).is_err());
        assert!(classify_span(run, &s, 3, 0.5).is_err());
    }

    #[test]
    fn scan_composition() {
        let s = with_ranks(&[1; 50], 50);
        let doc = scan_document("d", &s, 50, 30, 0.9).unwrap();
        assert_eq!(doc.spans.len(), 1);
        // Top-50 of a uniform 100-row holds half the mass.
        assert!((doc.spans[0].geo_mass - 0.5).abs() < 1e-12);
        assert!(doc.flagged);
        let doc = scan_document("d", &s, 50, 30, 0.4).unwrap();
        assert!(!doc.flagged);
        let short = scan_document("d", &s[..10], 50, 30, 0.9).unwrap();
        assert!(short.spans.is_empty() && !short.flagged);
    }

    #[test]
    fn nucleus_runs() {
        // Nucleus at p = 0.5 over a uniform 100-row has 50 tokens.
        let ranks: Vec<usize> = (0..40).map(|i| if i == 20 { 70 } else { 10 }).collect();
        let s = with_ranks(&ranks, 50);
        let runs = find_nucleus_runs(&s, 15);
        assert_eq!(runs, vec![Run { start: 0, end: 19 }, Run { start: 21, end: 39 }]);
        let doc = scan_document_nucleus("d", &s, 15, 0.6).unwrap();
        assert!(doc.flagged);
        assert!((doc.spans[0].geo_mass - 0.5).abs() < 1e-12);
        assert!(find_nucleus_runs(&s, 25).is_empty());
    }
}
