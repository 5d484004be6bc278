//! AUROC, equal-error-rate calibration, confusion matrices and the
//! length-skew audit.
//!
//! Scores are oriented before ranking: with `LowerIsMachine` a smaller score
//! is more machine-like. Thresholding is strict: a score exactly at the
//! threshold is classified human.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::SequenceScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsMachine,
    LowerIsMachine,
}

impl Orientation {
    pub fn flip(self) -> Self {
        match self {
            Orientation::HigherIsMachine => Orientation::LowerIsMachine,
            Orientation::LowerIsMachine => Orientation::HigherIsMachine,
        }
    }

    /// Maps a score so that larger always means more machine-like.
    pub fn orient<F: Scalar>(self, x: F) -> F {
        match self {
            Orientation::HigherIsMachine => x,
            Orientation::LowerIsMachine => -x,
        }
    }

    pub fn is_machine<F: Scalar>(self, score: F, threshold: F) -> bool {
        match self {
            Orientation::HigherIsMachine => score > threshold,
            Orientation::LowerIsMachine => score < threshold,
        }
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher_is_machine" | "higher" => Ok(Orientation::HigherIsMachine),
            "lower_is_machine" | "lower" => Ok(Orientation::LowerIsMachine),
            _ => Err(Error::param(format!("unknown orientation `{s}`"))),
        }
    }
}

/// Per-sequence statistics that can be evaluated as detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Loglik,
    Logrank,
    Entropy,
    LogTempnorm,
    Temptest,
    Fastdetect,
    GeoTopk,
    GeoTopp,
}

impl Statistic {
    pub const ALL: [Statistic; 8] = [
        Statistic::Loglik,
        Statistic::Logrank,
        Statistic::Entropy,
        Statistic::LogTempnorm,
        Statistic::Temptest,
        Statistic::Fastdetect,
        Statistic::GeoTopk,
        Statistic::GeoTopp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Loglik => "loglik",
            Statistic::Logrank => "logrank",
            Statistic::Entropy => "entropy",
            Statistic::LogTempnorm => "log_tempnorm",
            Statistic::Temptest => "temptest",
            Statistic::Fastdetect => "fastdetect",
            Statistic::GeoTopk => "geo_topk",
            Statistic::GeoTopp => "geo_topp",
        }
    }

    /// Registry default; every entry can be overridden per run.
    pub fn default_orientation(self) -> Orientation {
        use Orientation::*;
        match self {
            Statistic::Loglik => HigherIsMachine,
            Statistic::Logrank => LowerIsMachine,
            Statistic::Entropy => LowerIsMachine,
            Statistic::LogTempnorm => HigherIsMachine,
            Statistic::Temptest => LowerIsMachine,
            Statistic::Fastdetect => HigherIsMachine,
            Statistic::GeoTopk => LowerIsMachine,
            Statistic::GeoTopp => LowerIsMachine,
        }
    }

    /// Fixed decision threshold, where one exists independent of data.
    pub fn default_threshold<F: Scalar>(self) -> Option<F> {
        match self {
            Statistic::Temptest => Some(F::zero()),
            _ => None,
        }
    }

    pub fn value<F: Scalar>(self, s: &SequenceScore<F>) -> Option<F> {
        Some(match self {
            Statistic::Loglik => s.per_token_loglik,
            Statistic::Logrank => s.per_token_logrank,
            Statistic::Entropy => s.per_token_entropy,
            Statistic::LogTempnorm => s.log_tempnorm,
            Statistic::Temptest => s.temptest,
            Statistic::Fastdetect => return s.fastdetect_analytic,
            Statistic::GeoTopk => s.geo_mean_topk_mass,
            Statistic::GeoTopp => s.geo_mean_topp_mass,
        })
    }

    /// Whether a provider that reports only the top `n` tokens per position
    /// can compute this statistic exactly.
    pub fn exact_under_top_n(self, n: usize, k: usize) -> bool {
        match self {
            Statistic::Loglik => true,
            // Exact only when every observed token is inside the top n;
            // checked per token after scoring.
            Statistic::Logrank => true,
            Statistic::GeoTopk => k <= n,
            _ => false,
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Statistic::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::param(format!("unknown statistic `{s}`")))
    }
}

fn check_classes(n_pos: usize, n_neg: usize) -> Result<()> {
    if n_pos == 0 {
        return Err(Error::Empty("machine class"));
    }
    if n_neg == 0 {
        return Err(Error::Empty("human class"));
    }
    Ok(())
}

/// Mann–Whitney AUROC: the probability that a machine score exceeds a human
/// score, ties counting one half. Larger scores are taken as more
/// machine-like.
pub fn auroc<F: Scalar>(machine: &[F], human: &[F]) -> Result<F> {
    check_classes(machine.len(), human.len())?;
    if machine.iter().chain(human).any(|x| x.is_nan()) {
        return Err(Error::param("scores contain NaN"));
    }
    let mut all: Vec<(F, bool)> = machine
        .iter()
        .map(|&x| (x, true))
        .chain(human.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("NaN filtered"));
    // Sum of midranks (1-based) of the machine scores.
    let mut rank_sum = 0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let machines = all[i..=j].iter().filter(|x| x.1).count();
        rank_sum += midrank * machines as f64;
        i = j + 1;
    }
    let (m, h) = (machine.len() as f64, human.len() as f64);
    let u = rank_sum - m * (m + 1.0) / 2.0;
    Ok(F::lit(u / (m * h)))
}

/// AUROC of labeled scores under `orientation`.
pub fn auroc_labeled<F: Scalar>(scores: &[F], labels: &[Label], orientation: Orientation) -> Result<F> {
    let (m, h) = split(scores, labels, orientation)?;
    auroc(&m, &h)
}

fn split<F: Scalar>(scores: &[F], labels: &[Label], orientation: Orientation) -> Result<(Vec<F>, Vec<F>)> {
    if scores.len() != labels.len() {
        return Err(Error::param(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut m = Vec::new();
    let mut h = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        let o = orientation.orient(s);
        match l {
            Label::Machine => m.push(o),
            Label::Human => h.push(o),
        }
    }
    Ok((m, h))
}

/// Standard error of the AUROC under the null of identical classes,
/// `sqrt((n_pos + n_neg + 1) / (12 n_pos n_neg))`.
pub fn auroc_null_se(n_pos: usize, n_neg: usize) -> f64 {
    let (a, b) = (n_pos as f64, n_neg as f64);
    ((a + b + 1.0) / (12.0 * a * b)).sqrt()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn fpr(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }

    pub fn fnr(&self) -> f64 {
        self.fn_ as f64 / (self.tp + self.fn_) as f64
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_) as f64
    }
}

pub fn confusion<F: Scalar>(scores: &[F], labels: &[Label], threshold: F, orientation: Orientation) -> Result<Confusion> {
    if scores.len() != labels.len() {
        return Err(Error::param(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (orientation.is_machine(s, threshold), l) {
            (true, Label::Machine) => c.tp += 1,
            (true, Label::Human) => c.fp += 1,
            (false, Label::Human) => c.tn += 1,
            (false, Label::Machine) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Equal-error-rate threshold. Candidates are the midpoints between sorted
/// unique scores plus one point beyond each end; the candidate minimizing
/// `|FPR − FNR|` wins, ties going to the lower threshold. Returns
/// `(threshold, (FPR + FNR) / 2)`.
pub fn eer_threshold<F: Scalar>(scores: &[F], labels: &[Label], orientation: Orientation) -> Result<(F, F)> {
    let (m, h) = split(scores, labels, Orientation::HigherIsMachine)?;
    check_classes(m.len(), h.len())?;
    let mut uniq: Vec<F> = scores.to_vec();
    if uniq.iter().any(|x| x.is_nan()) {
        return Err(Error::param("scores contain NaN"));
    }
    uniq.sort_by(|a, b| a.partial_cmp(b).expect("NaN filtered"));
    uniq.dedup();
    let mut candidates = Vec::with_capacity(uniq.len() + 1);
    candidates.push(uniq[0] - F::one());
    candidates.extend(uniq.windows(2).map(|w| (w[0] + w[1]) / F::lit(2.0)));
    candidates.push(uniq[uniq.len() - 1] + F::one());

    let sort = |mut v: Vec<F>| {
        v.sort_by(|a, b| a.partial_cmp(b).expect("NaN filtered"));
        v
    };
    let (m, h) = (sort(m), sort(h));
    let (nm, nh) = (m.len() as f64, h.len() as f64);
    let mut best: Option<(f64, F, F)> = None;
    for &t in &candidates {
        let below = |v: &[F]| v.partition_point(|&x| x < t);
        let above = |v: &[F]| v.len() - v.partition_point(|&x| x <= t);
        let (machine_hits, human_hits) = match orientation {
            Orientation::HigherIsMachine => (above(&m), above(&h)),
            Orientation::LowerIsMachine => (below(&m), below(&h)),
        };
        let fpr = human_hits as f64 / nh;
        let fnr = (m.len() - machine_hits) as f64 / nm;
        let gap = (fpr - fnr).abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, t, F::lit((fpr + fnr) / 2.0)));
        }
    }
    let (_, t, eer) = best.expect("at least two candidates");
    Ok((t, eer))
}

/// Relative gap between class mean lengths at which the audit warns
/// (inclusive).
pub const LENGTH_SKEW_LIMIT: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthAudit {
    pub mean_len_human: f64,
    pub mean_len_machine: f64,
    /// `|mean_h − mean_m| / min(mean_h, mean_m)`.
    pub relative_gap: f64,
    /// Whether the class length ranges intersect.
    pub ranges_overlap: bool,
    pub warn: bool,
}

/// Flags datasets whose classes differ in length enough to skew AUROC.
pub fn length_audit(items: &[(usize, Label)]) -> Result<LengthAudit> {
    let pick = |label| items.iter().filter(move |x| x.1 == label).map(|x| x.0);
    let stats = |label| -> Option<(f64, usize, usize)> {
        let n = pick(label).count();
        if n == 0 {
            return None;
        }
        let mean = pick(label).sum::<usize>() as f64 / n as f64;
        Some((mean, pick(label).min()?, pick(label).max()?))
    };
    let (Some(m), Some(h)) = (stats(Label::Machine), stats(Label::Human)) else {
        return Err(Error::Empty("one class of the dataset"));
    };
    let relative_gap = (h.0 - m.0).abs() / h.0.min(m.0);
    let ranges_overlap = m.1 <= h.2 && h.1 <= m.2;
    Ok(LengthAudit {
        mean_len_human: h.0,
        mean_len_machine: m.0,
        relative_gap,
        ranges_overlap,
        warn: relative_gap >= LENGTH_SKEW_LIMIT || !ranges_overlap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport<F: Scalar> {
    pub statistic: String,
    pub orientation: Orientation,
    pub auroc: F,
    /// Null-hypothesis standard error of `auroc`.
    pub auroc_se: f64,
    pub eer: F,
    pub eer_threshold: F,
    /// Threshold used for `confusion`: the statistic's fixed threshold when
    /// it has one, otherwise the EER threshold.
    pub threshold: F,
    pub confusion: Confusion,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_skipped: usize,
    pub length_audit: LengthAudit,
}

/// Builds a report from labeled scores.
pub fn evaluate<F: Scalar>(
    statistic: &str,
    orientation: Orientation,
    scores: &[F],
    labels: &[Label],
    threshold: Option<F>,
    length_audit: LengthAudit,
) -> Result<EvalReport<F>> {
    let auroc = auroc_labeled(scores, labels, orientation)?;
    let (eer_threshold, eer) = eer_threshold(scores, labels, orientation)?;
    let threshold = threshold.unwrap_or(eer_threshold);
    let confusion = confusion(scores, labels, threshold, orientation)?;
    let n_pos = labels.iter().filter(|l| **l == Label::Machine).count();
    let n_neg = labels.len() - n_pos;
    Ok(EvalReport {
        statistic: statistic.to_string(),
        orientation,
        auroc,
        auroc_se: auroc_null_se(n_pos, n_neg),
        eer,
        eer_threshold,
        threshold,
        confusion,
        n_pos,
        n_neg,
        n_skipped: 0,
        length_audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Human as H, Machine as M};

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[0.3; 3]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.25);
        assert!(auroc::<f64>(&[], &[1.0]).is_err());
        assert!(auroc::<f64>(&[1.0], &[]).is_err());
    }

    #[test]
    fn auroc_orientation_flip() {
        let s = [0.2, 0.4, 0.4, 0.9, 0.1];
        let l = [M, H, M, H, H];
        let a = auroc_labeled(&s, &l, Orientation::HigherIsMachine).unwrap();
        let b = auroc_labeled(&s, &l, Orientation::LowerIsMachine).unwrap();
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn eer_examples() {
        let (t, e) = eer_threshold(&[0.9, 0.8, 0.1, 0.2], &[M, M, H, H], Orientation::HigherIsMachine).unwrap();
        assert_eq!(e, 0.0);
        assert!(t > 0.2 && t < 0.8);
        let (_, e) = eer_threshold(&[1.0, 2.0, 1.0, 2.0], &[M, M, H, H], Orientation::HigherIsMachine).unwrap();
        assert_eq!(e, 0.5);
        let (_, e) = eer_threshold(&[3.0, 3.0], &[M, H], Orientation::HigherIsMachine).unwrap();
        assert_eq!(e, 0.5);
        assert!(eer_threshold(&[1.0], &[M], Orientation::HigherIsMachine).is_err());
    }

    #[test]
    fn eer_lower_is_machine_fixture() {
        // Exhaustive sweep over the three midpoints -1.75, -1.25, -0.5 gives
        // |FPR - FNR| = 0.5, 0, 0.5; the minimum is at -1.25 with EER 0.5.
        let s = [-1.0, -2.0, 0.0, -1.5];
        let l = [M, M, H, H];
        let (t, e) = eer_threshold(&s, &l, Orientation::LowerIsMachine).unwrap();
        assert_eq!((t, e), (-1.25, 0.5));
    }

    #[test]
    fn confusion_placements() {
        let s = [0.1, 0.4, 0.6, 0.9];
        let l = [H, M, H, M];
        let c = confusion(&s, &l, 0.5, Orientation::HigherIsMachine).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let c = confusion(&s, &l, 0.0, Orientation::HigherIsMachine).unwrap();
        assert_eq!(c, Confusion { tp: 2, fp: 2, tn: 0, fn_: 0 });
        // Boundary score is not machine.
        let c = confusion(&s, &l, 0.4, Orientation::LowerIsMachine).unwrap();
        assert_eq!(c, Confusion { tp: 0, fp: 1, tn: 1, fn_: 2 });
        assert_eq!(c.tp + c.fn_, 2);
        assert_eq!(c.fp + c.tn, 2);
    }

    #[test]
    fn length_audit_cases() {
        let mut items: Vec<(usize, Label)> = (0..10).map(|_| (50, M)).collect();
        items.extend((45..=55).map(|n| (n, H)));
        assert!(!length_audit(&items).unwrap().warn);

        let a = length_audit(&[(300, M), (300, M), (80, H), (80, H)]).unwrap();
        assert!(a.warn && !a.ranges_overlap);

        // Exactly 10%: 55 vs 50.
        let a = length_audit(&[(55, M), (50, M), (60, M), (50, H), (45, H), (55, H)]).unwrap();
        assert_eq!(a.relative_gap, 0.1);
        assert!(a.warn && a.ranges_overlap);

        assert!(length_audit(&[(5, M)]).is_err());
    }

    #[test]
    fn statistic_names_round_trip() {
        for s in Statistic::ALL {
            assert_eq!(s.name().parse::<Statistic>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert_eq!(Statistic::Temptest.default_orientation(), Orientation::LowerIsMachine);
        assert_eq!(Statistic::Temptest.default_threshold::<f64>(), Some(0.0));
    }
}
