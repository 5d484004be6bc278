//! End-to-end detection experiments: one provider pass per sequence, every
//! requested statistic computed from the shared rows, one report per
//! statistic, and an optional scoring-temperature sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{LogprobMatrix, LogprobProvider};
use crate::dataset::{Label, SequenceRecord};
use crate::error::{Error, Result};
use crate::eval::{auroc_labeled, evaluate, length_audit, EvalReport, LengthAudit, Orientation, Statistic};
use crate::scalar::Scalar;
use crate::stats::{temptest, ScoreParams, SequenceScore, TokenScore};

/// Where log-probabilities come from: `toy:<model.json>`,
/// `file:<dump.jsonl>` or `http:<config.json>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProviderSpec {
    Toy(PathBuf),
    File(PathBuf),
    Http(PathBuf),
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, path) = s
            .split_once(':')
            .ok_or_else(|| Error::param(format!("provider `{s}` must look like kind:path")))?;
        let path = PathBuf::from(path);
        match kind {
            "toy" => Ok(ProviderSpec::Toy(path)),
            "file" => Ok(ProviderSpec::File(path)),
            "http" => Ok(ProviderSpec::Http(path)),
            _ => Err(Error::param(format!("unknown provider kind `{kind}`"))),
        }
    }
}

impl TryFrom<String> for ProviderSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProviderSpec> for String {
    fn from(p: ProviderSpec) -> String {
        p.to_string()
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (k, p) = match self {
            ProviderSpec::Toy(p) => ("toy", p),
            ProviderSpec::File(p) => ("file", p),
            ProviderSpec::Http(p) => ("http", p),
        };
        write!(f, "{k}:{}", p.display())
    }
}

fn default_statistics() -> Vec<Statistic> {
    Statistic::ALL.to_vec()
}

fn default_tau() -> f64 {
    0.8
}

fn default_k() -> usize {
    50
}

fn default_p() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    pub provider: Option<ProviderSpec>,
    #[serde(default = "default_statistics")]
    pub statistics: Vec<Statistic>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    /// Scoring temperatures for the TempTest AUROC sweep.
    #[serde(default)]
    pub tau_sweep: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Per-statistic orientation overrides.
    #[serde(default)]
    pub orientation: BTreeMap<Statistic, Orientation>,
    /// Per-statistic confusion-matrix thresholds; defaults to the
    /// statistic's fixed threshold or its EER threshold.
    #[serde(default)]
    pub thresholds: BTreeMap<Statistic, f64>,
    /// Report lower bounds from top-n providers instead of refusing.
    #[serde(default)]
    pub allow_truncated: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            provider: None,
            statistics: default_statistics(),
            tau: default_tau(),
            k: default_k(),
            p: default_p(),
            tau_sweep: Vec::new(),
            seed: 0,
            output_dir: None,
            orientation: BTreeMap::new(),
            thresholds: BTreeMap::new(),
            allow_truncated: false,
        }
    }
}

impl ExperimentConfig {
    pub fn orientation_of(&self, s: Statistic) -> Orientation {
        self.orientation.get(&s).copied().unwrap_or(s.default_orientation())
    }

    pub fn params<F: Scalar>(&self) -> Result<ScoreParams<F>> {
        ScoreParams::new(F::lit(self.tau), self.k, F::lit(self.p))
    }
}

/// Scores of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredRecord<F: Scalar> {
    pub label: Label,
    pub score: SequenceScore<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReports<F: Scalar> {
    /// Scored token length shared by the bucket.
    pub len: usize,
    pub reports: Vec<EvalReport<F>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutput<F: Scalar> {
    pub scores: Vec<ScoredRecord<F>>,
    pub reports: Vec<EvalReport<F>>,
    pub sweep: Vec<SweepRow>,
    /// Per-length reports, present when the length audit warns.
    pub buckets: Vec<BucketReports<F>>,
    pub length_audit: LengthAudit,
}

fn capability_error(s: Statistic, reason: impl Into<String>) -> Error {
    Error::Capability { statistic: s.name().into(), reason: reason.into() }
}

/// Refuses statistics the provider cannot compute exactly.
pub fn check_capability(
    statistics: &[Statistic],
    cap: crate::backends::ProviderCapability,
    k: usize,
    allow_truncated: bool,
) -> Result<()> {
    if cap.is_full() {
        return Ok(());
    }
    for &s in statistics {
        if s == Statistic::Fastdetect {
            return Err(capability_error(s, format!("needs full distributions, provider reports top-{}", cap.n)));
        }
        if !allow_truncated && !s.exact_under_top_n(cap.n, k) {
            return Err(capability_error(
                s,
                format!("needs full distributions, provider reports top-{}; pass allow_truncated for lower bounds", cap.n),
            ));
        }
    }
    Ok(())
}

/// Provider rows for every record, in input order.
pub fn provide_all<F: Scalar>(
    provider: &dyn LogprobProvider<F>,
    records: &[SequenceRecord],
) -> Result<Vec<LogprobMatrix<F>>> {
    records.par_iter().map(|r| provider.provide_record(r)).collect()
}

fn score_all<F: Scalar>(matrices: &[LogprobMatrix<F>], params: &ScoreParams<F>) -> Result<Vec<Vec<TokenScore<F>>>> {
    matrices.par_iter().map(|m| m.score(params)).collect()
}

/// Scored sequences together with the provider rows they came from.
#[derive(Debug, Clone)]
pub struct ScoredBatch<F: Scalar> {
    pub scores: Vec<ScoredRecord<F>>,
    pub matrices: Vec<LogprobMatrix<F>>,
}

/// One provider pass over `records`, after refusing any of `statistics`
/// the provider cannot supply. Under a top-n provider the fast-detect
/// value is left blank, since truncation bounds it in neither direction.
pub fn score_records<F: Scalar>(
    records: &[SequenceRecord],
    provider: &dyn LogprobProvider<F>,
    statistics: &[Statistic],
    params: &ScoreParams<F>,
    allow_truncated: bool,
) -> Result<ScoredBatch<F>> {
    if records.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let cap = provider.capability();
    check_capability(statistics, cap, params.k, allow_truncated)?;
    let vocab = crate::dist::Vocabulary::new(cap.vocab_size)?;
    for r in records {
        r.validate(Some(&vocab))?;
    }
    let matrices = provide_all(provider, records)?;
    let token_scores = score_all(&matrices, params)?;
    if !allow_truncated && statistics.contains(&Statistic::Logrank) {
        if let Some(i) = token_scores.iter().position(|s| s.iter().any(|t| !t.rank_exact)) {
            return Err(capability_error(
                Statistic::Logrank,
                format!("sequence `{}` has tokens outside the reported top-{}", records[i].id, cap.n),
            ));
        }
    }
    let scores = records
        .par_iter()
        .zip(&token_scores)
        .map(|(r, ts)| {
            let mut score = SequenceScore::from_token_scores(r.id.clone(), ts)?;
            if !cap.is_full() {
                score.fastdetect_analytic = None;
            }
            Ok(ScoredRecord { label: r.label, score })
        })
        .collect::<Result<_>>()?;
    Ok(ScoredBatch { scores, matrices })
}

/// Runs one experiment over `records`.
pub fn run_experiment<F: Scalar>(
    config: &ExperimentConfig,
    records: &[SequenceRecord],
    provider: &dyn LogprobProvider<F>,
) -> Result<ExperimentOutput<F>> {
    let params = config.params::<F>()?;
    if records.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if config.statistics.is_empty() {
        return Err(Error::Empty("statistics list"));
    }
    for &t in &config.tau_sweep {
        crate::decode::check_tau(t)?;
    }
    let mut needed = config.statistics.clone();
    if !config.tau_sweep.is_empty() {
        needed.push(Statistic::Temptest);
    }
    let ScoredBatch { scores, matrices } = score_records(records, provider, &needed, &params, config.allow_truncated)?;
    let audit = length_audit(&records.iter().map(|r| (r.scored_len(), r.label)).collect::<Vec<_>>())?;

    let reports = reports_for(config, &scores, audit)?;
    let buckets = if audit.warn { bucket_reports(config, &scores)? } else { Vec::new() };

    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let mut sweep = Vec::with_capacity(config.tau_sweep.len());
    for &tau in &config.tau_sweep {
        let p = ScoreParams::new(F::lit(tau), config.k, params.p)?;
        let per_seq = score_all(&matrices, &p)?;
        let values = per_seq.iter().map(|s| temptest(s, p.tau)).collect::<Result<Vec<F>>>()?;
        let auroc = auroc_labeled(&values, &labels, config.orientation_of(Statistic::Temptest))?;
        sweep.push(SweepRow { tau, auroc: auroc.as_f64() });
    }

    Ok(ExperimentOutput { scores, reports, sweep, buckets, length_audit: audit })
}

fn reports_for<F: Scalar>(
    config: &ExperimentConfig,
    scores: &[ScoredRecord<F>],
    audit: LengthAudit,
) -> Result<Vec<EvalReport<F>>> {
    config
        .statistics
        .iter()
        .map(|&stat| {
            let (values, labels): (Vec<F>, Vec<Label>) =
                scores.iter().filter_map(|s| stat.value(&s.score).map(|v| (v, s.label))).unzip();
            let threshold = config.thresholds.get(&stat).map(|&t| F::lit(t)).or(stat.default_threshold());
            let mut report = evaluate(stat.name(), config.orientation_of(stat), &values, &labels, threshold, audit)?;
            report.n_skipped = scores.len() - values.len();
            Ok(report)
        })
        .collect()
}

fn bucket_reports<F: Scalar>(config: &ExperimentConfig, scores: &[ScoredRecord<F>]) -> Result<Vec<BucketReports<F>>> {
    let mut by_len: BTreeMap<usize, Vec<ScoredRecord<F>>> = BTreeMap::new();
    for s in scores {
        by_len.entry(s.score.len).or_default().push(s.clone());
    }
    let mut out = Vec::new();
    for (len, group) in by_len {
        let has = |l| group.iter().any(|s| s.label == l);
        if !(has(Label::Human) && has(Label::Machine)) {
            continue;
        }
        let audit = length_audit(&group.iter().map(|s| (s.score.len, s.label)).collect::<Vec<_>>())?;
        out.push(BucketReports { len, reports: reports_for(config, &group, audit)? });
    }
    Ok(out)
}

/// Header of the score CSV.
pub const SCORE_COLUMNS: [&str; 14] = [
    "id", "label", "T", "tau", "k", "p", "loglik", "logrank", "entropy", "log_tempnorm", "temptest",
    "fastdetect", "geo_topk", "geo_topp",
];

/// Formats with 9 significant digits; the shortest representation of the
/// rounded value is printed.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    rounded.to_string()
}

/// Writes one CSV row per sequence. All values are in nats.
pub fn write_scores_csv<F: Scalar, W: Write>(out: W, scores: &[ScoredRecord<F>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(SCORE_COLUMNS).map_err(csv_err)?;
    for r in scores {
        let s = &r.score;
        let f = |x: F| sig9(x.as_f64());
        w.write_record([
            s.id.clone(),
            r.label.to_string(),
            s.len.to_string(),
            f(s.tau_used),
            s.k_used.to_string(),
            f(s.p_used),
            f(s.per_token_loglik),
            f(s.per_token_logrank),
            f(s.per_token_entropy),
            f(s.log_tempnorm),
            f(s.temptest),
            s.fastdetect_analytic.map(f).unwrap_or_default(),
            f(s.geo_mean_topk_mass),
            f(s.geo_mean_topp_mass),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ToyProvider, TruncatingProvider};
    use crate::decode::sample_sequence;
    use crate::lm::ToyLm;
    use crate::DecodingStrategy;

    fn dataset(lm: &ToyLm<f64>, n: u64) -> Vec<SequenceRecord> {
        let mut out = Vec::new();
        for seed in 0..n {
            out.push(sample_sequence(lm, &DecodingStrategy::Temperature { tau: 0.5 }, 20, &[], seed).unwrap());
            let mut h = sample_sequence(lm, &DecodingStrategy::Pure, 20, &[], 1000 + seed).unwrap();
            h.label = Label::Human;
            out.push(h);
        }
        out
    }

    #[test]
    fn white_box_reports_every_statistic() {
        let lm = ToyLm::<f64>::random(8, 1, 2.0, 3).unwrap();
        let data = dataset(&lm, 30);
        let config = ExperimentConfig { k: 3, tau: 0.5, tau_sweep: vec![0.5, 1.0], ..Default::default() };
        let out = run_experiment(&config, &data, &ToyProvider::new(lm)).unwrap();
        assert_eq!(out.reports.len(), Statistic::ALL.len());
        assert_eq!(out.scores.len(), 60);
        assert_eq!(out.sweep[1].auroc, 0.5);
        assert!(out.sweep[0].auroc > 0.5);
        assert!(out.buckets.is_empty());
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &out.scores).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,label,T,tau,k,p,loglik"));
        assert_eq!(text.lines().count(), 61);
    }

    #[test]
    fn top_n_provider_refuses_tempnorm() {
        let lm = ToyLm::<f64>::random(8, 1, 2.0, 3).unwrap();
        let data = dataset(&lm, 3);
        let provider = TruncatingProvider::new(ToyProvider::new(lm), 2).unwrap();
        let config = ExperimentConfig { statistics: vec![Statistic::Temptest], ..Default::default() };
        let err = run_experiment::<f64>(&config, &data, &provider).unwrap_err();
        assert!(matches!(err, Error::Capability { ref statistic, .. } if statistic == "temptest"));
        let ok = ExperimentConfig { statistics: vec![Statistic::Loglik], ..Default::default() };
        assert!(run_experiment::<f64>(&ok, &data, &provider).is_ok());
        let approx = ExperimentConfig { statistics: vec![Statistic::Temptest], allow_truncated: true, ..Default::default() };
        let out = run_experiment::<f64>(&approx, &data, &provider).unwrap();
        assert!(out.scores.iter().all(|s| !s.score.exact));
    }

    #[test]
    fn config_parses_with_defaults() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"datasets": ["a.jsonl"], "provider": "toy:m.json", "orientation": {"entropy": "higher_is_machine"}}"#,
        )
        .unwrap();
        assert_eq!(c.tau, 0.8);
        assert_eq!(c.k, 50);
        assert_eq!(c.provider, Some(ProviderSpec::Toy("m.json".into())));
        assert_eq!(c.orientation_of(Statistic::Entropy), Orientation::HigherIsMachine);
        assert_eq!(c.statistics.len(), 8);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"provider": "ftp:x"}"#).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(sig9(0.1234567891234), "0.123456789");
        assert_eq!(sig9(-2.0), "-2");
        assert_eq!(sig9(f64::NEG_INFINITY), "-inf");
    }
}
