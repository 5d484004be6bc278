//! Logprob providers: the toy model, precomputed dump files, and (in a
//! separate crate) HTTP inference servers all hand the scorer a
//! [`LogprobMatrix`] through one trait.
//!
//! Providers that only report the top `n` tokens per position return sparse
//! rows; scoring those yields lower bounds annotated with the unreported
//! residual mass.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::SequenceRecord;
use crate::dist::{CondDist, TokenId};
use crate::error::{Error, Result};
use crate::lm::ToyLm;
use crate::scalar::{log_sum_exp, log_sum_exp_scaled, Scalar};
use crate::stats::{score_token, ScoreParams, TokenScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityKind {
    FullDistribution,
    TopNOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCapability {
    pub kind: CapabilityKind,
    /// Tokens reported per position; equals `vocab_size` for full providers.
    pub n: usize,
    pub vocab_size: usize,
}

impl ProviderCapability {
    pub fn full(vocab_size: usize) -> Self {
        Self { kind: CapabilityKind::FullDistribution, n: vocab_size, vocab_size }
    }

    pub fn top_n(n: usize, vocab_size: usize) -> Self {
        if n >= vocab_size {
            return Self::full(vocab_size);
        }
        Self { kind: CapabilityKind::TopNOnly, n, vocab_size }
    }

    pub fn is_full(&self) -> bool {
        self.kind == CapabilityKind::FullDistribution
    }
}

/// The top entries of one position, plus the observed token when it fell
/// outside them. Entries are kept in canonical order (descending log-prob,
/// ascending id).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow<F: Scalar> {
    pub top: Vec<(TokenId, F)>,
    pub observed: Option<(TokenId, F)>,
    pub vocab_size: usize,
}

impl<F: Scalar> SparseRow<F> {
    /// Builds from unordered known entries; the first `n` in canonical order
    /// are the top set and at most one further entry may follow.
    pub fn from_entries(mut entries: Vec<(TokenId, F)>, n: usize, vocab_size: usize) -> Result<Self> {
        if entries.iter().any(|(t, lp)| *t as usize >= vocab_size || lp.is_nan() || *lp > F::lit(F::NORM_TOL)) {
            return Err(Error::Format("sparse row has an invalid entry".into()));
        }
        sort_canonical(&mut entries);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Format("sparse row repeats a token".into()));
        }
        if entries.len() > n + 1 {
            return Err(Error::Format(format!("sparse row has {} entries for top-{n}", entries.len())));
        }
        let observed = if entries.len() > n { entries.pop() } else { None };
        Ok(Self { top: entries, observed, vocab_size })
    }

    fn known(&self) -> impl Iterator<Item = &(TokenId, F)> {
        self.top.iter().chain(&self.observed)
    }

    pub fn log_prob(&self, token: TokenId) -> Option<F> {
        self.known().find(|e| e.0 == token).map(|e| e.1)
    }

    /// `1 − Σ known p`, clamped at zero.
    pub fn residual_mass(&self) -> F {
        let lp: Vec<F> = self.known().map(|e| e.1).collect();
        (F::one() - log_sum_exp(&lp).exp()).max(F::zero())
    }

    /// The dense row, when every token of the vocabulary is known.
    pub fn to_full(&self) -> Option<Result<CondDist<F>>> {
        if self.known().count() != self.vocab_size {
            return None;
        }
        let mut logp = vec![F::neg_infinity(); self.vocab_size];
        for &(t, lp) in self.known() {
            logp[t as usize] = lp;
        }
        Some(CondDist::from_log_probs(logp))
    }
}

fn sort_canonical<F: Scalar>(entries: &mut [(TokenId, F)]) {
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogprobRow<F: Scalar> {
    Full(CondDist<F>),
    Sparse(SparseRow<F>),
}

/// Per-position rows for a scored span. `rows[i]` is the distribution from
/// which `tokens[i]` was drawn, conditioned on the prompt and `tokens[..i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogprobMatrix<F: Scalar> {
    pub tokens: Vec<TokenId>,
    pub rows: Vec<LogprobRow<F>>,
    pub prompt_len: usize,
}

impl<F: Scalar> LogprobMatrix<F> {
    pub fn new(tokens: Vec<TokenId>, rows: Vec<LogprobRow<F>>, prompt_len: usize) -> Result<Self> {
        if tokens.len() != rows.len() {
            return Err(Error::Format(format!("{} rows for {} tokens", rows.len(), tokens.len())));
        }
        Ok(Self { tokens, rows, prompt_len })
    }

    /// Scores every position. Sparse rows that cover the whole vocabulary
    /// are scored exactly; other sparse rows yield lower bounds.
    pub fn score(&self, params: &ScoreParams<F>) -> Result<Vec<TokenScore<F>>> {
        self.rows
            .iter()
            .zip(&self.tokens)
            .map(|(row, &t)| match row {
                LogprobRow::Full(d) => {
                    if t as usize >= d.len() {
                        return Err(Error::OutOfVocabulary { token: t, vocab_size: d.len() });
                    }
                    Ok(score_token(d, t, params))
                }
                LogprobRow::Sparse(s) => score_sparse(s, t, params),
            })
            .collect()
    }
}

/// Scores `token` against a truncated row.
///
/// Known entries give exact log-likelihood, exact rank when the token is in
/// the top set, and lower bounds otherwise: `rank >= n + 1`, `log ε_τ` step
/// `>= LSE(known / τ)` for `τ < 1`, entropy `>= −Σ_known p log p`, and set
/// masses `>=` the known part.
pub fn score_sparse<F: Scalar>(row: &SparseRow<F>, token: TokenId, params: &ScoreParams<F>) -> Result<TokenScore<F>> {
    if let Some(full) = row.to_full() {
        return Ok(score_token(&full?, token, params));
    }
    let logprob = row
        .log_prob(token)
        .ok_or_else(|| Error::Format(format!("sparse row does not report the observed token {token}")))?;
    let (rank, rank_exact) = match row.top.iter().position(|e| e.0 == token) {
        Some(i) => (i + 1, true),
        None => (row.top.len() + 1, false),
    };
    let known: Vec<F> = row.known().map(|e| e.1).collect();
    let log_tempnorm_step = if params.tau == F::one() {
        F::zero()
    } else {
        log_sum_exp_scaled(&known, params.tau.recip())
    };
    let mut m1 = F::zero();
    let mut m2 = F::zero();
    for &lp in &known {
        let p = lp.exp();
        if p > F::zero() {
            m1 = m1 + p * lp;
            m2 = m2 + p * lp * lp;
        }
    }
    let top: Vec<F> = row.top.iter().map(|e| e.1).collect();
    let topk_mass = log_sum_exp(&top[..params.k.min(top.len())]).exp();
    let mut cum = F::zero();
    let mut nucleus_size = top.len();
    for (i, &lp) in top.iter().enumerate() {
        cum = cum + lp.exp();
        if cum >= params.p {
            nucleus_size = i + 1;
            break;
        }
    }
    let topp_mass = log_sum_exp(&top[..nucleus_size]).exp();
    Ok(TokenScore {
        token,
        logprob,
        rank,
        rank_exact,
        entropy: -m1,
        log_tempnorm_step,
        topk_mass,
        topp_mass,
        nucleus_size,
        mu_tilde_step: m1,
        var_step: (m2 - m1 * m1).max(F::zero()),
        tau: params.tau,
        k: params.k,
        p: params.p,
        residual_mass: row.residual_mass(),
        valid: logprob > F::neg_infinity(),
    })
}

/// Source of per-position log-probabilities. Implementations must tolerate
/// concurrent `provide` calls.
pub trait LogprobProvider<F: Scalar>: Send + Sync {
    fn capability(&self) -> ProviderCapability;

    /// Rows for `tokens`, conditioned on `prompt`. `id` names the sequence
    /// for providers that look rows up rather than compute them.
    fn provide(&self, id: &str, prompt: &[TokenId], tokens: &[TokenId]) -> Result<LogprobMatrix<F>>;

    /// Rows for the scored part of `record` (everything after its prompt).
    fn provide_record(&self, record: &SequenceRecord) -> Result<LogprobMatrix<F>> {
        let (prompt, body) = record.split_prompt();
        let cap = self.capability();
        if let Some(&t) = record.tokens.iter().find(|&&t| t as usize >= cap.vocab_size) {
            return Err(Error::OutOfVocabulary { token: t, vocab_size: cap.vocab_size });
        }
        self.provide(&record.id, prompt, body)
    }
}

impl<F: Scalar, P: LogprobProvider<F> + ?Sized> LogprobProvider<F> for Arc<P> {
    fn capability(&self) -> ProviderCapability {
        (**self).capability()
    }

    fn provide(&self, id: &str, prompt: &[TokenId], tokens: &[TokenId]) -> Result<LogprobMatrix<F>> {
        (**self).provide(id, prompt, tokens)
    }
}

impl<F: Scalar, P: LogprobProvider<F> + ?Sized> LogprobProvider<F> for Box<P> {
    fn capability(&self) -> ProviderCapability {
        (**self).capability()
    }

    fn provide(&self, id: &str, prompt: &[TokenId], tokens: &[TokenId]) -> Result<LogprobMatrix<F>> {
        (**self).provide(id, prompt, tokens)
    }
}

/// Rows straight from a [`ToyLm`].
#[derive(Debug, Clone)]
pub struct ToyProvider<F: Scalar> {
    model: Arc<ToyLm<F>>,
}

impl<F: Scalar> ToyProvider<F> {
    pub fn new(model: ToyLm<F>) -> Self {
        Self { model: Arc::new(model) }
    }

    pub fn model(&self) -> &ToyLm<F> {
        &self.model
    }
}

impl<F: Scalar> LogprobProvider<F> for ToyProvider<F> {
    fn capability(&self) -> ProviderCapability {
        ProviderCapability::full(self.model.vocab_size())
    }

    fn provide(&self, _id: &str, prompt: &[TokenId], tokens: &[TokenId]) -> Result<LogprobMatrix<F>> {
        let rows = self.model.rows_for(prompt, tokens)?;
        LogprobMatrix::new(tokens.to_vec(), rows.into_iter().map(LogprobRow::Full).collect(), prompt.len())
    }
}

/// Wraps a full provider and reports only the top `n` entries per position
/// (plus the observed token), imitating a top-n logprobs API.
#[derive(Debug, Clone)]
pub struct TruncatingProvider<P> {
    inner: P,
    n: usize,
}

impl<P> TruncatingProvider<P> {
    pub fn new(inner: P, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("top-n must be >= 1"));
        }
        Ok(Self { inner, n })
    }
}

/// Keeps the top `n` entries of `row` and the observed token.
pub fn truncate_row<F: Scalar>(row: &CondDist<F>, observed: TokenId, n: usize) -> Result<SparseRow<F>> {
    let ranking = row.ranking();
    let mut entries: Vec<(TokenId, F)> = ranking.iter().take(n).map(|&t| (t, row.log_prob(t))).collect();
    if !ranking.iter().take(n).any(|&t| t == observed) {
        entries.push((observed, row.log_prob(observed)));
    }
    SparseRow::from_entries(entries, n, row.len())
}

impl<F: Scalar, P: LogprobProvider<F>> LogprobProvider<F> for TruncatingProvider<P> {
    fn capability(&self) -> ProviderCapability {
        ProviderCapability::top_n(self.n, self.inner.capability().vocab_size)
    }

    fn provide(&self, id: &str, prompt: &[TokenId], tokens: &[TokenId]) -> Result<LogprobMatrix<F>> {
        let full = self.inner.provide(id, prompt, tokens)?;
        let rows = full
            .rows
            .iter()
            .zip(&full.tokens)
            .map(|(row, &t)| match row {
                LogprobRow::Full(d) => truncate_row(d, t, self.n).map(LogprobRow::Sparse),
                LogprobRow::Sparse(s) => Ok(LogprobRow::Sparse(s.clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        LogprobMatrix::new(full.tokens, rows, full.prompt_len)
    }
}

/// First line of a logprob dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub vocab_size: usize,
    /// `"full"` or `"top_n"`.
    pub capability: String,
    pub n: usize,
    /// `"e"`, `"10"` or `"2"`; values are converted to natural log on read.
    pub log_base: String,
}

impl DumpHeader {
    pub fn for_capability(cap: ProviderCapability) -> Self {
        Self {
            vocab_size: cap.vocab_size,
            capability: if cap.is_full() { "full" } else { "top_n" }.into(),
            n: cap.n,
            log_base: "e".into(),
        }
    }

    fn capability(&self) -> Result<ProviderCapability> {
        match self.capability.as_str() {
            "full" => Ok(ProviderCapability::full(self.vocab_size)),
            "top_n" => Ok(ProviderCapability::top_n(self.n, self.vocab_size)),
            other => Err(Error::Format(format!("unknown dump capability `{other}`"))),
        }
    }

    fn to_natural(&self) -> Result<f64> {
        match self.log_base.as_str() {
            "e" => Ok(1.0),
            "10" => Ok(std::f64::consts::LN_10),
            "2" => Ok(std::f64::consts::LN_2),
            other => Err(Error::Format(format!("unsupported log base `{other}`"))),
        }
    }
}

/// One sequence of a logprob dump. Rows have `vocab_size` entries; `null`
/// is `-inf` in full dumps and "not reported" in top-n dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub id: String,
    pub prompt_len: usize,
    pub tokens: Vec<TokenId>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl DumpEntry {
    pub fn from_matrix<F: Scalar>(id: &str, m: &LogprobMatrix<F>, vocab_size: usize) -> Self {
        let rows = m
            .rows
            .iter()
            .map(|row| match row {
                LogprobRow::Full(d) => d
                    .log_probs()
                    .iter()
                    .map(|lp| (lp.is_finite()).then(|| lp.as_f64()))
                    .collect(),
                LogprobRow::Sparse(s) => {
                    let mut v = vec![None; vocab_size];
                    for &(t, lp) in s.known() {
                        v[t as usize] = Some(lp.as_f64());
                    }
                    v
                }
            })
            .collect();
        Self { id: id.into(), prompt_len: m.prompt_len, tokens: m.tokens.clone(), rows }
    }
}

/// Scores every record once through `provider` and writes a dump.
pub fn write_dump<F: Scalar>(
    path: impl AsRef<Path>,
    provider: &dyn LogprobProvider<F>,
    records: &[SequenceRecord],
) -> Result<()> {
    let cap = provider.capability();
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &DumpHeader::for_capability(cap))?;
    out.write_all(b"\n")?;
    for r in records {
        let m = provider.provide_record(r)?;
        serde_json::to_writer(&mut out, &DumpEntry::from_matrix(&r.id, &m, cap.vocab_size))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Replays rows from a logprob dump, looked up by sequence id.
#[derive(Debug, Clone)]
pub struct FileProvider {
    header: DumpHeader,
    capability: ProviderCapability,
    entries: HashMap<String, DumpEntry>,
}

impl FileProvider {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header: DumpHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Format("logprob dump is empty".into())),
        };
        let capability = header.capability()?;
        header.to_natural()?;
        let mut entries = HashMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: DumpEntry = serde_json::from_str(&line)?;
            if e.rows.len() != e.tokens.len() || e.rows.iter().any(|r| r.len() != header.vocab_size) {
                return Err(Error::Format(format!("dump entry `{}` has malformed rows", e.id)));
            }
            if entries.insert(e.id.clone(), e).is_some() {
                return Err(Error::Format("duplicate id in logprob dump".into()));
            }
        }
        Ok(Self { header, capability, entries })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn row<F: Scalar>(&self, raw: &[Option<f64>]) -> Result<LogprobRow<F>> {
        let scale = self.header.to_natural()?;
        let conv = |x: f64| if scale == 1.0 { F::lit(x) } else { F::lit(x * scale) };
        if self.capability.is_full() {
            let logp = raw.iter().map(|x| x.map_or(F::neg_infinity(), conv)).collect();
            Ok(LogprobRow::Full(CondDist::from_log_probs(logp)?))
        } else {
            let entries = raw
                .iter()
                .enumerate()
                .filter_map(|(t, x)| x.map(|x| (t as TokenId, conv(x))))
                .collect();
            Ok(LogprobRow::Sparse(SparseRow::from_entries(entries, self.capability.n, self.capability.vocab_size)?))
        }
    }
}

impl<F: Scalar> LogprobProvider<F> for FileProvider {
    fn capability(&self) -> ProviderCapability {
        self.capability
    }

    fn provide(&self, id: &str, prompt: &[TokenId], tokens: &[TokenId]) -> Result<LogprobMatrix<F>> {
        let e = self
            .entries
            .get(id)
            .ok_or_else(|| Error::Format(format!("sequence `{id}` is not in the logprob dump")))?;
        if e.tokens != tokens || e.prompt_len != prompt.len() {
            return Err(Error::Format(format!("dump entry `{id}` does not match the dataset tokens")));
        }
        let rows = e.rows.iter().map(|r| self.row(r)).collect::<Result<Vec<_>>>()?;
        LogprobMatrix::new(e.tokens.clone(), rows, e.prompt_len)
    }
}
