//! Order-`m` additively smoothed n-gram model used as an exactly enumerable
//! language model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{CondDist, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Context key: the last `order` tokens, left-padded with BOS.
pub type ContextKey = Vec<TokenId>;

#[derive(Debug, Clone)]
pub struct ToyLm<F: Scalar> {
    order: usize,
    vocab: Vocabulary,
    alpha: F,
    rows: HashMap<ContextKey, CondDist<F>>,
    uniform: CondDist<F>,
}

impl<F: Scalar> ToyLm<F> {
    /// Counts n-grams in `corpus` and applies additive smoothing:
    /// `(count(ctx, v) + alpha) / (count(ctx) + alpha * N)`.
    pub fn train(corpus: &[Vec<TokenId>], vocab_size: usize, order: usize, alpha: F) -> Result<Self> {
        let vocab = Vocabulary::new(vocab_size)?;
        if !(alpha > F::zero()) {
            return Err(Error::param(format!("smoothing alpha must be > 0, got {alpha}")));
        }
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::Empty("training corpus"));
        }
        let mut counts: HashMap<ContextKey, Vec<u64>> = HashMap::new();
        for seq in corpus {
            for (i, &tok) in seq.iter().enumerate() {
                vocab.check(tok)?;
                let key = context_key(&vocab, order, &seq[..i]);
                counts.entry(key).or_insert_with(|| vec![0; vocab_size])[tok as usize] += 1;
            }
        }
        let n = F::from_count(vocab_size);
        let mut rows = HashMap::with_capacity(counts.len());
        for (key, row) in counts {
            let total: u64 = row.iter().sum();
            let log_denom = (F::from_count(total as usize) + alpha * n).ln();
            let logp = row
                .iter()
                .map(|&c| (F::from_count(c as usize) + alpha).ln() - log_denom)
                .collect();
            rows.insert(key, CondDist::from_log_probs(logp)?);
        }
        Ok(Self { order, vocab, alpha, rows, uniform: CondDist::uniform(vocab_size)? })
    }

    /// Builds a model from explicit rows. Contexts without a row are uniform.
    pub fn from_rows(
        vocab_size: usize,
        order: usize,
        rows: impl IntoIterator<Item = (ContextKey, CondDist<F>)>,
    ) -> Result<Self> {
        let vocab = Vocabulary::new(vocab_size)?;
        let mut map = HashMap::new();
        for (key, row) in rows {
            if key.len() != order {
                return Err(Error::param(format!(
                    "context key {key:?} has length {}, model order is {order}",
                    key.len()
                )));
            }
            if key.iter().any(|&t| t as usize > vocab_size) {
                return Err(Error::param(format!("context key {key:?} has an id beyond BOS")));
            }
            if row.len() != vocab_size {
                return Err(Error::InvalidDistribution(format!(
                    "row for {key:?} has {} entries, vocabulary has {vocab_size}",
                    row.len()
                )));
            }
            map.insert(key, row);
        }
        Ok(Self {
            order,
            vocab,
            alpha: F::zero(),
            rows: map,
            uniform: CondDist::uniform(vocab_size)?,
        })
    }

    /// A context-free (unigram) model with the given probabilities.
    pub fn context_free(probs: &[F]) -> Result<Self> {
        let row = CondDist::from_probs(probs)?;
        Self::from_rows(probs.len(), 0, [(Vec::new(), row)])
    }

    /// Random model with softmax(`sharpness` · z) rows, z standard normal,
    /// one row per reachable context.
    pub fn random(vocab_size: usize, order: usize, sharpness: f64, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::new(vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for key in reachable_contexts(&vocab, order) {
            let logits: Vec<F> = (0..vocab_size)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    F::lit(sharpness * z)
                })
                .collect();
            rows.push((key, CondDist::from_logits(&logits)?));
        }
        Self::from_rows(vocab_size, order, rows)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn alpha(&self) -> F {
        self.alpha
    }

    pub fn context_key(&self, context: &[TokenId]) -> ContextKey {
        context_key(&self.vocab, self.order, context)
    }

    /// Conditional distribution of the next token given `context`.
    pub fn cond_dist(&self, context: &[TokenId]) -> Result<&CondDist<F>> {
        for &t in context {
            self.vocab.check(t)?;
        }
        Ok(self.row(&self.context_key(context)))
    }

    /// Row lookup by an already-formed key.
    pub fn row(&self, key: &[TokenId]) -> &CondDist<F> {
        self.rows.get(key).unwrap_or(&self.uniform)
    }

    /// Per-position conditionals for `tokens`, each conditioning on `prompt`
    /// followed by the preceding tokens.
    pub fn rows_for(&self, prompt: &[TokenId], tokens: &[TokenId]) -> Result<Vec<CondDist<F>>> {
        let mut full = Vec::with_capacity(prompt.len() + tokens.len());
        full.extend_from_slice(prompt);
        full.extend_from_slice(tokens);
        for &t in &full {
            self.vocab.check(t)?;
        }
        Ok((0..tokens.len())
            .map(|i| self.row(&self.context_key(&full[..prompt.len() + i])).clone())
            .collect())
    }

    /// `Σ log p(w_i | w_<i)` in nats. A zero-probability token makes the
    /// result `-inf`.
    pub fn seq_logprob(&self, tokens: &[TokenId]) -> Result<F> {
        self.seq_logprob_after(&[], tokens)
    }

    pub fn seq_logprob_after(&self, prompt: &[TokenId], tokens: &[TokenId]) -> Result<F> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let mut full = prompt.to_vec();
        let mut total = F::zero();
        for &t in tokens {
            self.vocab.check(t)?;
            total = total + self.cond_dist(&full)?.log_prob(t);
            full.push(t);
        }
        Ok(total)
    }

    /// Stored rows in deterministic key order.
    pub fn rows(&self) -> Vec<(&ContextKey, &CondDist<F>)> {
        let mut v: Vec<_> = self.rows.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn to_file(&self) -> ToyLmFile {
        let rows = self
            .rows()
            .into_iter()
            .map(|(k, row)| {
                let key = k.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-");
                let lp = row
                    .log_probs()
                    .iter()
                    .map(|x| if x.is_finite() { Some(x.as_f64()) } else { None })
                    .collect();
                (key, lp)
            })
            .collect();
        ToyLmFile {
            order: self.order,
            alpha: self.alpha.as_f64(),
            vocab_size: self.vocab.size(),
            bos_id: self.vocab.bos_id(),
            rows,
        }
    }

    pub fn from_file(file: &ToyLmFile) -> Result<Self> {
        let vocab = Vocabulary::new(file.vocab_size)?;
        if file.bos_id != vocab.bos_id() {
            return Err(Error::Format(format!(
                "bos_id must equal vocab_size ({}), got {}",
                vocab.bos_id(),
                file.bos_id
            )));
        }
        let mut rows = Vec::with_capacity(file.rows.len());
        for (key, lp) in &file.rows {
            let ctx: ContextKey = if key.is_empty() {
                Vec::new()
            } else {
                key.split('-')
                    .map(|s| s.parse::<TokenId>().map_err(|e| Error::Format(format!("row key `{key}`: {e}"))))
                    .collect::<Result<_>>()?
            };
            let logp = lp.iter().map(|x| x.map_or(F::neg_infinity(), F::lit)).collect();
            rows.push((ctx, CondDist::from_log_probs(logp)?));
        }
        let mut lm = Self::from_rows(file.vocab_size, file.order, rows)?;
        lm.alpha = F::lit(file.alpha);
        Ok(lm)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(&serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }
}

/// On-disk JSON form of a [`ToyLm`]. Log-probabilities are natural log;
/// `null` encodes zero mass.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToyLmFile {
    pub order: usize,
    pub alpha: f64,
    pub vocab_size: usize,
    pub bos_id: TokenId,
    pub rows: BTreeMap<String, Vec<Option<f64>>>,
}

fn context_key(vocab: &Vocabulary, order: usize, context: &[TokenId]) -> ContextKey {
    let mut key = Vec::with_capacity(order);
    let have = context.len().min(order);
    key.resize(order - have, vocab.bos_id());
    key.extend_from_slice(&context[context.len() - have..]);
    key
}

/// Every context key that can occur: BOS only as a left pad.
pub fn reachable_contexts(vocab: &Vocabulary, order: usize) -> Vec<ContextKey> {
    let mut out = Vec::new();
    for pad in (0..=order).rev() {
        let free = order - pad;
        let count = vocab.size().pow(free as u32);
        for mut code in 0..count {
            let mut key = vec![vocab.bos_id(); order];
            for slot in (pad..order).rev() {
                key[slot] = (code % vocab.size()) as TokenId;
                code /= vocab.size();
            }
            out.push(key);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplace_unigram_by_hand() {
        let lm = ToyLm::<f64>::train(&[vec![0, 0, 1]], 2, 0, 1.0).unwrap();
        let row = lm.cond_dist(&[]).unwrap();
        assert!((row.prob(0) - 0.6).abs() < 1e-12);
        assert!((row.prob(1) - 0.4).abs() < 1e-12);
        assert!(std::ptr::eq(row, lm.cond_dist(&[1, 0, 1]).unwrap()));
    }

    #[test]
    fn train_errors() {
        assert!(matches!(ToyLm::<f64>::train(&[], 2, 0, 1.0), Err(Error::Empty(_))));
        assert!(ToyLm::<f64>::train(&[vec![0]], 2, 0, 0.0).is_err());
        assert!(ToyLm::<f64>::train(&[vec![0]], 2, 0, -1.0).is_err());
        assert!(matches!(
            ToyLm::<f64>::train(&[vec![0, 2]], 2, 0, 1.0),
            Err(Error::OutOfVocabulary { token: 2, .. })
        ));
    }

    #[test]
    fn uniform_corpus_rows_near_uniform() {
        // Counting oracle: every context row approaches 1/4 with 10k tokens.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let corpus: Vec<TokenId> = (0..10_000).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
        let lm = ToyLm::<f64>::train(&[corpus.clone()], 4, 1, 1.0).unwrap();
        for ctx in 0..4u32 {
            let row = lm.cond_dist(&[ctx]).unwrap();
            let mut counts = [0f64; 4];
            let mut n = 0f64;
            for w in corpus.windows(2).filter(|w| w[0] == ctx) {
                counts[w[1] as usize] += 1.0;
                n += 1.0;
            }
            for v in 0..4 {
                let oracle = (counts[v] + 1.0) / (n + 4.0);
                assert!((row.prob(v as u32) - oracle).abs() < 1e-12);
                assert!((row.prob(v as u32) - 0.25).abs() < 0.05);
            }
        }
    }

    #[test]
    fn order_one_alternating_corpus() {
        let lm = ToyLm::<f64>::train(&[vec![0, 1, 0, 1, 0, 1]], 2, 1, 1e-6).unwrap();
        assert!(lm.cond_dist(&[0]).unwrap().prob(1) > 0.999_99);
        assert!(lm.cond_dist(&[1]).unwrap().prob(0) > 0.999_99);
        // BOS-padded lookup for the empty context.
        assert!(lm.cond_dist(&[]).unwrap().prob(0) > 0.999_99);
    }

    #[test]
    fn seq_logprob_uniform_and_scalar() {
        let lm = ToyLm::<f64>::context_free(&[0.25; 4]).unwrap();
        let lp = lm.seq_logprob(&[0, 3, 2]).unwrap();
        assert!((lp - 3.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!((lp + 4.158883).abs() < 1e-6);
        let lm = ToyLm::<f64>::context_free(&[0.8, 0.2]).unwrap();
        assert!((lm.seq_logprob(&[0]).unwrap() + 0.223144).abs() < 1e-6);
        assert!(lm.seq_logprob(&[]).is_err());
        assert!(lm.seq_logprob(&[5]).is_err());
    }

    #[test]
    fn seq_logprob_chain_rule() {
        let lm = ToyLm::<f64>::random(5, 2, 1.0, 3).unwrap();
        let w = [1, 4, 0, 2, 2, 3];
        let whole = lm.seq_logprob(&w).unwrap();
        let head = lm.seq_logprob(&w[..2]).unwrap();
        let tail = lm.seq_logprob_after(&w[..2], &w[2..]).unwrap();
        assert!((whole - (head + tail)).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let lm = ToyLm::<f64>::random(3, 2, 2.0, 11).unwrap();
        let text = serde_json::to_string(&lm.to_file()).unwrap();
        let back = ToyLm::<f64>::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        for (k, row) in lm.rows() {
            assert_eq!(row.log_probs(), back.row(k).log_probs());
        }
    }

    #[test]
    fn reachable_context_count() {
        let v = Vocabulary::new(3).unwrap();
        // 1 (all BOS) + 3 + 9
        assert_eq!(reachable_contexts(&v, 2).len(), 13);
        assert_eq!(reachable_contexts(&v, 0), vec![Vec::<TokenId>::new()]);
    }

    #[test]
    fn missing_rows_are_uniform() {
        let lm = ToyLm::<f64>::from_rows(3, 1, []).unwrap();
        let row = lm.cond_dist(&[2]).unwrap();
        assert!((row.prob(1) - 1.0 / 3.0).abs() < 1e-15);
    }
}
