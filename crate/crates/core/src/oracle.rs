//! The model-oracle abstraction: anything that maps a prefix to a next-token
//! distribution. Built-in n-gram models, interpolations, truncated views and
//! remote models all implement [`ModelOracle`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// Next-token distribution in linear scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    /// Wraps `probs` without checking normalization (truncated views sum to <= 1).
    pub fn from_vec(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    /// Wraps `probs`, requiring non-negative entries summing to 1 within `1e-9`.
    pub fn normalized(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| p.is_nan() || *p < 0.0) {
            return Err(Error::Oracle("negative or NaN probability".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Oracle(format!("distribution sums to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    pub fn log_prob(&self, id: TokenId) -> f64 {
        self.prob(id).ln()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Ids of the `k` largest entries, descending, ties broken by lower id.
    pub fn top_k(&self, k: usize) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len() as TokenId).collect();
        let cmp = |a: &TokenId, b: &TokenId| {
            self.probs[*b as usize]
                .total_cmp(&self.probs[*a as usize])
                .then(a.cmp(b))
        };
        let k = k.min(ids.len());
        if k == 0 {
            return Vec::new();
        }
        if k < ids.len() {
            ids.select_nth_unstable_by(k - 1, cmp);
            ids.truncate(k);
        }
        ids.sort_unstable_by(cmp);
        ids
    }
}

/// Prefix -> next-token distribution. Implementations must be deterministic,
/// and [`prob`](ModelOracle::prob) must agree bitwise with the corresponding
/// entry of [`next_dist`](ModelOracle::next_dist).
pub trait ModelOracle: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist>;

    fn prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        self.vocab().check_id(token)?;
        Ok(self.next_dist(prefix)?.prob(token))
    }

    fn describe(&self) -> String {
        "oracle".to_string()
    }
}

impl<T: ModelOracle + ?Sized> ModelOracle for Arc<T> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist> {
        (**self).next_dist(prefix)
    }
    fn prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        (**self).prob(prefix, token)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<T: ModelOracle + ?Sized> ModelOracle for &T {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist> {
        (**self).next_dist(prefix)
    }
    fn prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        (**self).prob(prefix, token)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Same distribution after every prefix.
#[derive(Clone, Debug)]
pub struct FixedOracle {
    vocab: Vocabulary,
    dist: ProbDist,
}

impl FixedOracle {
    pub fn new(vocab: Vocabulary, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "{} probabilities for {} tokens",
                probs.len(),
                vocab.len()
            )));
        }
        Ok(Self { vocab, dist: ProbDist::normalized(probs)? })
    }

    /// Uniform over every id of `vocab`.
    pub fn uniform(vocab: Vocabulary) -> Self {
        let n = vocab.len();
        Self { dist: ProbDist::from_vec(vec![1.0 / n as f64; n]), vocab }
    }

    /// Uniform over the searchable (non-special) ids; specials get zero.
    pub fn uniform_searchable(vocab: Vocabulary) -> Self {
        let ids = vocab.searchable_ids();
        let mut probs = vec![0.0; vocab.len()];
        for &i in &ids {
            probs[i as usize] = 1.0 / ids.len() as f64;
        }
        Self { dist: ProbDist::from_vec(probs), vocab }
    }
}

impl ModelOracle for FixedOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist> {
        self.vocab.check_seq(prefix)?;
        Ok(self.dist.clone())
    }
    fn prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        self.vocab.check_seq(prefix)?;
        self.vocab.check_id(token)?;
        Ok(self.dist.prob(token))
    }
    fn describe(&self) -> String {
        "fixed".to_string()
    }
}

/// Pointwise mixture `(1 - lambda) * base + lambda * update`.
///
/// Stands in for continued training of count-based models, where the update
/// data dominates the most recent change to the model.
pub struct Interpolated {
    base: Arc<dyn ModelOracle>,
    update: Arc<dyn ModelOracle>,
    lambda: f64,
}

impl Interpolated {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

pub fn interpolate(
    base: Arc<dyn ModelOracle>,
    update: Arc<dyn ModelOracle>,
    lambda: f64,
) -> Result<Interpolated> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    base.vocab().ensure_compatible(update.vocab())?;
    Ok(Interpolated { base, update, lambda })
}

impl ModelOracle for Interpolated {
    fn vocab(&self) -> &Vocabulary {
        self.base.vocab()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist> {
        let a = self.base.next_dist(prefix)?;
        let b = self.update.next_dist(prefix)?;
        let w = 1.0 - self.lambda;
        let probs = a
            .probs()
            .iter()
            .zip(b.probs())
            .map(|(x, y)| w * x + self.lambda * y)
            .collect();
        Ok(ProbDist::from_vec(probs))
    }
    fn prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        let x = self.base.prob(prefix, token)?;
        let y = self.update.prob(prefix, token)?;
        Ok((1.0 - self.lambda) * x + self.lambda * y)
    }
    fn describe(&self) -> String {
        format!(
            "finetune-proxy(lambda={}, base={}, update={})",
            self.lambda,
            self.base.describe(),
            self.update.describe()
        )
    }
}

/// Exposes only the `k` most likely next tokens of the wrapped model (ties by
/// id); every other token reads as probability zero. Not renormalized.
pub struct TruncatedOracle {
    inner: Arc<dyn ModelOracle>,
    k: usize,
}

impl TruncatedOracle {
    pub fn new(inner: Arc<dyn ModelOracle>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("truncation k must be at least 1".into()));
        }
        Ok(Self { inner, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl ModelOracle for TruncatedOracle {
    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist> {
        let full = self.inner.next_dist(prefix)?;
        let mut probs = vec![0.0; full.len()];
        for t in full.top_k(self.k) {
            probs[t as usize] = full.prob(t);
        }
        Ok(ProbDist::from_vec(probs))
    }
    fn describe(&self) -> String {
        format!("top{}({})", self.k, self.inner.describe())
    }
}

/// Sum of per-token natural-log probabilities; `-inf` if any token has
/// probability zero.
pub fn seq_log_prob(model: &dyn ModelOracle, seq: &[TokenId]) -> Result<f64> {
    seq_log_prob_from(model, &[], seq)
}

/// Log-probability of `seq` read after `context`.
pub fn seq_log_prob_from(model: &dyn ModelOracle, context: &[TokenId], seq: &[TokenId]) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut prefix = context.to_vec();
    let mut total = 0.0;
    for &t in seq {
        total += model.prob(&prefix, t)?.ln();
        prefix.push(t);
    }
    Ok(total)
}

/// `exp(-log p(seq) / |seq|)`; `+inf` when the sequence has probability zero.
pub fn perplexity(model: &dyn ModelOracle, seq: &[TokenId]) -> Result<f64> {
    let lp = seq_log_prob(model, seq)?;
    Ok((-lp / seq.len() as f64).exp())
}

/// Per-token perplexity over whole sentences, each read from the sentence
/// start and scored through its end-of-sentence token.
pub fn corpus_perplexity(model: &dyn ModelOracle, sentences: &[Vec<TokenId>]) -> Result<f64> {
    let eos = model.vocab().eos();
    let mut total = 0.0;
    let mut n = 0usize;
    for s in sentences {
        let mut prefix: Vec<TokenId> = Vec::with_capacity(s.len() + 1);
        for &t in s.iter().chain(std::iter::once(&eos)) {
            total += model.prob(&prefix, t)?.ln();
            prefix.push(t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    Ok((-total / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (0..n - 3).map(|i| format!("w{i}")).collect();
        Vocabulary::with_words(&words).unwrap()
    }

    #[test]
    fn uniform_is_flat_for_any_prefix() {
        let u = FixedOracle::uniform(vocab(4));
        assert_eq!(u.next_dist(&[]).unwrap().probs(), &[0.25; 4]);
        assert_eq!(u.next_dist(&[3, 3, 1]).unwrap().probs(), &[0.25; 4]);
    }

    #[test]
    fn uniform_product_and_perplexity() {
        let u = FixedOracle::uniform(vocab(4));
        let lp = seq_log_prob(&u, &[3, 3, 3]).unwrap();
        assert!((lp - (1.0f64 / 64.0).ln()).abs() < 1e-12);
        let u10 = FixedOracle::uniform(vocab(10));
        for len in 1..20 {
            let seq = vec![4; len];
            assert!((perplexity(&u10, &seq).unwrap() - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn certain_chain_and_single_token() {
        let v = vocab(4);
        let delta = FixedOracle::new(v.clone(), vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(seq_log_prob(&delta, &[3, 3, 3]).unwrap(), 0.0);
        assert_eq!(perplexity(&delta, &[3, 3]).unwrap(), 1.0);
        let quarter = FixedOracle::new(v, vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert!((perplexity(&quarter, &[3]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn toy_context_free_product() {
        let v = Vocabulary::with_words(&["a", "b"]).unwrap();
        let m = FixedOracle::new(v, vec![0.0, 0.0, 0.0, 0.8, 0.2]).unwrap();
        let lp = seq_log_prob(&m, &[3, 3]).unwrap();
        assert!((lp - 0.64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_negative_infinity() {
        let v = Vocabulary::with_words(&["a", "b"]).unwrap();
        let m = FixedOracle::new(v, vec![0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(seq_log_prob(&m, &[3, 4]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(perplexity(&m, &[4]).unwrap(), f64::INFINITY);
        assert!(matches!(perplexity(&m, &[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let v = vocab(4);
        let base: Arc<dyn ModelOracle> = Arc::new(FixedOracle::uniform(v.clone()));
        let upd: Arc<dyn ModelOracle> =
            Arc::new(FixedOracle::new(v, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let mid = interpolate(base.clone(), upd.clone(), 0.5).unwrap();
        assert_eq!(mid.next_dist(&[]).unwrap().probs(), &[0.625, 0.125, 0.125, 0.125]);
        let lo = interpolate(base.clone(), upd.clone(), 0.0).unwrap();
        assert_eq!(lo.next_dist(&[]).unwrap(), base.next_dist(&[]).unwrap());
        let hi = interpolate(base.clone(), upd.clone(), 1.0).unwrap();
        assert_eq!(hi.next_dist(&[]).unwrap(), upd.next_dist(&[]).unwrap());
        assert!(matches!(interpolate(base, upd, 1.5), Err(Error::LambdaOutOfRange(_))));
    }

    #[test]
    fn interpolation_rejects_vocab_mismatch() {
        let a: Arc<dyn ModelOracle> = Arc::new(FixedOracle::uniform(vocab(4)));
        let b: Arc<dyn ModelOracle> = Arc::new(FixedOracle::uniform(vocab(5)));
        assert!(matches!(interpolate(a, b, 0.5), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn top_k_orders_by_prob_then_id() {
        let d = ProbDist::from_vec(vec![0.1, 0.3, 0.3, 0.2, 0.1]);
        assert_eq!(d.top_k(3), vec![1, 2, 3]);
        assert_eq!(d.top_k(10), vec![1, 2, 3, 0, 4]);
        assert!(d.top_k(0).is_empty());
    }
}
