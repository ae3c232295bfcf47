//! Differential score and differential rank of token sequences between a base
//! snapshot and an updated snapshot.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::ModelOracle;
use crate::vocab::TokenId;

/// Floor for the base probability in the relative score denominator.
pub const DEFAULT_REL_EPS: f64 = 1e-7;
/// Maximum number of sequences the exhaustive rank will score.
pub const DEFAULT_RANK_BUDGET: u128 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// `M'(t) - M(t)` per token.
    Absolute,
    /// `(M'(t) - M(t)) / max(M(t), eps)` per token.
    Relative,
}

impl Scoring {
    pub fn label(self) -> &'static str {
        match self {
            Scoring::Absolute => "abs",
            Scoring::Relative => "rel",
        }
    }
}

/// What a [`ScoredSeq`] score measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Absolute,
    Relative,
    /// Log-probability under a single model.
    LogProb,
}

impl From<Scoring> for ScoreKind {
    fn from(s: Scoring) -> Self {
        match s {
            Scoring::Absolute => ScoreKind::Absolute,
            Scoring::Relative => ScoreKind::Relative,
        }
    }
}

#[inline]
pub fn contribution(p_base: f64, p_updated: f64, scoring: Scoring, eps: f64) -> f64 {
    match scoring {
        Scoring::Absolute => p_updated - p_base,
        Scoring::Relative => (p_updated - p_base) / p_base.max(eps),
    }
}

/// A token sequence with its score and per-position contributions.
///
/// `score` is the left-to-right sum of `per_token`; positions that belong to a
/// search prompt contribute exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSeq {
    pub seq: Vec<TokenId>,
    pub score: f64,
    pub per_token: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoredSeq {
    pub fn from_parts(seq: Vec<TokenId>, per_token: Vec<f64>, kind: ScoreKind) -> Self {
        let score = per_token.iter().fold(0.0, |acc, c| acc + c);
        Self { seq, score, per_token, kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKind {
    Exact,
    LowerBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub value: u64,
    pub kind: RankKind,
}

fn check_pair(base: &dyn ModelOracle, updated: &dyn ModelOracle) -> Result<()> {
    base.vocab().ensure_compatible(updated.vocab())
}

/// Score `extension` read after `prompt`; prompt positions contribute zero.
pub fn score_with_prompt(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    prompt: &[TokenId],
    extension: &[TokenId],
    scoring: Scoring,
    eps: f64,
) -> Result<ScoredSeq> {
    check_pair(base, updated)?;
    if prompt.is_empty() && extension.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut seq = prompt.to_vec();
    let mut per_token = vec![0.0; prompt.len()];
    for &t in extension {
        let p = base.prob(&seq, t)?;
        let q = updated.prob(&seq, t)?;
        per_token.push(contribution(p, q, scoring, eps));
        seq.push(t);
    }
    Ok(ScoredSeq::from_parts(seq, per_token, scoring.into()))
}

/// `DS(s) = sum_i M'(s_<i)(s_i) - M(s_<i)(s_i)`.
pub fn differential_score(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    seq: &[TokenId],
) -> Result<ScoredSeq> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    score_with_prompt(base, updated, &[], seq, Scoring::Absolute, DEFAULT_REL_EPS)
}

/// Relative variant: each difference divided by `max(M(s_<i)(s_i), eps)`.
pub fn relative_differential_score(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    seq: &[TokenId],
    eps: f64,
) -> Result<ScoredSeq> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("relative eps must be positive, got {eps}")));
    }
    score_with_prompt(base, updated, &[], seq, Scoring::Relative, eps)
}

/// `M'(prefix)(token) - M(prefix)(token)`.
pub fn token_diff_given_prefix(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    prefix: &[TokenId],
    token: TokenId,
) -> Result<f64> {
    Ok(updated.prob(prefix, token)? - base.prob(prefix, token)?)
}

/// Number of sequences with score strictly greater than `target` in `results`.
pub fn rank_from_result_set(results: &[ScoredSeq], target: &ScoredSeq) -> RankEstimate {
    let value = results.iter().filter(|r| r.score > target.score).count() as u64;
    RankEstimate { value, kind: RankKind::LowerBound }
}

/// Lower-bound rank of `seq` if it is among `results`.
pub fn locate_rank(results: &[ScoredSeq], seq: &[TokenId]) -> Option<RankEstimate> {
    results
        .iter()
        .find(|r| r.seq == seq)
        .map(|hit| rank_from_result_set(results, hit))
}

/// Exact differential rank: counts every sequence of the same length over the
/// searchable tokens whose score is strictly greater than that of `seq`.
pub fn exact_differential_rank(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    seq: &[TokenId],
    scoring: Scoring,
    eps: f64,
    budget: u128,
) -> Result<RankEstimate> {
    exact_rank_with_prompt(base, updated, &[], seq, scoring, eps, budget)
}

/// Exact rank of `extension` among all same-length extensions of `prompt`.
pub fn exact_rank_with_prompt(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    prompt: &[TokenId],
    extension: &[TokenId],
    scoring: Scoring,
    eps: f64,
    budget: u128,
) -> Result<RankEstimate> {
    if extension.is_empty() {
        return Err(Error::EmptySequence);
    }
    let target = score_with_prompt(base, updated, prompt, extension, scoring, eps)?.score;
    let universe = base.vocab().searchable_ids();
    let needed = (universe.len() as u128)
        .checked_pow(extension.len() as u32)
        .unwrap_or(u128::MAX);
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let walker = RankWalker { base, updated, universe: &universe, scoring, eps, depth: extension.len(), target };
    let first = walker.contributions(prompt)?;
    let count_from = |i: usize| -> Result<u64> {
        let mut prefix = prompt.to_vec();
        prefix.push(universe[i]);
        walker.count(&mut prefix, 0.0 + first[i], 1)
    };
    #[cfg(feature = "parallel")]
    let total: u64 = {
        use rayon::prelude::*;
        (0..universe.len()).into_par_iter().map(count_from).sum::<Result<u64>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let total: u64 = (0..universe.len()).map(count_from).sum::<Result<u64>>()?;
    Ok(RankEstimate { value: total, kind: RankKind::Exact })
}

struct RankWalker<'a> {
    base: &'a dyn ModelOracle,
    updated: &'a dyn ModelOracle,
    universe: &'a [TokenId],
    scoring: Scoring,
    eps: f64,
    depth: usize,
    target: f64,
}

impl RankWalker<'_> {
    fn contributions(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let p = self.base.next_dist(prefix)?;
        let q = self.updated.next_dist(prefix)?;
        Ok(self
            .universe
            .iter()
            .map(|&t| contribution(p.prob(t), q.prob(t), self.scoring, self.eps))
            .collect())
    }

    fn count(&self, prefix: &mut Vec<TokenId>, score: f64, depth: usize) -> Result<u64> {
        if depth == self.depth {
            return Ok(u64::from(score > self.target));
        }
        let c = self.contributions(prefix)?;
        let mut n = 0;
        for (i, &t) in self.universe.iter().enumerate() {
            prefix.push(t);
            n += self.count(prefix, score + c[i], depth + 1)?;
            prefix.pop();
        }
        Ok(n)
    }
}

/// Scores of `n` phrases of length `len` drawn uniformly from the searchable tokens.
pub fn random_phrase_scores<R: Rng>(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    n: usize,
    len: usize,
    scoring: Scoring,
    eps: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let universe = base.vocab().searchable_ids();
    if universe.is_empty() || len == 0 {
        return Err(Error::InvalidConfig("nothing to sample".into()));
    }
    let mut phrase = vec![0; len];
    (0..n)
        .map(|_| {
            for slot in phrase.iter_mut() {
                *slot = universe[rng.random_range(0..universe.len())];
            }
            Ok(score_with_prompt(base, updated, &[], &phrase, scoring, eps)?.score)
        })
        .collect()
}

/// Nearest-rank percentile (`q` in `[0, 100]`) of `values`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::FixedOracle;
    use crate::vocab::Vocabulary;

    fn toy(pa_base: f64, pa_upd: f64) -> (FixedOracle, FixedOracle) {
        let v = Vocabulary::with_words(&["a", "b"]).unwrap();
        let m = FixedOracle::new(v.clone(), vec![0.0, 0.0, 0.0, pa_base, 1.0 - pa_base]).unwrap();
        let u = FixedOracle::new(v, vec![0.0, 0.0, 0.0, pa_upd, 1.0 - pa_upd]).unwrap();
        (m, u)
    }

    const A: TokenId = 3;
    const B: TokenId = 4;

    #[test]
    fn absolute_score_by_hand() {
        let (m, u) = toy(0.5, 0.8);
        let s = differential_score(&m, &u, &[A, A]).unwrap();
        assert_eq!(s.per_token.len(), 2);
        for c in &s.per_token {
            assert!((c - 0.3).abs() < 1e-12);
        }
        assert!((s.score - 0.6).abs() < 1e-12);
    }

    #[test]
    fn relative_score_by_hand() {
        let (m, u) = toy(0.5, 0.8);
        let s = relative_differential_score(&m, &u, &[A, A], DEFAULT_REL_EPS).unwrap();
        assert!((s.score - 1.2).abs() < 1e-12);
    }

    #[test]
    fn relative_score_floors_denominator() {
        let (m, u) = toy(1e-12, 0.1);
        let s = relative_differential_score(&m, &u, &[A], 1e-7).unwrap();
        assert_eq!(s.score, (0.1 - 1e-12) / 1e-7);
    }

    #[test]
    fn identical_models_score_zero() {
        let (m, _) = toy(0.5, 0.5);
        for seq in [&[A][..], &[A, B, B], &[B, A, B, A, A]] {
            assert_eq!(differential_score(&m, &m, seq).unwrap().score, 0.0);
            assert_eq!(relative_differential_score(&m, &m, seq, 1e-7).unwrap().score, 0.0);
        }
    }

    #[test]
    fn token_diff_matches_per_token() {
        let (m, u) = toy(0.5, 0.8);
        assert!((token_diff_given_prefix(&m, &u, &[A], A).unwrap() - 0.3).abs() < 1e-12);
        let s = differential_score(&m, &u, &[A, B, A]).unwrap();
        let mut sum = 0.0;
        for i in 0..3 {
            sum += token_diff_given_prefix(&m, &u, &s.seq[..i], s.seq[i]).unwrap();
        }
        assert!((sum - s.score).abs() < 1e-12);
    }

    #[test]
    fn exact_rank_on_two_token_universe() {
        let (m, u) = toy(0.5, 0.8);
        let rank = |seq: &[TokenId]| {
            exact_differential_rank(&m, &u, seq, Scoring::Absolute, DEFAULT_REL_EPS, DEFAULT_RANK_BUDGET)
                .unwrap()
        };
        assert_eq!(rank(&[A, A]), RankEstimate { value: 0, kind: RankKind::Exact });
        assert_eq!(rank(&[A, B]).value, 1);
        assert_eq!(rank(&[B, A]).value, 1);
        assert_eq!(rank(&[B, B]).value, 3);
    }

    #[test]
    fn exact_rank_respects_budget() {
        let (m, u) = toy(0.5, 0.8);
        let err = exact_differential_rank(&m, &u, &[A; 5], Scoring::Absolute, 1e-7, 31).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { needed: 32, budget: 31 }));
    }

    #[test]
    fn rank_from_results_counts_strictly_greater() {
        let mk = |s: f64| ScoredSeq { seq: vec![], score: s, per_token: vec![s], kind: ScoreKind::Absolute };
        let results = vec![mk(0.9), mk(0.5), mk(0.5), mk(0.1)];
        assert_eq!(rank_from_result_set(&results, &results[0]).value, 0);
        assert_eq!(rank_from_result_set(&results, &results[2]).value, 1);
        assert_eq!(rank_from_result_set(&results, &results[3]).value, 3);
        assert_eq!(rank_from_result_set(&results, &results[3]).kind, RankKind::LowerBound);
    }

    #[test]
    fn vocab_mismatch() {
        let (m, _) = toy(0.5, 0.5);
        let other = FixedOracle::uniform(Vocabulary::with_words(&["a", "b", "c"]).unwrap());
        assert!(matches!(differential_score(&m, &other, &[A]), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }
}
