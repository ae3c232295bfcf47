//! Beam search for high differential-score phrases.
//!
//! At every depth each kept candidate is extended by every searchable token,
//! the extension's per-token contribution is added to the parent's running
//! score, and the best `widths[depth]` candidates survive. Ties are broken by
//! the lexicographic order of the token ids, so results do not depend on
//! evaluation order or on how the expansion is split across threads.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{contribution, locate_rank, RankEstimate, ScoreKind, ScoredSeq, Scoring, DEFAULT_REL_EPS};
use crate::oracle::ModelOracle;
use crate::vocab::TokenId;

pub const DEFAULT_HALVING_FLOOR: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Halving,
    Explicit,
}

/// Beam width per search depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamSchedule {
    widths: Vec<usize>,
    kind: ScheduleKind,
    #[serde(default)]
    floor: usize,
}

impl BeamSchedule {
    pub fn constant(width: usize, n: usize) -> Result<Self> {
        Self::checked(vec![width; n], ScheduleKind::Constant, 0)
    }

    pub fn explicit(widths: Vec<usize>) -> Result<Self> {
        Self::checked(widths, ScheduleKind::Explicit, 0)
    }

    /// `[w, w/2, w/4, ...]`, never below `floor_min`.
    pub fn halving(start: usize, n: usize, floor_min: usize) -> Result<Self> {
        let widths = (0..n)
            .map(|i| {
                let halved = if i >= usize::BITS as usize { 0 } else { start >> i };
                halved.max(floor_min)
            })
            .collect();
        Self::checked(widths, ScheduleKind::Halving, floor_min)
    }

    fn checked(widths: Vec<usize>, kind: ScheduleKind, floor: usize) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::InvalidConfig("empty beam schedule".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidConfig("beam width 0".into()));
        }
        Ok(Self { widths, kind, floor })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    /// The same schedule family for a search of `n` new tokens.
    pub fn resized(&self, n: usize) -> Result<Self> {
        match self.kind {
            ScheduleKind::Constant => Self::constant(self.widths[0], n),
            ScheduleKind::Halving => Self::halving(self.widths[0], n, self.floor),
            ScheduleKind::Explicit => {
                let w = self.widths.get(..n).ok_or_else(|| {
                    Error::InvalidConfig(format!("explicit schedule has {} widths, need {n}", self.len()))
                })?;
                Self::explicit(w.to_vec())
            }
        }
    }
}

/// Halving schedule starting at the vocabulary size.
pub fn halving_schedule(vocab_size: usize, n: usize, floor_min: usize) -> Result<BeamSchedule> {
    BeamSchedule::halving(vocab_size, n, floor_min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Number of new tokens to generate after the prompt.
    pub length: usize,
    pub schedule: BeamSchedule,
    pub scoring: Scoring,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub prompt: Vec<TokenId>,
    #[serde(default = "one")]
    pub groups: usize,
}

fn default_eps() -> f64 {
    DEFAULT_REL_EPS
}

fn one() -> usize {
    1
}

impl SearchConfig {
    pub fn new(length: usize, schedule: BeamSchedule, scoring: Scoring) -> Self {
        Self { length, schedule, scoring, eps: DEFAULT_REL_EPS, prompt: Vec::new(), groups: 1 }
    }

    pub fn with_prompt(mut self, prompt: Vec<TokenId>) -> Self {
        self.prompt = prompt;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.length < 1 {
            return Err(Error::InvalidConfig("search length must be at least 1".into()));
        }
        if self.schedule.len() != self.length {
            return Err(Error::InvalidConfig(format!(
                "schedule has {} widths for a search of length {}",
                self.schedule.len(),
                self.length
            )));
        }
        if self.groups < 1 {
            return Err(Error::InvalidConfig("groups must be at least 1".into()));
        }
        if self.scoring == Scoring::Relative && (self.eps.is_nan() || self.eps <= 0.0) {
            return Err(Error::InvalidConfig("relative eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-token objective driving the search.
pub trait StepScorer: Sync {
    /// Contribution of every token id (indexed by id) after `prefix`.
    fn contributions(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
    fn kind(&self) -> ScoreKind;
    fn searchable(&self) -> Vec<TokenId>;
}

/// Differential score between two snapshots.
pub struct Differential<'a> {
    pub base: &'a dyn ModelOracle,
    pub updated: &'a dyn ModelOracle,
    pub scoring: Scoring,
    pub eps: f64,
}

impl<'a> Differential<'a> {
    pub fn new(base: &'a dyn ModelOracle, updated: &'a dyn ModelOracle, scoring: Scoring, eps: f64) -> Result<Self> {
        base.vocab().ensure_compatible(updated.vocab())?;
        Ok(Self { base, updated, scoring, eps })
    }
}

impl StepScorer for Differential<'_> {
    fn contributions(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let p = self.base.next_dist(prefix)?;
        let q = self.updated.next_dist(prefix)?;
        if p.len() != q.len() {
            return Err(Error::VocabMismatch("distribution lengths differ".into()));
        }
        Ok(p.probs()
            .iter()
            .zip(q.probs())
            .map(|(&a, &b)| contribution(a, b, self.scoring, self.eps))
            .collect())
    }

    fn kind(&self) -> ScoreKind {
        self.scoring.into()
    }

    fn searchable(&self) -> Vec<TokenId> {
        self.base.vocab().searchable_ids()
    }
}

/// Log-probability under one model (single-snapshot extraction).
pub struct LogLikelihood<'a> {
    pub model: &'a dyn ModelOracle,
}

impl StepScorer for LogLikelihood<'_> {
    fn contributions(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.model.next_dist(prefix)?.log_probs())
    }

    fn kind(&self) -> ScoreKind {
        ScoreKind::LogProb
    }

    fn searchable(&self) -> Vec<TokenId> {
        self.model.vocab().searchable_ids()
    }
}

#[derive(Clone, Debug)]
struct Beam {
    ext: Vec<TokenId>,
    per_token: Vec<f64>,
    score: f64,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    score: f64,
    parent: usize,
    token: TokenId,
}

impl Candidate {
    fn key(&self) -> (usize, TokenId) {
        (self.parent, self.token)
    }
}

// Greater means worse, so a max-heap keeps the worst survivor on top.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.key().cmp(&other.key()))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

struct TopK {
    cap: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(cap: usize) -> Self {
        Self { cap, heap: BinaryHeap::with_capacity(cap.min(1 << 20) + 1) }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.cap {
            self.heap.push(c);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c < *worst {
                *worst = c;
            }
        }
    }

    #[cfg(feature = "parallel")]
    fn merge(mut self, other: TopK) -> TopK {
        for c in other.heap {
            self.offer(c);
        }
        self
    }
}

/// Kept candidates and the contribution vectors of the parents they extend.
type Expansion = (TopK, Vec<(usize, Vec<f64>)>);

fn expand(
    scorer: &dyn StepScorer,
    prompt: &[TokenId],
    parents: &[Beam],
    range: std::ops::Range<usize>,
    allowed: &[TokenId],
    width: usize,
) -> Result<Expansion> {
    let mut top = TopK::new(width);
    let mut kept_contribs = Vec::new();
    let mut prefix = prompt.to_vec();
    for pi in range {
        let parent = &parents[pi];
        prefix.truncate(prompt.len());
        prefix.extend_from_slice(&parent.ext);
        let c = scorer.contributions(&prefix)?;
        for &t in allowed {
            top.offer(Candidate { score: parent.score + c[t as usize], parent: pi, token: t });
        }
        kept_contribs.push((pi, c));
    }
    Ok((top, kept_contribs))
}

fn run_beam(
    scorer: &dyn StepScorer,
    prompt: &[TokenId],
    widths: &[usize],
    universe: &[TokenId],
    first: &[TokenId],
) -> Result<Vec<Beam>> {
    let mut beams = vec![Beam { ext: Vec::new(), per_token: Vec::new(), score: 0.0 }];
    for (depth, &width) in widths.iter().enumerate() {
        let allowed = if depth == 0 { first } else { universe };
        let (top, contribs) = expand_all(scorer, prompt, &beams, allowed, width)?;
        let mut chosen: Vec<Candidate> = top.heap.into_vec();
        // (parent, token) order is lexicographic order of the extended sequences.
        chosen.sort_unstable_by_key(Candidate::key);
        let lookup = |pi: usize| -> &Vec<f64> {
            let i = contribs.binary_search_by_key(&pi, |(p, _)| *p).expect("parent was expanded");
            &contribs[i].1
        };
        beams = chosen
            .into_iter()
            .map(|c| {
                let parent = &beams[c.parent];
                let mut ext = parent.ext.clone();
                ext.push(c.token);
                let mut per_token = parent.per_token.clone();
                per_token.push(lookup(c.parent)[c.token as usize]);
                Beam { ext, per_token, score: c.score }
            })
            .collect();
    }
    Ok(beams)
}

#[cfg(feature = "parallel")]
fn expand_all(
    scorer: &dyn StepScorer,
    prompt: &[TokenId],
    parents: &[Beam],
    allowed: &[TokenId],
    width: usize,
) -> Result<Expansion> {
    use rayon::prelude::*;
    let threads = rayon::current_num_threads().max(1);
    let chunk = parents.len().div_ceil(threads * 4).max(1);
    let parts: Vec<Expansion> = (0..parents.len())
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| expand(scorer, prompt, parents, start..(start + chunk).min(parents.len()), allowed, width))
        .collect::<Result<_>>()?;
    let mut top = TopK::new(width);
    let mut contribs = Vec::with_capacity(parents.len());
    for (t, c) in parts {
        top = top.merge(t);
        contribs.extend(c);
    }
    Ok((top, contribs))
}

#[cfg(not(feature = "parallel"))]
fn expand_all(
    scorer: &dyn StepScorer,
    prompt: &[TokenId],
    parents: &[Beam],
    allowed: &[TokenId],
    width: usize,
) -> Result<Expansion> {
    expand(scorer, prompt, parents, 0..parents.len(), allowed, width)
}

fn finish(beams: Vec<Beam>, prompt: &[TokenId], kind: ScoreKind) -> Vec<ScoredSeq> {
    let mut out: Vec<ScoredSeq> = beams
        .into_iter()
        .map(|b| {
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(&b.ext);
            let mut per_token = vec![0.0; prompt.len()];
            per_token.extend_from_slice(&b.per_token);
            ScoredSeq { seq, score: b.score, per_token, kind }
        })
        .collect();
    sort_results(&mut out);
    out
}

/// Score descending, then token ids ascending.
pub fn sort_results(results: &mut [ScoredSeq]) {
    results.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.seq.cmp(&b.seq)));
}

/// Beam search with an arbitrary objective.
pub fn beam_search_with(scorer: &dyn StepScorer, config: &SearchConfig) -> Result<Vec<ScoredSeq>> {
    config.validate()?;
    let universe = scorer.searchable();
    let beams = run_beam(scorer, &config.prompt, config.schedule.widths(), &universe, &universe)?;
    Ok(finish(beams, &config.prompt, scorer.kind()))
}

/// Differential-score beam search; results sorted by score descending.
pub fn beam_search(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    config: &SearchConfig,
) -> Result<Vec<ScoredSeq>> {
    let scorer = Differential::new(base, updated, config.scoring, config.eps)?;
    beam_search_with(&scorer, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    /// 1-based; group 1 holds the best single tokens.
    pub group: usize,
    pub seeds: Vec<TokenId>,
    pub results: Vec<ScoredSeq>,
}

/// Split the first-step tokens into `groups` contiguous blocks of the
/// single-token score ranking (best first); block sizes differ by at most one.
pub fn group_seeds(scorer: &dyn StepScorer, prompt: &[TokenId], groups: usize) -> Result<Vec<Vec<TokenId>>> {
    let universe = scorer.searchable();
    if groups < 1 || groups > universe.len() {
        return Err(Error::InvalidConfig(format!(
            "{groups} groups for {} searchable tokens",
            universe.len()
        )));
    }
    let c = scorer.contributions(prompt)?;
    let mut ranked = universe;
    ranked.sort_by(|&a, &b| c[b as usize].total_cmp(&c[a as usize]).then(a.cmp(&b)));
    let (q, r) = (ranked.len() / groups, ranked.len() % groups);
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let size = q + usize::from(g < r);
        let mut block = ranked[start..start + size].to_vec();
        block.sort_unstable();
        out.push(block);
        start += size;
    }
    Ok(out)
}

pub fn group_beam_search_with(scorer: &dyn StepScorer, config: &SearchConfig) -> Result<Vec<GroupResult>> {
    config.validate()?;
    let universe = scorer.searchable();
    let seeds = group_seeds(scorer, &config.prompt, config.groups)?;
    seeds
        .into_iter()
        .enumerate()
        .map(|(g, block)| {
            let beams = run_beam(scorer, &config.prompt, config.schedule.widths(), &universe, &block)?;
            Ok(GroupResult { group: g + 1, seeds: block, results: finish(beams, &config.prompt, scorer.kind()) })
        })
        .collect()
}

/// Independent beam searches, one per quantile block of single-token scores.
pub fn group_beam_search(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    config: &SearchConfig,
) -> Result<Vec<GroupResult>> {
    let scorer = Differential::new(base, updated, config.scoring, config.eps)?;
    group_beam_search_with(&scorer, config)
}

/// Plain search when `groups == 1`, otherwise the union of all group results.
pub fn search_all(scorer: &dyn StepScorer, config: &SearchConfig) -> Result<Vec<ScoredSeq>> {
    if config.groups == 1 {
        return beam_search_with(scorer, config);
    }
    let mut all: Vec<ScoredSeq> = group_beam_search_with(scorer, config)?
        .into_iter()
        .flat_map(|g| g.results)
        .collect();
    sort_results(&mut all);
    Ok(all)
}

/// Lower-bound rank of `seq` within the union of all group results.
pub fn locate_in_groups(groups: &[GroupResult], seq: &[TokenId]) -> Option<RankEstimate> {
    let hit = groups.iter().flat_map(|g| &g.results).find(|r| r.seq == seq)?;
    let value = groups.iter().flat_map(|g| &g.results).filter(|r| r.score > hit.score).count() as u64;
    Some(RankEstimate { value, kind: crate::metrics::RankKind::LowerBound })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixRecovery {
    pub prefix_len: usize,
    /// `None` when the phrase was not among the search results; this is not an
    /// upper bound on its rank.
    pub rank: Option<RankEstimate>,
    pub results: usize,
}

/// For every prefix length `i < |phrase|`, search with `phrase[..i]` as the
/// prompt for the remaining tokens and report where the phrase landed.
pub fn prefix_recovery_search(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    phrase: &[TokenId],
    config: &SearchConfig,
) -> Result<Vec<PrefixRecovery>> {
    if phrase.len() < 2 {
        return Err(Error::InvalidConfig("prefix recovery needs a phrase of at least 2 tokens".into()));
    }
    let scorer = Differential::new(base, updated, config.scoring, config.eps)?;
    (0..phrase.len())
        .map(|i| {
            let n = phrase.len() - i;
            let mut cfg = config.clone();
            cfg.prompt = phrase[..i].to_vec();
            cfg.length = n;
            cfg.schedule = config.schedule.resized(n)?;
            cfg.groups = config.groups.min(scorer.searchable().len());
            let results = search_all(&scorer, &cfg)?;
            Ok(PrefixRecovery { prefix_len: i, rank: locate_rank(&results, phrase), results: results.len() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::FixedOracle;
    use crate::vocab::Vocabulary;

    const A: TokenId = 3;
    const B: TokenId = 4;

    fn toy() -> (FixedOracle, FixedOracle) {
        let v = Vocabulary::with_words(&["a", "b"]).unwrap();
        let m = FixedOracle::uniform_searchable(v.clone());
        let u = FixedOracle::new(v, vec![0.0, 0.0, 0.0, 0.8, 0.2]).unwrap();
        (m, u)
    }

    #[test]
    fn halving_examples() {
        assert_eq!(halving_schedule(16, 3, 1).unwrap().widths(), &[16, 8, 4]);
        assert_eq!(halving_schedule(16, 6, 4).unwrap().widths(), &[16, 8, 4, 4, 4, 4]);
        assert_eq!(halving_schedule(16, 1, DEFAULT_HALVING_FLOOR).unwrap().widths(), &[64]);
        assert_eq!(halving_schedule(10_000, 1, DEFAULT_HALVING_FLOOR).unwrap().widths(), &[10_000]);
    }

    #[test]
    fn schedule_errors() {
        assert!(BeamSchedule::constant(0, 3).is_err());
        assert!(BeamSchedule::explicit(vec![]).is_err());
        assert!(BeamSchedule::explicit(vec![2, 0]).is_err());
        let (m, u) = toy();
        let cfg = SearchConfig::new(3, BeamSchedule::constant(2, 2).unwrap(), Scoring::Absolute);
        assert!(beam_search(&m, &u, &cfg).is_err());
    }

    #[test]
    fn exhaustive_width_lists_all_pairs() {
        let (m, u) = toy();
        let cfg = SearchConfig::new(2, BeamSchedule::constant(4, 2).unwrap(), Scoring::Absolute);
        let r = beam_search(&m, &u, &cfg).unwrap();
        let seqs: Vec<_> = r.iter().map(|s| s.seq.clone()).collect();
        assert_eq!(seqs, vec![vec![A, A], vec![A, B], vec![B, A], vec![B, B]]);
        let expected = [0.6, 0.0, 0.0, -0.6];
        for (s, e) in r.iter().zip(expected) {
            assert!((s.score - e).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_width_one() {
        let (m, u) = toy();
        let cfg = SearchConfig::new(2, BeamSchedule::constant(1, 2).unwrap(), Scoring::Absolute);
        let r = beam_search(&m, &u, &cfg).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].seq, vec![A, A]);
        assert!((r[0].score - 0.6).abs() < 1e-12);
    }

    #[test]
    fn identical_models_order_lexicographically() {
        let (m, _) = toy();
        let cfg = SearchConfig::new(2, BeamSchedule::constant(3, 2).unwrap(), Scoring::Relative);
        let r = beam_search(&m, &m, &cfg).unwrap();
        assert!(r.iter().all(|s| s.score == 0.0));
        let seqs: Vec<_> = r.iter().map(|s| s.seq.clone()).collect();
        assert_eq!(seqs, vec![vec![A, A], vec![A, B], vec![B, A]]);
    }

    #[test]
    fn prompt_positions_score_zero() {
        let (m, u) = toy();
        let cfg = SearchConfig::new(1, BeamSchedule::constant(2, 1).unwrap(), Scoring::Absolute).with_prompt(vec![B]);
        let r = beam_search(&m, &u, &cfg).unwrap();
        assert_eq!(r[0].seq, vec![B, A]);
        assert_eq!(r[0].per_token[0], 0.0);
        assert!((r[0].score - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_group_matches_plain_search() {
        let (m, u) = toy();
        let cfg = SearchConfig::new(2, BeamSchedule::constant(3, 2).unwrap(), Scoring::Absolute);
        let g = group_beam_search(&m, &u, &cfg).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].results, beam_search(&m, &u, &cfg).unwrap());
        assert!(group_beam_search(&m, &u, &cfg.clone().with_groups(3)).is_err());
    }

    #[test]
    fn two_groups_split_best_and_worst() {
        let (m, u) = toy();
        let cfg = SearchConfig::new(2, BeamSchedule::constant(4, 2).unwrap(), Scoring::Absolute).with_groups(2);
        let g = group_beam_search(&m, &u, &cfg).unwrap();
        assert_eq!(g[0].seeds, vec![A]);
        assert_eq!(g[1].seeds, vec![B]);
        assert!(g[0].results.iter().all(|s| s.seq[0] == A));
        assert!(g[1].results.iter().all(|s| s.seq[0] == B));
    }

    struct Table {
        vocab: Vocabulary,
        rows: Vec<(Vec<TokenId>, [f64; 4])>,
    }

    impl ModelOracle for Table {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }
        fn next_dist(&self, prefix: &[TokenId]) -> Result<crate::oracle::ProbDist> {
            let row = self.rows.iter().find(|(p, _)| p == prefix).map_or([0.25; 4], |r| r.1);
            let mut probs = vec![0.0; 3];
            probs.extend(row);
            Ok(crate::oracle::ProbDist::from_vec(probs))
        }
    }

    #[test]
    fn wider_beam_can_lose_the_best_path() {
        let v = Vocabulary::with_words(&["a", "b", "c", "d"]).unwrap();
        let m = FixedOracle::uniform_searchable(v.clone());
        let u = Table {
            vocab: v,
            rows: vec![
                (vec![], [0.45, 0.4, 0.15, 0.0]),
                (vec![B], [0.4, 0.4, 0.1, 0.1]),
                (vec![A, A], [1.0, 0.0, 0.0, 0.0]),
            ],
        };
        let top = |widths: Vec<usize>| {
            let cfg = SearchConfig::new(3, BeamSchedule::explicit(widths).unwrap(), Scoring::Absolute);
            beam_search(&m, &u, &cfg).unwrap()[0].clone()
        };
        let narrow = top(vec![1, 1, 1]);
        let wide = top(vec![2, 2, 2]);
        assert_eq!(narrow.seq, vec![A, A, A]);
        assert!((narrow.score - 0.95).abs() < 1e-12);
        assert!(wide.score < narrow.score);
    }
}
