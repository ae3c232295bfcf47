//! Canary phrases, controlled insertion and the snapshot experiment harness.
//!
//! A canary is a phrase absent from the training data whose tokens come from
//! chosen corpus-frequency quintiles. It is inserted into the update data a
//! number of times proportional to the corpus size, two snapshots are built,
//! and the canary's differential score and search rank are measured.

use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    percentile, random_phrase_scores, score_with_prompt, token_diff_given_prefix, RankEstimate, RankKind, Scoring,
    DEFAULT_REL_EPS,
};
use crate::ngram::{train_ngram, NGramModel, DEFAULT_ADD_K};
use crate::oracle::{corpus_perplexity, interpolate, ModelOracle};
use crate::report::{phrase_groups, PhraseGroup, REPORT_VERSION};
use crate::search::{
    group_beam_search, locate_in_groups, BeamSchedule, SearchConfig, DEFAULT_HALVING_FLOOR,
};
use crate::vocab::{build_vocab, split_corpus, TokenId, Vocabulary};

pub const QUINTILES: u8 = 5;
pub const DEFAULT_CANARY_LEN: usize = 5;
pub const MAX_CANARY_ATTEMPTS: usize = 1000;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Corpus-frequency quintile of every searchable token; 1 is most frequent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyQuintiles {
    /// Indexed by token id; 0 for special tokens.
    assignment: Vec<u8>,
    blocks: Vec<Vec<TokenId>>,
}

impl FrequencyQuintiles {
    pub fn quintile(&self, id: TokenId) -> Option<u8> {
        self.assignment.get(id as usize).copied().filter(|&q| q > 0)
    }

    /// Tokens of quintile `q` (1..=5), ascending id.
    pub fn block(&self, q: u8) -> &[TokenId] {
        &self.blocks[usize::from(q) - 1]
    }
}

/// Rank searchable tokens by corpus frequency (ties by id) and cut the ranking
/// into five blocks whose sizes differ by at most one.
pub fn frequency_quintiles(corpus: &[Vec<TokenId>], vocab: &Vocabulary) -> Result<FrequencyQuintiles> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    let mut counts = vec![0u64; vocab.len()];
    for sent in corpus {
        vocab.check_seq(sent)?;
        for &t in sent {
            counts[t as usize] += 1;
        }
    }
    let mut ranked = vocab.searchable_ids();
    let n = ranked.len();
    if n < usize::from(QUINTILES) {
        return Err(Error::InvalidConfig(format!("{n} searchable tokens cannot form 5 quintiles")));
    }
    ranked.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    let q = usize::from(QUINTILES);
    let (size, extra) = (n / q, n % q);
    let mut assignment = vec![0u8; vocab.len()];
    let mut blocks = Vec::with_capacity(q);
    let mut start = 0;
    for b in 0..q {
        let len = size + usize::from(b < extra);
        let mut block = ranked[start..start + len].to_vec();
        for &t in &block {
            assignment[t as usize] = b as u8 + 1;
        }
        block.sort_unstable();
        blocks.push(block);
        start += len;
    }
    Ok(FrequencyQuintiles { assignment, blocks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    AllLow,
    Mixed,
    LowToHigh,
    HighToLow,
}

impl Pattern {
    pub fn label(self) -> &'static str {
        match self {
            Pattern::AllLow => "all_low",
            Pattern::Mixed => "mixed",
            Pattern::LowToHigh => "low_to_high",
            Pattern::HighToLow => "high_to_low",
        }
    }

    /// Whether `quintiles` (one per canary token) realize this pattern.
    pub fn accepts(self, quintiles: &[u8]) -> bool {
        match self {
            Pattern::AllLow => !quintiles.is_empty() && quintiles.iter().all(|&q| q == QUINTILES),
            Pattern::Mixed => {
                let mut s = quintiles.to_vec();
                s.sort_unstable();
                s == [1, 2, 3, 4, 5]
            }
            Pattern::LowToHigh => quintiles == [5, 4, 3, 2, 1],
            Pattern::HighToLow => quintiles == [1, 2, 3, 4, 5],
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "all_low" => Ok(Pattern::AllLow),
            "mixed" => Ok(Pattern::Mixed),
            "low_to_high" => Ok(Pattern::LowToHigh),
            "high_to_low" => Ok(Pattern::HighToLow),
            _ => Err(Error::InvalidConfig(format!("unknown canary pattern {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanarySpec {
    #[serde(default = "default_len")]
    pub length: usize,
    pub pattern: Pattern,
    /// Falls back to the experiment seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Optional word list per slot; each slot draws from its list intersected
    /// with the slot's quintile.
    #[serde(default)]
    pub template: Option<Vec<Vec<String>>>,
}

fn default_len() -> usize {
    DEFAULT_CANARY_LEN
}

impl CanarySpec {
    pub fn new(pattern: Pattern, seed: u64) -> Self {
        Self { length: DEFAULT_CANARY_LEN, pattern, seed: Some(seed), template: None }
    }

    fn validate(&self) -> Result<()> {
        if self.length < 1 {
            return Err(Error::InvalidConfig("canary length must be at least 1".into()));
        }
        if self.pattern != Pattern::AllLow && self.length != usize::from(QUINTILES) {
            return Err(Error::InvalidConfig(format!(
                "pattern {} needs exactly 5 tokens, got {}",
                self.pattern.label(),
                self.length
            )));
        }
        if let Some(t) = &self.template {
            if t.len() != self.length {
                return Err(Error::InvalidConfig(format!(
                    "template has {} slots for a canary of length {}",
                    t.len(),
                    self.length
                )));
            }
        }
        Ok(())
    }
}

/// Draw a phrase realizing `spec.pattern` that does not occur in `corpus`.
pub fn generate_canary(
    spec: &CanarySpec,
    quintiles: &FrequencyQuintiles,
    corpus: &[Vec<TokenId>],
    vocab: &Vocabulary,
) -> Result<Vec<TokenId>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(0));
    let slots: Vec<u8> = match spec.pattern {
        Pattern::AllLow => vec![QUINTILES; spec.length],
        Pattern::HighToLow => vec![1, 2, 3, 4, 5],
        Pattern::LowToHigh => vec![5, 4, 3, 2, 1],
        Pattern::Mixed => {
            let mut p = vec![1, 2, 3, 4, 5];
            p.shuffle(&mut rng);
            p
        }
    };
    let candidates: Vec<Vec<TokenId>> = slots
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let block = quintiles.block(q);
            let pool: Vec<TokenId> = match &spec.template {
                None => block.to_vec(),
                Some(t) => {
                    let mut ids: Vec<TokenId> = t[i]
                        .iter()
                        .filter_map(|w| vocab.id(&w.to_lowercase()))
                        .filter(|id| block.binary_search(id).is_ok())
                        .collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids
                }
            };
            if pool.is_empty() {
                return Err(Error::InvalidConfig(format!("no token available for slot {i} (quintile {q})")));
            }
            Ok(pool)
        })
        .collect::<Result<_>>()?;
    for _ in 0..MAX_CANARY_ATTEMPTS {
        let phrase: Vec<TokenId> = candidates.iter().map(|c| c[rng.random_range(0..c.len())]).collect();
        if count_occurrences(corpus, &phrase) == 0 {
            return Ok(phrase);
        }
    }
    Err(Error::CanaryNotFound(MAX_CANARY_ATTEMPTS))
}

/// Contiguous occurrences of `phrase` inside sentences.
pub fn count_occurrences(corpus: &[Vec<TokenId>], phrase: &[TokenId]) -> usize {
    if phrase.is_empty() {
        return 0;
    }
    corpus.iter().map(|s| s.windows(phrase.len()).filter(|w| *w == phrase).count()).sum()
}

pub fn count_tokens<T>(corpus: &[Vec<T>]) -> usize {
    corpus.iter().map(Vec::len).sum()
}

/// `round(tokens / (rate * len))`, where `rate` is corpus tokens per canary token.
pub fn insertion_count(tokens: usize, rate: u64, len: usize) -> Result<usize> {
    if rate < 1 || len < 1 {
        return Err(Error::InvalidConfig("insertion rate and canary length must be positive".into()));
    }
    let k = (tokens as f64 / (rate as f64 * len as f64)).round() as usize;
    if k == 0 {
        return Err(Error::ZeroInsertions { rate, tokens });
    }
    Ok(k)
}

/// `corpus` with `k` copies of `canary` as standalone sentences, placed at the
/// midpoints of `k` equal spans of lines.
pub fn insert_copies<T: Clone>(corpus: &[Vec<T>], canary: &[T], k: usize) -> Vec<Vec<T>> {
    let lines = corpus.len();
    let positions: Vec<usize> = (0..k).map(|j| (2 * j + 1) * lines / (2 * k)).collect();
    let mut out = Vec::with_capacity(lines + k);
    let mut next = 0;
    for (i, sent) in corpus.iter().enumerate() {
        while next < k && positions[next] == i {
            out.push(canary.to_vec());
            next += 1;
        }
        out.push(sent.clone());
    }
    out.extend(std::iter::repeat_n(canary.to_vec(), k - next));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inserted<T> {
    pub corpus: Vec<Vec<T>>,
    pub k: usize,
}

/// Insert `canary` at token rate `1:rate` relative to `corpus`.
pub fn insert_canary<T: Clone>(corpus: &[Vec<T>], canary: &[T], rate: u64) -> Result<Inserted<T>> {
    if rate < canary.len() as u64 {
        return Err(Error::InvalidConfig(format!("rate {rate} is below the canary length {}", canary.len())));
    }
    let k = insertion_count(count_tokens(corpus), rate, canary.len())?;
    Ok(Inserted { corpus: insert_copies(corpus, canary, k), k })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub prefix_len: usize,
    pub token_diff: f64,
}

/// Absolute score of each token of `phrase` given the preceding tokens.
pub fn prefix_curve(base: &dyn ModelOracle, updated: &dyn ModelOracle, phrase: &[TokenId]) -> Result<Vec<CurvePoint>> {
    if phrase.len() < 2 {
        return Err(Error::InvalidConfig("prefix curve needs at least 2 tokens".into()));
    }
    base.vocab().ensure_compatible(updated.vocab())?;
    (0..phrase.len())
        .map(|i| {
            Ok(CurvePoint {
                prefix_len: i,
                token_diff: token_diff_given_prefix(base, updated, &phrase[..i], phrase[i])?,
            })
        })
        .collect()
}

/// How the updated snapshot is obtained from the update data `U`
/// (`D_extra` plus the canary copies).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Training {
    /// Trained from scratch on `D_orig` and `U`.
    Retrain,
    /// `interpolate(M, train(U), lambda)`.
    FinetuneProxy {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    /// The finetune proxy, interpolated once more with `train(D'_extra)`.
    TwoStageProxy {
        #[serde(default = "default_lambda")]
        lambda1: f64,
        #[serde(default = "default_lambda")]
        lambda2: f64,
    },
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Training {
    pub fn label(&self) -> String {
        match self {
            Training::Retrain => "retrain".to_string(),
            Training::FinetuneProxy { lambda } => format!("finetune_proxy({lambda})"),
            Training::TwoStageProxy { lambda1, lambda2 } => format!("two_stage_proxy({lambda1},{lambda2})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleChoice {
    Halving,
    Constant,
}

/// Search parameters resolved against the vocabulary at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    #[serde(default = "halving")]
    pub schedule: ScheduleChoice,
    /// Initial width for halving (default: number of searchable tokens);
    /// every width for constant.
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "default_floor")]
    pub floor: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default = "absolute")]
    pub scoring: Scoring,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Phrases kept per group in the report.
    #[serde(default = "default_top")]
    pub top: usize,
}

fn halving() -> ScheduleChoice {
    ScheduleChoice::Halving
}
fn default_floor() -> usize {
    DEFAULT_HALVING_FLOOR
}
fn one() -> usize {
    1
}
fn absolute() -> Scoring {
    Scoring::Absolute
}
fn default_eps() -> f64 {
    DEFAULT_REL_EPS
}
fn default_top() -> usize {
    20
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            schedule: ScheduleChoice::Halving,
            width: None,
            floor: DEFAULT_HALVING_FLOOR,
            groups: 1,
            scoring: Scoring::Absolute,
            eps: DEFAULT_REL_EPS,
            top: default_top(),
        }
    }
}

impl SearchSettings {
    pub fn resolve(&self, vocab: &Vocabulary, length: usize) -> Result<SearchConfig> {
        let searchable = vocab.searchable_ids().len();
        let schedule = match self.schedule {
            ScheduleChoice::Halving => BeamSchedule::halving(self.width.unwrap_or(searchable), length, self.floor)?,
            ScheduleChoice::Constant => {
                let w = self
                    .width
                    .ok_or_else(|| Error::InvalidConfig("constant schedule needs a width".into()))?;
                BeamSchedule::constant(w, length)?
            }
        };
        let mut cfg = SearchConfig::new(length, schedule, self.scoring).with_groups(self.groups);
        cfg.eps = self.eps;
        Ok(cfg)
    }
}

/// Everything needed to repeat one canary experiment.
///
/// Non-held-out lines are split contiguously: the first `orig_share` form
/// `D_orig`, the remainder is halved into the `D_extra` pool and `D'_extra`.
/// An extra fraction `f` takes the first `f * |D_orig|` lines of the pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_add_k")]
    pub add_k: f64,
    #[serde(default = "default_orig_share")]
    pub orig_share: f64,
    #[serde(default = "default_heldout_share")]
    pub heldout_share: f64,
    #[serde(default = "default_fractions")]
    pub extra_fractions: Vec<f64>,
    pub canary: CanarySpec,
    /// Corpus tokens per canary token (10000 means 1:10K).
    pub insertion_rate: u64,
    /// Fixed insertion count instead of the rate-derived one; 0 is allowed.
    #[serde(default)]
    pub insertions_override: Option<usize>,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Training>,
    #[serde(default)]
    pub search: Option<SearchSettings>,
    /// Size of the random-phrase baseline sample (0 disables it).
    #[serde(default)]
    pub random_phrases: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab_size() -> usize {
    10_000
}
fn default_order() -> usize {
    3
}
fn default_add_k() -> f64 {
    DEFAULT_ADD_K
}
fn default_orig_share() -> f64 {
    1.0 / 3.0
}
fn default_heldout_share() -> f64 {
    0.02
}
fn default_fractions() -> Vec<f64> {
    vec![0.0]
}
fn default_scenarios() -> Vec<Training> {
    vec![Training::Retrain]
}

impl ExperimentConfig {
    pub fn new(corpus: impl Into<PathBuf>, canary: CanarySpec, insertion_rate: u64) -> Self {
        Self {
            corpus: corpus.into(),
            vocab_size: default_vocab_size(),
            order: default_order(),
            add_k: default_add_k(),
            orig_share: default_orig_share(),
            heldout_share: default_heldout_share(),
            extra_fractions: default_fractions(),
            canary,
            insertion_rate,
            insertions_override: None,
            scenarios: default_scenarios(),
            search: None,
            random_phrases: 0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.orig_share) || self.orig_share == 0.0 || !unit(self.heldout_share) || self.heldout_share >= 1.0 {
            return Err(Error::InvalidConfig("orig_share must be in (0, 1] and heldout_share in [0, 1)".into()));
        }
        if self.extra_fractions.is_empty() || !self.extra_fractions.iter().all(|&f| f >= 0.0 && f.is_finite()) {
            return Err(Error::InvalidConfig("extra fractions must be non-negative".into()));
        }
        if self.insertion_rate < 1 {
            return Err(Error::InvalidConfig("insertion rate must be at least 1".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::InvalidConfig("no training scenario".into()));
        }
        for s in &self.scenarios {
            let lambdas: Vec<f64> = match *s {
                Training::Retrain => vec![],
                Training::FinetuneProxy { lambda } => vec![lambda],
                Training::TwoStageProxy { lambda1, lambda2 } => vec![lambda1, lambda2],
            };
            if let Some(&l) = lambdas.iter().find(|l| !unit(**l)) {
                return Err(Error::LambdaOutOfRange(l));
            }
        }
        self.canary.validate()
    }

    fn data_key(&self) -> (usize, usize, u64, u64, u64) {
        (
            self.vocab_size,
            self.order,
            self.add_k.to_bits(),
            self.orig_share.to_bits(),
            self.heldout_share.to_bits(),
        )
    }
}

/// Vocabulary, data split and base snapshot shared by experiments that differ
/// only in canary, rate, scenario or search parameters.
pub struct Workbench {
    key: (usize, usize, u64, u64, u64),
    vocab: Vocabulary,
    orig: Vec<Vec<TokenId>>,
    pool: Vec<Vec<TokenId>>,
    second: Vec<Vec<TokenId>>,
    heldout: Vec<Vec<TokenId>>,
    quintiles: FrequencyQuintiles,
    base: Arc<NGramModel>,
    base_ppl: f64,
}

impl Workbench {
    pub fn prepare(config: &ExperimentConfig, text: &str) -> Result<Self> {
        config.validate()?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n_held = (lines.len() as f64 * config.heldout_share).round() as usize;
        let (train_lines, held_lines) = lines.split_at(lines.len() - n_held);
        let joined = train_lines.join("\n");
        let words = split_corpus(&joined);
        let vocab = build_vocab(
            words.iter().flatten().map(String::as_str),
            config.vocab_size,
            [crate::vocab::BOS, crate::vocab::EOS, crate::vocab::UNK],
        )?;
        let train = vocab.tokenize_corpus(&joined);
        let heldout = vocab.tokenize_corpus(&held_lines.join("\n"));
        let n_orig = ((train.len() as f64 * config.orig_share).round() as usize).clamp(1, train.len());
        let rest = train.len() - n_orig;
        let n_pool = rest.div_ceil(2);
        let mut it = train.into_iter();
        let orig: Vec<_> = it.by_ref().take(n_orig).collect();
        let pool: Vec<_> = it.by_ref().take(n_pool).collect();
        let second: Vec<_> = it.collect();
        let quintiles = frequency_quintiles(&orig, &vocab)?;
        let base = Arc::new(train_ngram(orig.iter().map(Vec::as_slice), &vocab, config.order, config.add_k)?);
        let base_ppl = if heldout.is_empty() { f64::NAN } else { corpus_perplexity(&*base, &heldout)? };
        Ok(Self { key: config.data_key(), vocab, orig, pool, second, heldout, quintiles, base, base_ppl })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn base(&self) -> &Arc<NGramModel> {
        &self.base
    }

    pub fn quintiles(&self) -> &FrequencyQuintiles {
        &self.quintiles
    }

    pub fn orig(&self) -> &[Vec<TokenId>] {
        &self.orig
    }

    fn canary(&self, config: &ExperimentConfig) -> Result<Vec<TokenId>> {
        let mut spec = config.canary.clone();
        spec.seed = Some(spec.seed.unwrap_or(config.seed));
        let all: Vec<Vec<TokenId>> =
            self.orig.iter().chain(&self.pool).chain(&self.second).cloned().collect();
        generate_canary(&spec, &self.quintiles, &all, &self.vocab)
    }

    fn check(&self, config: &ExperimentConfig) -> Result<()> {
        config.validate()?;
        if config.data_key() != self.key {
            return Err(Error::InvalidConfig("experiment data parameters differ from the prepared workbench".into()));
        }
        Ok(())
    }

    fn insertions(&self, config: &ExperimentConfig, canary: &[TokenId]) -> Result<usize> {
        match config.insertions_override {
            Some(k) => Ok(k),
            None => insertion_count(count_tokens(&self.orig), config.insertion_rate, canary.len()),
        }
    }

    /// Update data for extra fraction `fraction`: the first `fraction * |D_orig|`
    /// pool lines with `k` canary copies spread through them.
    fn update_data(&self, fraction: f64, canary: &[TokenId], k: usize) -> Result<Vec<Vec<TokenId>>> {
        let n_extra = (fraction * self.orig.len() as f64).round() as usize;
        if n_extra > self.pool.len() {
            return Err(Error::InvalidConfig(format!(
                "extra fraction {fraction} needs {n_extra} lines, the pool has {}",
                self.pool.len()
            )));
        }
        Ok(insert_copies(&self.pool[..n_extra], canary, k))
    }

    fn updated_model(
        &self,
        config: &ExperimentConfig,
        training: Training,
        update: &[Vec<TokenId>],
        update_model: &mut Option<Arc<dyn ModelOracle>>,
    ) -> Result<Arc<dyn ModelOracle>> {
        let base: Arc<dyn ModelOracle> = self.base.clone();
        let mut trained_update = || -> Result<Arc<dyn ModelOracle>> {
            if update_model.is_none() {
                let m = train_ngram(update.iter().map(Vec::as_slice), &self.vocab, config.order, config.add_k)?;
                *update_model = Some(Arc::new(m));
            }
            Ok(update_model.clone().expect("set above"))
        };
        Ok(match training {
            Training::Retrain => Arc::new(self.base.extended(update.iter().map(Vec::as_slice))?),
            Training::FinetuneProxy { lambda } => Arc::new(interpolate(base, trained_update()?, lambda)?),
            Training::TwoStageProxy { lambda1, lambda2 } => {
                let first = Arc::new(interpolate(base, trained_update()?, lambda1)?);
                let second =
                    train_ngram(self.second.iter().map(Vec::as_slice), &self.vocab, config.order, config.add_k)?;
                Arc::new(interpolate(first, Arc::new(second), lambda2)?)
            }
        })
    }

    /// The snapshot pair of one scenario, without measuring anything.
    pub fn snapshots(&self, config: &ExperimentConfig, fraction: f64, training: Training) -> Result<SnapshotPair> {
        self.check(config)?;
        let canary = self.canary(config)?;
        let k = self.insertions(config, &canary)?;
        let update = self.update_data(fraction, &canary, k)?;
        let updated = self.updated_model(config, training, &update, &mut None)?;
        Ok(SnapshotPair { base: self.base.clone(), updated, canary, k })
    }

    pub fn run(&self, config: &ExperimentConfig) -> Result<ExperimentReport> {
        self.check(config)?;
        let canary = self.canary(config)?;
        let k = self.insertions(config, &canary)?;
        let settings = config.search.clone();
        let eps = settings.as_ref().map_or(DEFAULT_REL_EPS, |s| s.eps);
        let random_sample = if config.random_phrases > 0 { Some(config.random_phrases) } else { None };
        let mut scenarios = Vec::new();
        for &fraction in &config.extra_fractions {
            let update = self.update_data(fraction, &canary, k)?;
            let mut update_model = None;
            for &training in &config.scenarios {
                let updated = self.updated_model(config, training, &update, &mut update_model)?;
                let label = if config.extra_fractions.len() > 1 || fraction != 0.0 {
                    format!("{}@{fraction}", training.label())
                } else {
                    training.label()
                };
                scenarios.push(self.measure(
                    label,
                    training,
                    fraction,
                    &*self.base,
                    &*updated,
                    &canary,
                    settings.as_ref(),
                    eps,
                    random_sample,
                    config.seed,
                )?);
            }
        }
        Ok(ExperimentReport {
            report_version: REPORT_VERSION,
            rate_unit: "corpus tokens per canary token".to_string(),
            config: config.clone(),
            canary: CanaryInfo {
                text: self.vocab.detokenize(&canary),
                quintiles: canary.iter().map(|&t| self.quintiles.quintile(t).unwrap_or(0)).collect(),
                ids: canary,
                pattern: config.canary.pattern,
            },
            k,
            orig_tokens: count_tokens(&self.orig),
            pool_tokens: count_tokens(&self.pool),
            second_tokens: count_tokens(&self.second),
            heldout_tokens: count_tokens(&self.heldout),
            scenarios,
            manifest: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn measure(
        &self,
        scenario: String,
        training: Training,
        extra_fraction: f64,
        base: &dyn ModelOracle,
        updated: &dyn ModelOracle,
        canary: &[TokenId],
        settings: Option<&SearchSettings>,
        eps: f64,
        random_sample: Option<usize>,
        seed: u64,
    ) -> Result<ScenarioResult> {
        let ds = score_with_prompt(base, updated, &[], canary, Scoring::Absolute, eps)?.score;
        let ds_rel = score_with_prompt(base, updated, &[], canary, Scoring::Relative, eps)?.score;
        let updated_ppl = if self.heldout.is_empty() { f64::NAN } else { corpus_perplexity(updated, &self.heldout)? };
        let (rank, extracted) = match settings {
            None => (None, Vec::new()),
            Some(s) => {
                let cfg = s.resolve(&self.vocab, canary.len())?;
                let groups = group_beam_search(base, updated, &cfg)?;
                (locate_in_groups(&groups, canary), phrase_groups(&groups, &self.vocab, s.top))
            }
        };
        let rank_kind = match (settings, rank) {
            (None, _) => "not_searched",
            (Some(_), None) => "absent",
            (Some(_), Some(r)) => match r.kind {
                RankKind::Exact => "exact",
                RankKind::LowerBound => "lower_bound",
            },
        };
        let random_baseline = match random_sample {
            None => None,
            Some(n) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scores = random_phrase_scores(base, updated, n, canary.len(), Scoring::Absolute, eps, &mut rng)?;
                Some(RandomBaseline {
                    n,
                    p95: percentile(&scores, 95.0),
                    p9999: percentile(&scores, 99.99),
                    max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
            }
        };
        Ok(ScenarioResult {
            scenario,
            training,
            extra_fraction,
            ds,
            ds_rel,
            rank_kind: rank_kind.to_string(),
            rank,
            base_ppl: self.base_ppl,
            updated_ppl,
            prefix_curve: prefix_curve(base, updated, canary)?,
            random_baseline,
            extracted,
        })
    }
}

/// Prepare a workbench for `config` from its corpus file and run it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(&config.corpus)?;
    Workbench::prepare(config, &text)?.run(config)
}

pub struct SnapshotPair {
    pub base: Arc<NGramModel>,
    pub updated: Arc<dyn ModelOracle>,
    pub canary: Vec<TokenId>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanaryInfo {
    pub text: String,
    pub ids: Vec<TokenId>,
    pub pattern: Pattern,
    pub quintiles: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub n: usize,
    pub p95: f64,
    pub p9999: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub training: Training,
    pub extra_fraction: f64,
    pub ds: f64,
    pub ds_rel: f64,
    pub rank_kind: String,
    pub rank: Option<RankEstimate>,
    pub base_ppl: f64,
    pub updated_ppl: f64,
    pub prefix_curve: Vec<CurvePoint>,
    pub random_baseline: Option<RandomBaseline>,
    pub extracted: Vec<PhraseGroup>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub report_version: u32,
    pub rate_unit: String,
    pub config: ExperimentConfig,
    pub canary: CanaryInfo,
    pub k: usize,
    pub orig_tokens: usize,
    pub pool_tokens: usize,
    pub second_tokens: usize,
    pub heldout_tokens: usize,
    pub scenarios: Vec<ScenarioResult>,
    #[serde(default)]
    pub manifest: Option<crate::report::RunManifest>,
}

pub const SUMMARY_COLUMNS: [&str; 10] =
    ["scenario", "pattern", "rate", "k", "ds", "ds_rel", "rank_kind", "rank", "base_ppl", "updated_ppl"];

impl ExperimentReport {
    /// One CSV row per scenario.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SUMMARY_COLUMNS)?;
        for s in &self.scenarios {
            out.write_record([
                s.scenario.clone(),
                self.canary.pattern.label().to_string(),
                self.config.insertion_rate.to_string(),
                self.k.to_string(),
                s.ds.to_string(),
                s.ds_rel.to_string(),
                s.rank_kind.clone(),
                s.rank.map(|r| r.value.to_string()).unwrap_or_default(),
                s.base_ppl.to_string(),
                s.updated_ppl.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
