//! Serialized report types shared by the attack and experiment harnesses.

use serde::{Deserialize, Serialize};

use crate::metrics::ScoredSeq;
use crate::search::GroupResult;
use crate::vocab::{TokenId, Vocabulary};

pub const REPORT_VERSION: u32 = 1;

/// How a run was produced: enough to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Which extraction produced a phrase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceLabel {
    FromBaseModel,
    FromUpdatedModel,
    FromSnapshotAttack,
}

impl SourceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceLabel::FromBaseModel => "from_base_model",
            SourceLabel::FromUpdatedModel => "from_updated_model",
            SourceLabel::FromSnapshotAttack => "from_snapshot_attack",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub ids: Vec<TokenId>,
    pub score: f64,
    pub per_token: Vec<f64>,
}

impl Phrase {
    pub fn from_scored(s: &ScoredSeq, vocab: &Vocabulary) -> Self {
        Self { text: vocab.detokenize(&s.seq), ids: s.seq.clone(), score: s.score, per_token: s.per_token.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseGroup {
    pub group: usize,
    pub phrases: Vec<Phrase>,
}

/// The first `top` phrases of every group.
pub fn phrase_groups(groups: &[GroupResult], vocab: &Vocabulary, top: usize) -> Vec<PhraseGroup> {
    groups
        .iter()
        .map(|g| PhraseGroup {
            group: g.group,
            phrases: g.results.iter().take(top).map(|s| Phrase::from_scored(s, vocab)).collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationInfo {
    pub k: usize,
    pub renormalized: bool,
}

/// Output of a single search over a pair of snapshots (or one model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub report_version: u32,
    pub source_label: SourceLabel,
    /// `abs`, `rel` or `logprob`.
    pub objective: String,
    pub base: String,
    pub updated: String,
    pub search: crate::search::SearchConfig,
    pub truncation: Option<TruncationInfo>,
    pub groups: Vec<PhraseGroup>,
    #[serde(default)]
    pub manifest: Option<RunManifest>,
}

impl AttackReport {
    pub fn phrases(&self) -> impl Iterator<Item = &Phrase> {
        self.groups.iter().flat_map(|g| g.phrases.iter())
    }
}
