//! Browser demo: train two n-gram snapshots from pasted text, score phrases
//! and extract the phrases the update exposes.
//!
//! The `Snapshots` methods return JSON strings; the `wasm_bindgen` wrappers
//! only convert errors.

use std::sync::Arc;

use serde::Serialize;
use snapdiff::canary::prefix_curve;
use snapdiff::metrics::{score_with_prompt, Scoring, DEFAULT_REL_EPS};
use snapdiff::ngram::{train_ngram, NGramModel};
use snapdiff::oracle::{ModelOracle, TruncatedOracle};
use snapdiff::report::phrase_groups;
use snapdiff::search::{group_beam_search, BeamSchedule, SearchConfig, DEFAULT_HALVING_FLOOR};
use snapdiff::vocab::build_vocab_from_text;
use wasm_bindgen::prelude::*;

pub struct Snapshots {
    base: Arc<NGramModel>,
    updated: Arc<NGramModel>,
}

#[derive(Serialize)]
struct Scored {
    tokens: Vec<String>,
    per_token: Vec<f64>,
    ds: f64,
    ds_rel: f64,
    curve: Vec<f64>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Snapshots {
    /// `M` is trained on `base_text`, `M'` on `base_text` plus `update_text`;
    /// both share a vocabulary built from the two texts.
    pub fn train(base_text: &str, update_text: &str, order: usize, vocab_size: usize, add_k: f64) -> Result<Self, String> {
        let all = format!("{base_text}\n{update_text}");
        let vocab = build_vocab_from_text(&all, vocab_size).map_err(err)?;
        let base_corpus = vocab.tokenize_corpus(base_text);
        let update_corpus = vocab.tokenize_corpus(update_text);
        let base = train_ngram(base_corpus.iter().map(Vec::as_slice), &vocab, order, add_k).map_err(err)?;
        let updated = base.extended(update_corpus.iter().map(Vec::as_slice)).map_err(err)?;
        Ok(Self { base: Arc::new(base), updated: Arc::new(updated) })
    }

    pub fn vocab_size(&self) -> usize {
        self.base.vocab().len()
    }

    /// Per-token differences, both scores and the prefix curve of a phrase.
    pub fn score(&self, phrase: &str) -> Result<String, String> {
        let v = self.base.vocab();
        let ids = v.tokenize_strict(phrase).map_err(err)?;
        if ids.is_empty() {
            return Err("type a phrase first".into());
        }
        let (b, u) = (&*self.base, &*self.updated);
        let abs = score_with_prompt(b, u, &[], &ids, Scoring::Absolute, DEFAULT_REL_EPS).map_err(err)?;
        let rel = score_with_prompt(b, u, &[], &ids, Scoring::Relative, DEFAULT_REL_EPS).map_err(err)?;
        let curve = if ids.len() >= 2 {
            prefix_curve(b, u, &ids).map_err(err)?.into_iter().map(|p| p.token_diff).collect()
        } else {
            abs.per_token.clone()
        };
        let out = Scored {
            tokens: ids.iter().map(|&t| v.token(t).unwrap_or("?").to_string()).collect(),
            per_token: abs.per_token,
            ds: abs.score,
            ds_rel: rel.score,
            curve,
        };
        serde_json::to_string(&out).map_err(err)
    }

    /// Group beam search with a halving schedule; `truncate_k = 0` disables
    /// truncation of the updated snapshot.
    pub fn extract(&self, length: usize, groups: usize, top: usize, truncate_k: usize, relative: bool) -> Result<String, String> {
        let v = self.base.vocab();
        let searchable = v.searchable_ids().len();
        let schedule = BeamSchedule::halving(searchable, length, DEFAULT_HALVING_FLOOR.min(searchable)).map_err(err)?;
        let scoring = if relative { Scoring::Relative } else { Scoring::Absolute };
        let cfg = SearchConfig::new(length, schedule, scoring).with_groups(groups);
        let updated: Arc<dyn ModelOracle> = if truncate_k > 0 {
            Arc::new(TruncatedOracle::new(self.updated.clone(), truncate_k.min(v.len())).map_err(err)?)
        } else {
            self.updated.clone()
        };
        let found = group_beam_search(&*self.base, &*updated, &cfg).map_err(err)?;
        serde_json::to_string(&phrase_groups(&found, v, top)).map_err(err)
    }
}

#[wasm_bindgen]
pub struct Demo(Snapshots);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(base_text: &str, update_text: &str, order: usize, vocab_size: usize, add_k: f64) -> Result<Demo, JsError> {
        Snapshots::train(base_text, update_text, order, vocab_size, add_k).map(Demo).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = vocabSize)]
    pub fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    pub fn score(&self, phrase: &str) -> Result<String, JsError> {
        self.0.score(phrase).map_err(|e| JsError::new(&e))
    }

    pub fn extract(&self, length: usize, groups: usize, top: usize, truncate_k: usize, relative: bool) -> Result<String, JsError> {
        self.0.extract(length, groups, top, truncate_k, relative).map_err(|e| JsError::new(&e))
    }
}
