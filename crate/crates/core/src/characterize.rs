//! Where do extracted phrases come from?
//!
//! Two near-maximum-likelihood 3-gram models, one per corpus, place every
//! phrase on a perplexity scatter; phrases above the diagonal
//! (`perp_d > perp_n`) are closer to the update corpus. Token-level edit
//! distance to the nearest corpus window complements the scatter.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{perplexity, ModelOracle};
use crate::report::SourceLabel;
use crate::search::{group_beam_search_with, Differential, GroupResult, LogLikelihood, SearchConfig, StepScorer};
use crate::vocab::TokenId;


pub const DEFAULT_WINDOW_SLACK: usize = 1;

/// Token-level edit distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[b.len()]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NearMatch {
    pub phrase: Vec<TokenId>,
    pub best_match: Vec<TokenId>,
    /// Offset of `best_match` in the token stream.
    pub position: usize,
    pub distance: usize,
    pub corpus_label: String,
}

/// Closest window of length `|phrase| ± slack` in `stream` (ties: earliest
/// start, then shortest window). A stream shorter than every allowed window
/// is compared as a whole.
pub fn nearest_neighbor(phrase: &[TokenId], stream: &[TokenId], slack: usize, label: &str) -> Result<NearMatch> {
    if stream.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let m = phrase.len();
    let min_len = m.saturating_sub(slack).max(1).min(stream.len());
    let max_len = m + slack;
    let mut best: Option<(usize, usize, usize)> = None;
    // row[i] = distance between phrase[..i] and the window read so far
    let mut row = vec![0usize; m + 1];
    for start in 0..stream.len() {
        let longest = max_len.min(stream.len() - start);
        if longest < min_len {
            break;
        }
        for (i, r) in row.iter_mut().enumerate() {
            *r = i;
        }
        for j in 0..longest {
            let y = stream[start + j];
            let mut diag = row[0];
            row[0] = j + 1;
            for i in 0..m {
                let above = row[i + 1];
                row[i + 1] = (diag + usize::from(phrase[i] != y)).min(above + 1).min(row[i] + 1);
                diag = above;
            }
            let len = j + 1;
            if len >= min_len && best.is_none_or(|(d, _, _)| row[m] < d) {
                best = Some((row[m], start, len));
            }
        }
        if best.is_some_and(|(d, _, _)| d == 0) {
            break;
        }
    }
    let (distance, position, len) = best.ok_or(Error::EmptyCorpus)?;
    Ok(NearMatch {
        phrase: phrase.to_vec(),
        best_match: stream[position..position + len].to_vec(),
        position,
        distance,
        corpus_label: label.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub phrase: String,
    pub perp_d: f64,
    pub perp_n: f64,
    pub source_label: SourceLabel,
}

impl ScatterPoint {
    pub fn above_diagonal(&self) -> bool {
        self.perp_d > self.perp_n
    }
}

/// Perplexity of each phrase under both models. Phrases are given as text and
/// tokenized with each model's own vocabulary.
pub fn perp_scatter(
    phrases: &[String],
    model_d: &dyn ModelOracle,
    model_n: &dyn ModelOracle,
    label: SourceLabel,
) -> Result<Vec<ScatterPoint>> {
    phrases
        .iter()
        .map(|p| {
            let d = model_d.vocab().tokenize(p);
            let n = model_n.vocab().tokenize(p);
            Ok(ScatterPoint {
                phrase: p.clone(),
                perp_d: perplexity(model_d, &d)?,
                perp_n: perplexity(model_n, &n)?,
                source_label: label,
            })
        })
        .collect()
}

pub fn above_fraction(points: &[ScatterPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().filter(|p| p.above_diagonal()).count() as f64 / points.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub base_alone: Vec<ScatterPoint>,
    pub updated_alone: Vec<ScatterPoint>,
    pub attack: Vec<ScatterPoint>,
}

/// The best `ceil(top / groups)` phrases of every group, in group order, at
/// most `top` in total.
fn top_texts(groups: &[GroupResult], model: &dyn ModelOracle, top: usize) -> Vec<String> {
    let per_group = top.div_ceil(groups.len().max(1));
    groups
        .iter()
        .flat_map(|g| g.results.iter().take(per_group))
        .take(top)
        .map(|s| model.vocab().detokenize(&s.seq))
        .collect()
}

/// Top `top` phrases by log-probability under the base model, under the
/// updated model, and by differential score, each placed on the scatter.
/// Every mode runs the same group beam search and contributes its best
/// phrases from each group.
pub fn compare_extraction_modes(
    base: &dyn ModelOracle,
    updated: &dyn ModelOracle,
    config: &SearchConfig,
    top: usize,
    model_d: &dyn ModelOracle,
    model_n: &dyn ModelOracle,
) -> Result<ModeComparison> {
    let diff = Differential::new(base, updated, config.scoring, config.eps)?;
    let run = |scorer: &dyn StepScorer| group_beam_search_with(scorer, config);
    let base_top = top_texts(&run(&LogLikelihood { model: base })?, base, top);
    let upd_top = top_texts(&run(&LogLikelihood { model: updated })?, updated, top);
    let attack_top = top_texts(&run(&diff)?, base, top);
    Ok(ModeComparison {
        base_alone: perp_scatter(&base_top, model_d, model_n, SourceLabel::FromBaseModel)?,
        updated_alone: perp_scatter(&upd_top, model_d, model_n, SourceLabel::FromUpdatedModel)?,
        attack: perp_scatter(&attack_top, model_d, model_n, SourceLabel::FromSnapshotAttack)?,
    })
}

pub fn write_scatter_csv<W: Write>(points: &[ScatterPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["phrase", "perp_d", "perp_n", "source_label", "above_diagonal"])?;
    for p in points {
        out.write_record([
            p.phrase.as_str(),
            &p.perp_d.to_string(),
            &p.perp_n.to_string(),
            p.source_label.as_str(),
            &p.above_diagonal().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// A near match rendered as text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NearRow {
    pub phrase: String,
    pub corpus_label: String,
    pub matched: String,
    pub distance: usize,
}

impl NearMatch {
    pub fn render(&self, vocab: &crate::vocab::Vocabulary) -> NearRow {
        NearRow {
            phrase: vocab.detokenize(&self.phrase),
            corpus_label: self.corpus_label.clone(),
            matched: vocab.detokenize(&self.best_match),
            distance: self.distance,
        }
    }
}

pub fn write_near_csv<W: Write>(rows: &[NearRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["phrase", "corpus_label", "match", "distance"])?;
    for r in rows {
        out.write_record([r.phrase.as_str(), &r.corpus_label, &r.matched, &r.distance.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::{train_ngram, MLE_ADD_K};
    use crate::vocab::Vocabulary;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein::<u8>(b"", b"abc"), 3);
        assert_eq!(levenshtein(&words("a b c"), &words("a b c")), 0);
        assert_eq!(
            levenshtein(&words("troops surrounded village after"), &words("from the village after")),
            2
        );
    }

    #[test]
    fn verbatim_phrase_is_found() {
        let v = Vocabulary::with_words(&words("center for policy research the of")).unwrap();
        let stream = v.tokenize("the of center for policy research of the");
        let phrase = v.tokenize("center for policy research");
        let m = nearest_neighbor(&phrase, &stream, 1, "n").unwrap();
        assert_eq!(m.distance, 0);
        assert_eq!(m.best_match, phrase);
        assert_eq!(m.position, 2);
    }

    #[test]
    fn near_match_prefers_earliest_then_shortest() {
        let v = Vocabulary::with_words(&words("a b c x")).unwrap();
        let stream = v.tokenize("x a b x a c");
        let phrase = v.tokenize("a b c");
        let m = nearest_neighbor(&phrase, &stream, 1, "d").unwrap();
        // "a b" at 1 and "a b x" at 1 are both at distance 1
        assert_eq!(m.distance, 1);
        assert_eq!(m.position, 1);
        assert_eq!(m.best_match, v.tokenize("a b"));
    }

    #[test]
    fn short_stream_still_matches() {
        let v = Vocabulary::with_words(&words("a b")).unwrap();
        let m = nearest_neighbor(&v.tokenize("a b a b"), &v.tokenize("b"), 1, "d").unwrap();
        assert_eq!(m.distance, 3);
        assert!(nearest_neighbor(&v.tokenize("a"), &[], 1, "d").is_err());
    }

    #[test]
    fn scatter_sides() {
        let v = Vocabulary::with_words(&words("whale ship sea tax congress budget the")).unwrap();
        let d_text = "the congress passed the budget\nthe tax budget of the congress\n".repeat(5);
        let n_text = "the whale sank the ship\nthe sea and the whale\n".repeat(5);
        let d = train_ngram(v.tokenize_corpus(&d_text).iter().map(Vec::as_slice), &v, 3, MLE_ADD_K).unwrap();
        let n = train_ngram(v.tokenize_corpus(&n_text).iter().map(Vec::as_slice), &v, 3, MLE_ADD_K).unwrap();
        let pts = perp_scatter(
            &["the congress passed".to_string(), "the whale sank".to_string()],
            &d,
            &n,
            SourceLabel::FromSnapshotAttack,
        )
        .unwrap();
        assert!(!pts[0].above_diagonal());
        assert!(pts[1].above_diagonal());
        assert_eq!(above_fraction(&pts), 0.5);
    }
}
