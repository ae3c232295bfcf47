//! Token vocabulary, whitespace tokenization and corpus reading.
//!
//! Text is lowercased and split on whitespace; each non-empty line is one
//! sentence. Vocabulary construction keeps the most frequent tokens, breaking
//! frequency ties by the token string so that builds are reproducible.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Bijection between token strings and ids `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
    /// Placeholder token strings (vocabulary learned from a remote handshake).
    opaque: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocabulary::new(r.tokens, r.bos, r.eos, r.unk)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { tokens: v.tokens, bos: v.bos, eos: v.eos, unk: v.unk }
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, bos: TokenId, eos: TokenId, unk: TokenId) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidVocab(format!("empty token at id {i}")));
            }
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let n = tokens.len();
        for (name, id) in [("bos", bos), ("eos", eos), ("unk", unk)] {
            if id as usize >= n {
                return Err(Error::InvalidVocab(format!("{name} id {id} out of range")));
            }
        }
        if bos == eos || bos == unk || eos == unk {
            return Err(Error::InvalidVocab("bos, eos and unk must be distinct".into()));
        }
        Ok(Self { tokens, ids, bos, eos, unk, opaque: false })
    }

    /// Vocabulary with the three specials first followed by `words`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::new(tokens, 0, 1, 2)
    }

    /// Vocabulary known only by size and special ids; tokens are rendered `#id`.
    pub fn opaque(size: usize, bos: TokenId, eos: TokenId, unk: TokenId) -> Result<Self> {
        let tokens = (0..size)
            .map(|i| match i as TokenId {
                i if i == bos => BOS.to_string(),
                i if i == eos => EOS.to_string(),
                i if i == unk => UNK.to_string(),
                i => format!("#{i}"),
            })
            .collect();
        let mut v = Self::new(tokens, bos, eos, unk)?;
        v.opaque = true;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn is_opaque(&self) -> bool {
        self.opaque
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos || id == self.unk
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    /// Ids a search may place inside a phrase: everything but the specials.
    pub fn searchable_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId).filter(|&i| !self.is_special(i)).collect()
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::InvalidTokenId { id, size: self.len() })
        }
    }

    pub fn check_seq(&self, seq: &[TokenId]) -> Result<()> {
        seq.iter().try_for_each(|&id| self.check_id(id))
    }

    /// Two vocabularies can be compared token-for-token when sizes and specials
    /// agree and, unless one side is opaque, the token strings agree too.
    pub fn ensure_compatible(&self, other: &Vocabulary) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::VocabMismatch(format!("sizes {} and {}", self.len(), other.len())));
        }
        if (self.bos, self.eos, self.unk) != (other.bos, other.eos, other.unk) {
            return Err(Error::VocabMismatch("special token ids differ".into()));
        }
        if !self.opaque && !other.opaque && self.tokens != other.tokens {
            return Err(Error::VocabMismatch("token strings differ".into()));
        }
        Ok(())
    }

    /// Lowercase, split on whitespace, map out-of-vocabulary tokens to unk.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(self.unk))
            .collect()
    }

    /// Like [`tokenize`](Self::tokenize) but rejects out-of-vocabulary tokens.
    pub fn tokenize_strict(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.id(&w).ok_or(Error::UnknownToken(w))
            })
            .collect()
    }

    pub fn detokenize(&self, seq: &[TokenId]) -> String {
        seq.iter()
            .map(|&id| self.token(id).unwrap_or("<invalid>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token sequence per non-empty line.
    pub fn tokenize_corpus(&self, text: &str) -> Vec<Vec<TokenId>> {
        text.lines()
            .map(|l| self.tokenize(l))
            .filter(|s| !s.is_empty())
            .collect()
    }
}

/// Lowercased whitespace tokens of every non-empty line.
pub fn split_corpus(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Keep the `size - specials.len()` most frequent corpus tokens plus the
/// specials (which come first, in order: bos, eos, unk).
pub fn build_vocab<'a, I>(corpus: I, size: usize, specials: [&str; 3]) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if size < specials.len() + 1 {
        return Err(Error::InvalidConfig(format!(
            "vocabulary size {size} leaves no room beyond {} specials",
            specials.len()
        )));
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for tok in corpus {
        let tok = tok.to_lowercase();
        if specials.contains(&tok.as_str()) {
            continue;
        }
        *freq.entry(tok).or_default() += 1;
    }
    if freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(size - specials.len());
    let mut tokens: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocabulary::new(tokens, 0, 1, 2)
}

/// [`build_vocab`] over every whitespace token of `text` with the default specials.
pub fn build_vocab_from_text(text: &str, size: usize) -> Result<Vocabulary> {
    build_vocab(text.split_whitespace(), size, [BOS, EOS, UNK])
}
