//! Count-based n-gram language models with add-k smoothing and backoff.
//!
//! `P(t | ctx) = (c(ctx t) + k) / (c(ctx) + k |T|)`, where `ctx` is the longest
//! suffix of the bos-padded history (at most `order - 1` tokens) that was seen
//! during training. Unseen histories back off to shorter ones; the empty
//! history is always present once the model has been trained.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{ModelOracle, ProbDist};
use crate::vocab::{TokenId, Vocabulary};

pub const FORMAT_NAME: &str = "snapdiff-ngram";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_ADD_K: f64 = 0.01;
/// Near-zero smoothing for maximum-likelihood style characterization models.
pub const MLE_ADD_K: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
struct Continuations {
    total: u64,
    /// Sorted by token id; every count is positive.
    next: Vec<(TokenId, u64)>,
}

impl Continuations {
    fn count(&self, t: TokenId) -> u64 {
        self.next
            .binary_search_by_key(&t, |&(id, _)| id)
            .map(|i| self.next[i].1)
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct NGramModel {
    order: usize,
    add_k: f64,
    vocab: Vocabulary,
    contexts: HashMap<Vec<TokenId>, Continuations>,
}

impl PartialEq for NGramModel {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order
            && self.add_k.to_bits() == other.add_k.to_bits()
            && self.vocab == other.vocab
            && self.contexts == other.contexts
    }
}

/// Train an `order`-gram model over sentences, each padded with `order - 1`
/// bos tokens on the left and one eos on the right.
pub fn train_ngram<'a, I>(corpus: I, vocab: &Vocabulary, order: usize, add_k: f64) -> Result<NGramModel>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    if order < 1 {
        return Err(Error::InvalidOrder(order));
    }
    if !(add_k > 0.0 && add_k.is_finite()) {
        return Err(Error::InvalidConfig(format!("add-k must be positive, got {add_k}")));
    }
    let mut raw: HashMap<Vec<TokenId>, HashMap<TokenId, u64>> = HashMap::new();
    let any = for_each_event(corpus, vocab, order, |ctx, target| match raw.get_mut(ctx) {
        Some(m) => *m.entry(target).or_default() += 1,
        None => {
            raw.entry(ctx.to_vec()).or_default().insert(target, 1);
        }
    })?;
    if !any {
        return Err(Error::EmptyCorpus);
    }
    let contexts = raw
        .into_iter()
        .map(|(ctx, m)| {
            let mut next: Vec<(TokenId, u64)> = m.into_iter().collect();
            next.sort_unstable();
            let total = next.iter().map(|&(_, c)| c).sum();
            (ctx, Continuations { total, next })
        })
        .collect();
    Ok(NGramModel { order, add_k, vocab: vocab.clone(), contexts })
}

/// Calls `f(context, target)` for every context length of every padded
/// position; returns whether any non-empty sentence was seen.
fn for_each_event<'a, I, F>(corpus: I, vocab: &Vocabulary, order: usize, mut f: F) -> Result<bool>
where
    I: IntoIterator<Item = &'a [TokenId]>,
    F: FnMut(&[TokenId], TokenId),
{
    let mut padded: Vec<TokenId> = Vec::new();
    let mut any = false;
    for sent in corpus {
        if sent.is_empty() {
            continue;
        }
        vocab.check_seq(sent)?;
        any = true;
        padded.clear();
        padded.extend(std::iter::repeat_n(vocab.bos(), order - 1));
        padded.extend_from_slice(sent);
        padded.push(vocab.eos());
        for j in order - 1..padded.len() {
            for len in 0..order {
                f(&padded[j - len..j], padded[j]);
            }
        }
    }
    Ok(any)
}

impl NGramModel {
    /// The model trained on this model's data plus `corpus`; counts equal those
    /// of training on the concatenation.
    pub fn extended<'a, I>(&self, corpus: I) -> Result<NGramModel>
    where
        I: IntoIterator<Item = &'a [TokenId]>,
    {
        let mut m = self.clone();
        for_each_event(corpus, &self.vocab, self.order, |ctx, target| {
            let c = match m.contexts.get_mut(ctx) {
                Some(c) => c,
                None => m.contexts.entry(ctx.to_vec()).or_insert(Continuations { total: 0, next: Vec::new() }),
            };
            c.total += 1;
            match c.next.binary_search_by_key(&target, |&(id, _)| id) {
                Ok(i) => c.next[i].1 += 1,
                Err(i) => c.next.insert(i, (target, 1)),
            }
        })?;
        Ok(m)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    /// Number of `(context, token)` entries.
    pub fn num_entries(&self) -> usize {
        self.contexts.values().map(|c| c.next.len()).sum()
    }

    /// Times `ctx` was observed as a history (0 if unseen).
    pub fn context_count(&self, ctx: &[TokenId]) -> u64 {
        self.contexts.get(ctx).map_or(0, |c| c.total)
    }

    pub fn count(&self, ctx: &[TokenId], token: TokenId) -> u64 {
        self.contexts.get(ctx).map_or(0, |c| c.count(token))
    }

    fn history(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let want = self.order - 1;
        let mut h = Vec::with_capacity(want);
        let have = prefix.len().min(want);
        h.extend(std::iter::repeat_n(self.vocab.bos(), want - have));
        h.extend_from_slice(&prefix[prefix.len() - have..]);
        h
    }

    fn lookup(&self, prefix: &[TokenId]) -> Result<&Continuations> {
        self.vocab.check_seq(prefix)?;
        let h = self.history(prefix);
        (0..=h.len())
            .find_map(|drop| self.contexts.get(&h[drop..]))
            .ok_or_else(|| Error::Format("model has no unigram counts".into()))
    }

    fn denom(&self, c: &Continuations) -> f64 {
        c.total as f64 + self.add_k * self.vocab.len() as f64
    }

    /// Write the versioned text format: a JSON header line, then one
    /// `ctx_ids<TAB>token_id<TAB>count` line per entry in a canonical order.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            order: self.order,
            add_k: self.add_k,
            vocab: self.vocab.tokens().to_vec(),
            bos: self.vocab.bos(),
            eos: self.vocab.eos(),
            unk: self.vocab.unk(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let mut keys: Vec<&Vec<TokenId>> = self.contexts.keys().collect();
        keys.sort_unstable_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let mut ctx_text = String::new();
        for ctx in keys {
            ctx_text.clear();
            for (i, id) in ctx.iter().enumerate() {
                if i > 0 {
                    ctx_text.push(' ');
                }
                ctx_text.push_str(&id.to_string());
            }
            for &(t, c) in &self.contexts[ctx].next {
                writeln!(w, "{ctx_text}\t{t}\t{c}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(f)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 || !line.ends_with('\n') {
            return Err(Error::Format("missing header".into()));
        }
        let probe: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("header: {e}")))?;
        if probe.get("format").and_then(|v| v.as_str()) != Some(FORMAT_NAME) {
            return Err(Error::Format("not a snapdiff n-gram model".into()));
        }
        let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version > FORMAT_VERSION {
            return Err(Error::Version { found: version, supported: FORMAT_VERSION });
        }
        let header: Header =
            serde_json::from_value(probe).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.order < 1 {
            return Err(Error::InvalidOrder(header.order));
        }
        if header.add_k.is_nan() || header.add_k <= 0.0 {
            return Err(Error::Format("add_k must be positive".into()));
        }
        let vocab = Vocabulary::new(header.vocab, header.bos, header.eos, header.unk)?;
        let mut raw: HashMap<Vec<TokenId>, Vec<(TokenId, u64)>> = HashMap::new();
        let mut level_sums = vec![0u64; header.order];
        let mut lineno = 1;
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                break;
            }
            lineno += 1;
            let body = line
                .strip_suffix('\n')
                .ok_or_else(|| Error::Format(format!("line {lineno} is truncated")))?;
            let bad = || Error::Format(format!("line {lineno}: expected ctx<TAB>token<TAB>count"));
            let mut fields = body.split('\t');
            let (ctx, tok, cnt) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), Some(c), None) => (a, b, c),
                _ => return Err(bad()),
            };
            let ctx: Vec<TokenId> = ctx
                .split_whitespace()
                .map(|s| s.parse::<TokenId>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let tok: TokenId = tok.parse().map_err(|_| bad())?;
            let cnt: u64 = cnt.parse().map_err(|_| bad())?;
            if cnt == 0 || ctx.len() >= header.order {
                return Err(bad());
            }
            vocab.check_seq(&ctx)?;
            vocab.check_id(tok)?;
            level_sums[ctx.len()] += cnt;
            raw.entry(ctx).or_default().push((tok, cnt));
        }
        // Every training position is counted once per context length.
        if level_sums.iter().any(|&s| s != level_sums[0]) || level_sums[0] == 0 {
            return Err(Error::Format("count table is incomplete".into()));
        }
        let mut contexts = HashMap::with_capacity(raw.len());
        for (ctx, mut next) in raw {
            next.sort_unstable();
            if next.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Format("duplicate entry".into()));
            }
            let total = next.iter().map(|&(_, c)| c).sum();
            contexts.insert(ctx, Continuations { total, next });
        }
        Ok(Self { order: header.order, add_k: header.add_k, vocab, contexts })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Every history stored in the count table.
    pub fn contexts(&self) -> impl Iterator<Item = &[TokenId]> {
        self.contexts.keys().map(Vec::as_slice)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    order: usize,
    add_k: f64,
    vocab: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
}

impl ModelOracle for NGramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist> {
        let c = self.lookup(prefix)?;
        let denom = self.denom(c);
        let mut probs = vec![(0.0 + self.add_k) / denom; self.vocab.len()];
        for &(t, n) in &c.next {
            probs[t as usize] = (n as f64 + self.add_k) / denom;
        }
        Ok(ProbDist::from_vec(probs))
    }

    fn prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        self.vocab.check_id(token)?;
        let c = self.lookup(prefix)?;
        Ok((c.count(token) as f64 + self.add_k) / self.denom(c))
    }

    fn describe(&self) -> String {
        format!("{}-gram(add_k={})", self.order, self.add_k)
    }
}
