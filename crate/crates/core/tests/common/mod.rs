#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snapdiff::ngram::{train_ngram, NGramModel};
use snapdiff::oracle::{ModelOracle, ProbDist};
use snapdiff::vocab::{TokenId, Vocabulary};
use snapdiff::Result;

/// Context-dependent oracle with an independent random distribution after
/// every prefix; ties between scores have probability zero.
pub struct RandomTable {
    vocab: Vocabulary,
    seed: u64,
}

impl RandomTable {
    pub fn new(vocab: Vocabulary, seed: u64) -> Self {
        Self { vocab, seed }
    }
}

impl ModelOracle for RandomTable {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist> {
        self.vocab.check_seq(prefix)?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for &t in prefix {
            h = (h ^ u64::from(t)).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut w = vec![0.0; self.vocab.len()];
        for id in self.vocab.searchable_ids() {
            w[id as usize] = rng.random_range(0.01..1.0f64).powi(3);
        }
        let total: f64 = w.iter().sum();
        Ok(ProbDist::from_vec(w.into_iter().map(|x| x / total).collect()))
    }
}

pub fn words(n: usize) -> Vocabulary {
    let w: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    Vocabulary::with_words(&w).unwrap()
}

/// Random sentences over the searchable ids, skewed toward low ids.
pub fn random_corpus(rng: &mut ChaCha8Rng, vocab: &Vocabulary, sentences: usize) -> Vec<Vec<TokenId>> {
    let ids = vocab.searchable_ids();
    (0..sentences)
        .map(|_| {
            let len = rng.random_range(1..7);
            (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    ids[((u * u) * ids.len() as f64) as usize]
                })
                .collect()
        })
        .collect()
}

/// `M` on a random corpus, `M'` on that corpus plus a second one.
pub fn random_ngram_pair(seed: u64, n_words: usize, order: usize) -> (NGramModel, NGramModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = words(n_words);
    let a = random_corpus(&mut rng, &vocab, 30);
    let b = random_corpus(&mut rng, &vocab, 10);
    let m = train_ngram(a.iter().map(Vec::as_slice), &vocab, order, 0.1).unwrap();
    let u = m.extended(b.iter().map(Vec::as_slice)).unwrap();
    (m, u)
}

/// Every sequence of length `n` over `universe`, lexicographic.
pub fn enumerate(universe: &[TokenId], n: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                universe.iter().map(move |&t| {
                    let mut s = p.clone();
                    s.push(t);
                    s
                })
            })
            .collect();
    }
    out
}

/// `sum_i M'(s_<i)(s_i) - M(s_<i)(s_i)` from single-token queries.
pub fn direct_score(base: &dyn ModelOracle, updated: &dyn ModelOracle, seq: &[TokenId]) -> f64 {
    let mut total = 0.0;
    for i in 0..seq.len() {
        total += updated.prob(&seq[..i], seq[i]).unwrap() - base.prob(&seq[..i], seq[i]).unwrap();
    }
    total
}

/// Rank by brute force: sequences of the same length scoring strictly higher.
pub fn brute_rank(base: &dyn ModelOracle, updated: &dyn ModelOracle, seq: &[TokenId]) -> u64 {
    let target = direct_score(base, updated, seq);
    enumerate(&base.vocab().searchable_ids(), seq.len())
        .iter()
        .filter(|s| direct_score(base, updated, s) > target)
        .count() as u64
}

pub fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}
