//! Differential analysis of two snapshots of a language model.
//!
//! Given black-box access to next-token distributions before and after an
//! update, the crate scores token sequences by how much more likely the update
//! made them, ranks them against every sequence of the same length, and
//! searches for the highest-scoring ones with a beam search. Count-based
//! n-gram models, canary insertion experiments and analysis helpers for the
//! extracted phrases are included.

pub mod canary;
pub mod characterize;
pub mod error;
pub mod metrics;
pub mod ngram;
pub mod oracle;
pub mod report;
pub mod search;
pub mod vocab;
pub mod wire;

pub use error::{Error, Result};
pub use metrics::{
    differential_score, exact_differential_rank, relative_differential_score, RankEstimate, RankKind, ScoreKind,
    ScoredSeq, Scoring,
};
pub use ngram::{train_ngram, NGramModel};
pub use oracle::{interpolate, FixedOracle, Interpolated, ModelOracle, ProbDist, TruncatedOracle};
pub use search::{beam_search, group_beam_search, halving_schedule, prefix_recovery_search, BeamSchedule, SearchConfig};
pub use vocab::{TokenId, Vocabulary};

/// Size the global worker pool used by beam expansion and exact ranking.
/// Has no effect without the `parallel` feature or after the pool started.
pub fn set_parallelism(jobs: usize) -> Result<()> {
    #[cfg(feature = "parallel")]
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    Ok(())
}
