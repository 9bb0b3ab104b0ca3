//! Ranking-aware group policy optimization for query rewriting.
//!
//! A rewrite policy proposes `K` rewrites per query, a frozen dense
//! retriever ranks the corpus for each rewrite, and the target's rank is
//! turned into a reward. Rewards are standardized within each group and
//! drive a KL-regularized policy-gradient update.
//!
//! Modules:
//! - [`vecindex`]: brute-force cosine retrieval, ranks and recall.
//! - [`reward`]: format gate, rank/similarity rewards, group advantages.
//! - [`policy`]: linear-softmax rewrite policy with exact gradients.
//! - [`optim`]: objective, gradient and the training loop.
//! - [`synthenv`]: synthetic testbeds that reproduce score inflation.
//! - [`bridge`]: line-delimited JSON protocol for external rewriters and embedders.
//! - [`experiment`]: paired rank-vs-similarity runs.

pub mod bridge;
pub mod error;
pub mod experiment;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod synthenv;
pub mod vecindex;

pub use error::{GrapeError, Result};
