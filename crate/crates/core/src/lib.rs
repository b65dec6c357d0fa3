//! Monte Carlo tree search over composable loop-transformation pragmas.
//!
//! The search space is a tree: the root is the untransformed program and
//! every child appends one transformation (tile, interchange, thread
//! parallelization, unroll, reverse, pack) to its parent's sequence. Children
//! are instantiated on demand by numeric index. [`mcts::run`] drives the
//! customized search (moving-average reward, depth learning by random walks,
//! restarts with quantile transfer); [`baselines`] holds random, breadth-first
//! and global greedy searchers for comparison.

pub mod error;
pub mod loop_model;
pub mod space;
pub mod eval;
pub mod reward;
pub mod history;
pub mod mcts;
pub mod baselines;
pub mod harness;

pub use error::{Error, Result};
