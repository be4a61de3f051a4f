//! Second-order gradient-boosted trees with sparsity-aware missing-value
//! handling.
//!
//! Split search is exact greedy: every midpoint between consecutive distinct
//! present values is a candidate threshold, and null rows are considered on
//! both sides through a learned per-node default direction. Leaf weights are
//! the regularized Newton step `-G / (H + lambda)`, shrunk by the learning
//! rate at build time. Training is deterministic: the cross-column reduction
//! uses a total order, so results are identical at any thread count.

mod search;
mod split;
mod train;
mod tree;

pub use search::{default_grid, grid_search, rfe, GridSearchCell, GridSearchResult, RfeResult};
pub use split::{find_best_split, SplitCandidate, SplitParams};
pub use train::{train, train_with_history, TrainConfig, TrainHistory};
pub use tree::{Direction, Ensemble, Node, Tree, ENSEMBLE_FORMAT_VERSION};
