//! Named parameter registry, freeze strategies, trainable counts, and
//! snapshot diffs.

mod count;
mod registry;
mod snapshot;
mod strategy;

pub use count::{count_trainable, humanize};
pub use registry::{ParamId, ParamName, ParamStore};
pub use snapshot::{diff, snapshot, GroupChange, Grouping, Snapshot};
pub use strategy::{apply_strategy, FreezeMask, PathPredicate, Strategy, PRESETS};

#[cfg(test)]
mod tests;
