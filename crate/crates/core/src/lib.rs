//! Dynamic fallback-tree features for rating prediction.
//!
//! Historical ratings are collapsed into per-entity daily aggregates, indexed
//! with cumulative sums, and queried over a fixed ladder of look-back windows.
//! Three fallback cascades turn those windowed averages into features:
//!
//! * `PT1`: product, then category, then global average.
//! * `PT2`: product, then the user's own average, then category, then global.
//! * `UT`: user, then product, then category, then global.
//!
//! Every lookup at prediction day `t` covers days `[t - L, t - 1]`, so a row
//! never sees ratings from its own day or later.
//!
//! The crate is organised bottom-up:
//!
//! * [`ingest`] parses raw review files into a canonical [`ingest::EventStream`].
//! * [`aggregate`] builds daily aggregates and the [`aggregate::PrefixIndex`].
//! * [`trees`] evaluates the cascades and assembles feature vectors.
//! * [`eval`] holds labeling, out-of-time splits, AUC and the report suite.
//! * [`combiner`] is a small logistic-regression scorer over tree features.
//! * [`oracle`] generates synthetic streams and hosts brute-force references.
//! * [`pipeline`] wires everything into artifacts on disk.

pub mod aggregate;
pub mod combiner;
pub mod eval;
pub mod ingest;
pub mod oracle;
pub mod pipeline;
pub mod trees;

pub use aggregate::{EntityKind, PrefixIndex, Window, WindowStats};
pub use ingest::{Day, EventStream, Rating, RatingEvent};
pub use trees::{FeatureVector, Level, Query, Setting, TreeEvaluator, TreeKind, TreeOutput, WindowSpec};
