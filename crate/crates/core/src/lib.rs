//! Quantile rules: mine statistical rules from training data, keep the ones
//! that hold up on held-out data, count their violations in model outputs and
//! adapt a small model to reduce them.

pub mod adaptation;
pub mod bounds;
pub mod data;
mod error;
pub mod schema;
pub mod stats;
pub mod violations;

pub use bounds::{learn_and_select, percentile, BoundJob, Interval, Selection};
pub use data::{Column, ColumnData, ColumnKind, Dataset, Minibatch};
pub use error::{Error, Result};
pub use schema::{AbstractRule, ConcreteRule, RuleSchema, Sidedness};
pub use stats::{EvalContext, Statistic, StatisticRegistry};
