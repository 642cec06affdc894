//! Expression language and job-to-machine matching.
//!
//! The expression language is a deliberately small model of ClassAd-style
//! matchmaking: scalar literals, `job.`/`machine.` attribute references,
//! arithmetic, comparisons and three-valued boolean logic.

mod eval;
mod expr;
mod matching;

pub use eval::{evaluate, is_satisfied, rank_of, EvalValue};
pub use expr::{parse_expression, BinaryOp, Expression, Literal, ParseError, Scope, UnaryOp};
pub use matching::{find_matches, match_in_order, MACHINE_REQUIREMENTS_ATTR};
