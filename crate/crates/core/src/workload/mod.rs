//! Workload scripts: syntax, interpreter, traces and generators.
//!
//! Scripts name memory symbolically (`name+offset`), so the same text runs
//! unchanged in a parent and in every child it forks.

mod ast;
pub mod gen;
mod interp;
mod parse;
mod trace;

pub use ast::{Loc, Script, Stmt};
pub use interp::{run, run_observed, RunConfig, RunError, RunOutcome, ENOMEM_EXIT_CODE};
pub use parse::{parse, ParseError, ParseErrorKind};
pub use trace::{render_cap, Trace, TraceEntry};
