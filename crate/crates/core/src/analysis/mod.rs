//! Complexity accounting, BD-rate and dataset evaluation.

pub mod bd;
pub mod complexity;
pub mod eval;

pub use bd::{bd_rate, bd_rate_with, Interp, RdCurve};
pub use complexity::{closed_form, count_model, ComplexityReport, Entry, Row, Totals};
pub use eval::{eval_dataset, EvalReport, EvalRow, Scores};
