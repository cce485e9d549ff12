//! Metrics, evaluation arms and parser accuracy.

mod arms;
mod metrics;
mod parser_eval;

pub use arms::{eval_arm, eval_arms, evaluate, evaluate_masks, EvalArm, EvalContext, EvalReport, Extractor, FullText, NoFeedback, Rerank};
pub use metrics::*;
pub use parser_eval::{contiguous_spans, parser_accuracy, ParserAccuracy, ParserEvalItem, ParserEvalSet, Split, SplitAccuracy};
