//! Datasets, answer scoring and score reports.

mod dataset;
mod metrics;
mod report;

pub use dataset::{filter_min_context, load_dataset, parse_example, DatasetError, LoadedDataset, QaExample};
pub use metrics::{
    exact_match, normalize_answer, option_label, resolve_options, rouge_1_f1, rouge_l_f1, rouge_tokens,
    EmOutcome,
};
pub use report::{aggregate, score_answer, AnswerScore, Metric, MethodSummary, ScoreReport, ScoreRow};
