use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::dataset::QaExample;
use super::metrics::{exact_match, rouge_1_f1, rouge_l_f1};

/// Headline metric for free-form examples. Multiple-choice examples always
/// score by exact match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    RougeL,
    Rouge1,
}

/// Scores of one answer against one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub score: f64,
    pub rouge_l: f64,
    pub rouge_1: f64,
    /// Exact match, for multiple-choice examples.
    pub em: Option<u8>,
    pub ambiguous: bool,
}

pub fn score_answer(example: &QaExample, answer: &str, metric: Metric) -> AnswerScore {
    let rouge_l = rouge_l_f1(answer, &example.gold_answers);
    let rouge_1 = rouge_1_f1(answer, &example.gold_answers);
    match &example.options {
        Some(opts) => {
            let outcomes: Vec<_> = example
                .gold_answers
                .iter()
                .map(|g| exact_match(answer, g, Some(opts)))
                .collect();
            let em = outcomes.iter().map(|o| o.score).max().unwrap_or(0);
            AnswerScore {
                score: em as f64,
                rouge_l,
                rouge_1,
                em: Some(em),
                ambiguous: outcomes.iter().any(|o| o.ambiguous),
            }
        }
        None => AnswerScore {
            score: match metric {
                Metric::RougeL => rouge_l,
                Metric::Rouge1 => rouge_1,
            },
            rouge_l,
            rouge_1,
            em: None,
            ambiguous: false,
        },
    }
}

/// One (example, method) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub method: String,
    pub score: f64,
    pub rouge_l: f64,
    pub rouge_1: f64,
    #[serde(default)]
    pub em: Option<u8>,
    #[serde(default)]
    pub ambiguous: bool,
    /// Logical model calls.
    pub calls: u64,
    /// Requests including re-asks.
    pub requests: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_ms: u64,
    pub answer: String,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub examples: usize,
    pub mean_score: f64,
    pub mean_rouge_l: f64,
    pub mean_rouge_1: f64,
    pub calls: u64,
    pub requests: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub failures: usize,
    pub ambiguous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub dataset: String,
    pub metric: Metric,
    pub methods: Vec<MethodSummary>,
    pub rows: Vec<ScoreRow>,
    pub config: serde_json::Value,
}

/// Sorts rows by (method, id) and summarizes each method. The result does not
/// depend on the order of `rows`.
pub fn aggregate(
    dataset: &str,
    metric: Metric,
    mut rows: Vec<ScoreRow>,
    config: serde_json::Value,
) -> ScoreReport {
    rows.sort_by(|a, b| (&a.method, &a.id).cmp(&(&b.method, &b.id)));
    let mut groups: BTreeMap<&str, Vec<&ScoreRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry(&r.method).or_default().push(r);
    }
    let mean = |rs: &[&ScoreRow], f: fn(&ScoreRow) -> f64| {
        if rs.is_empty() {
            0.0
        } else {
            rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64
        }
    };
    let methods = groups
        .iter()
        .map(|(m, rs)| MethodSummary {
            method: m.to_string(),
            examples: rs.len(),
            mean_score: mean(rs, |r| r.score),
            mean_rouge_l: mean(rs, |r| r.rouge_l),
            mean_rouge_1: mean(rs, |r| r.rouge_1),
            calls: rs.iter().map(|r| r.calls).sum(),
            requests: rs.iter().map(|r| r.requests).sum(),
            prompt_tokens: rs.iter().map(|r| r.prompt_tokens).sum(),
            completion_tokens: rs.iter().map(|r| r.completion_tokens).sum(),
            failures: rs.iter().filter(|r| r.error.is_some()).count(),
            ambiguous: rs.iter().filter(|r| r.ambiguous).count(),
        })
        .collect();
    ScoreReport {
        dataset: dataset.to_string(),
        metric,
        methods,
        rows,
        config,
    }
}

impl ScoreReport {
    /// Copy with per-row wall times zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.wall_ms = 0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Methods down the side, the dataset score and costs across.
    pub fn table(&self) -> String {
        let score_head = format!("{} (x100)", self.dataset);
        let header = [
            "method".to_string(),
            score_head,
            "n".into(),
            "calls".into(),
            "prompt tok".into(),
            "completion tok".into(),
            "failed".into(),
        ];
        let body: Vec<[String; 7]> = self
            .methods
            .iter()
            .map(|m| {
                [
                    m.method.clone(),
                    format!("{:.2}", m.mean_score * 100.0),
                    m.examples.to_string(),
                    m.calls.to_string(),
                    m.prompt_tokens.to_string(),
                    m.completion_tokens.to_string(),
                    m.failures.to_string(),
                ]
            })
            .collect();
        let mut widths = header.clone().map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String; 7]| {
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                if i == 0 {
                    let _ = write!(out, "{c:<w$}");
                } else {
                    let _ = write!(out, "  {c:>w$}");
                }
            }
            out.push('\n');
        };
        line(&mut out, &header);
        let rule = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for row in &body {
            line(&mut out, row);
        }
        out
    }
}
