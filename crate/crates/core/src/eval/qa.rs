use serde::{Deserialize, Serialize};

use super::metrics::{exact_match, f1_score};
use super::report::{BenchResult, Cell};
use crate::serving::{serve_query, ServeContext, ServeMode, ServeRequest};
use crate::trainer::TrainingExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaScore {
    pub doc_id: String,
    pub question: String,
    pub gold: String,
    /// `None` when serving the request failed.
    pub prediction: Option<String>,
    pub em: f64,
    pub f1: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub mode: ServeMode,
    pub scores: Vec<QaScore>,
}

impl QaReport {
    fn served(&self) -> impl Iterator<Item = &QaScore> {
        self.scores.iter().filter(|s| s.error.is_none())
    }

    /// Mean exact match in points (0..=100) over the examples that were
    /// served; failed examples are excluded and counted by [`Self::failed`].
    pub fn em(&self) -> f64 {
        mean(self.served().map(|s| s.em)) * 100.0
    }

    pub fn f1(&self) -> f64 {
        mean(self.served().map(|s| s.f1)) * 100.0
    }

    pub fn failed(&self) -> usize {
        self.scores.iter().filter(|s| s.error.is_some()).count()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Serves every example's question in `mode`, pinned to the example's
/// document, and scores the answers.
pub fn qa_eval(examples: &[TrainingExample], mode: ServeMode, ctx: &ServeContext<'_>, max_new_tokens: usize) -> QaReport {
    let scores = examples
        .iter()
        .map(|ex| {
            let req = ServeRequest {
                doc_id: Some(ex.doc_id.clone()),
                max_new_tokens,
                ..ServeRequest::new(ex.question.clone(), mode)
            };
            match serve_query(&req, ctx) {
                Ok(resp) => QaScore {
                    doc_id: ex.doc_id.clone(),
                    question: ex.question.clone(),
                    gold: ex.answer.clone(),
                    em: exact_match(&resp.answer, &ex.answer),
                    f1: f1_score(&resp.answer, &ex.answer),
                    prediction: Some(resp.answer),
                    error: None,
                },
                Err(e) => QaScore {
                    doc_id: ex.doc_id.clone(),
                    question: ex.question.clone(),
                    gold: ex.answer.clone(),
                    prediction: None,
                    em: 0.0,
                    f1: 0.0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    QaReport { mode, scores }
}

/// One row per mode: `mode, em, f1, failed, n`.
pub fn qa_table(reports: &[QaReport], config_digest: &str, seed: u64, wall_clock_secs: f64) -> BenchResult {
    BenchResult {
        name: "qa".into(),
        config_digest: config_digest.into(),
        seed,
        wall_clock_secs,
        columns: ["mode", "em", "f1", "failed", "n"].map(String::from).to_vec(),
        rows: reports
            .iter()
            .map(|r| {
                vec![
                    Cell::from(r.mode.as_str()),
                    Cell::from(r.em()),
                    Cell::from(r.f1()),
                    Cell::from(r.failed()),
                    Cell::from(r.scores.len()),
                ]
            })
            .collect(),
        summary: reports.iter().map(|r| (format!("{}_em", r.mode.as_str()), r.em())).collect(),
    }
}
