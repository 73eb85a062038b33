//! Evaluation harness: answer metrics, QA over every serving mode, the
//! needle grid, and the latency and throughput benchmarks. Every benchmark
//! can be rendered as a [`BenchResult`] and written as CSV plus JSON.

mod latency;
mod metrics;
mod needle;
mod qa;
mod report;
mod throughput;

pub use latency::{
    latency_bench, latency_table, with_window, CellStatus, LatencyCell, LatencyConfig, LatencyMode, LatencyTable,
};
pub use metrics::{contains_answer, exact_match, f1_score, normalize_answer};
pub use needle::{
    needle_document, needle_grid, needle_table, needle_training_docs, train_needle_adaptor, NeedleCell, NeedleGrid, NeedleGridConfig,
    NeedleVariant, NEEDLE_GROUP,
};
pub use qa::{qa_eval, qa_table, QaReport, QaScore};
pub use report::{BenchResult, Cell};
pub use throughput::{throughput_bench, throughput_table, ThroughputConfig, ThroughputResult};
