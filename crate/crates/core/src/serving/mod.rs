//! Query-time flow: embed the question once, retrieve passages, gather their
//! compressed chunks, pick the group's adaptor, and decode.

mod artifacts;
mod http;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdaptor;
use crate::model::{detokenize, tokenize, EmbeddingSequence, GenerateMode, ModelWeights, TokenId};
use crate::store::{Embedder, Hit, VectorStore, DEFAULT_TOP_K};
use crate::trainer::{prompt_tokens, ANSWER_END};

pub use artifacts::{preprocess, Artifacts, PreprocessReport, SkippedDoc};
pub use http::{router, serve_http};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServeMode {
    NoContext,
    FullContext,
    Retrieval,
    CompressedUnfinetuned,
    Lloco,
}

impl ServeMode {
    pub const ALL: [ServeMode; 5] = [
        ServeMode::NoContext,
        ServeMode::FullContext,
        ServeMode::Retrieval,
        ServeMode::CompressedUnfinetuned,
        ServeMode::Lloco,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ServeMode::NoContext => "no_context",
            ServeMode::FullContext => "full_context",
            ServeMode::Retrieval => "retrieval",
            ServeMode::CompressedUnfinetuned => "compressed_unfinetuned",
            ServeMode::Lloco => "lloco",
        }
    }
}

impl std::str::FromStr for ServeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ServeMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

/// How an adaptor is chosen when retrieved passages disagree on group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GroupPolicy {
    /// Mixed groups are an error.
    #[default]
    Strict,
    /// The most frequent group wins; ties go to the smallest group id.
    Majority,
}

fn default_max_new() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeRequest {
    pub question: String,
    #[serde(default)]
    pub group_id: Option<String>,
    /// Restricts retrieval (and full-context mode) to one document.
    #[serde(default)]
    pub doc_id: Option<String>,
    pub mode: ServeMode,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl ServeRequest {
    pub fn new(question: impl Into<String>, mode: ServeMode) -> Self {
        Self {
            question: question.into(),
            group_id: None,
            doc_id: None,
            mode,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// What was fed to the decoder ahead of generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptComposition {
    pub summary_rows: usize,
    pub context_tokens: usize,
    pub question_tokens: usize,
}

impl PromptComposition {
    pub fn total(&self) -> usize {
        self.summary_rows + self.context_tokens + self.question_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeResponse {
    pub answer: String,
    pub retrieved_passage_ids: Vec<u64>,
    pub adaptor_id: Option<String>,
    pub composition: PromptComposition,
    pub latency_ms: f64,
}

/// Picks the single group of `groups` under `policy`.
pub fn resolve_group<'g>(groups: impl IntoIterator<Item = &'g str>, policy: GroupPolicy) -> Result<Option<String>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        *counts.entry(g).or_default() += 1;
    }
    match counts.len() {
        0 => Ok(None),
        1 => Ok(counts.keys().next().map(|g| g.to_string())),
        _ if policy == GroupPolicy::Strict => Err(Error::MixedGroups(counts.keys().map(|g| g.to_string()).collect())),
        _ => {
            // BTreeMap iterates in ascending id order and `max_by` keeps the
            // last maximum, so iterate in reverse to prefer the smallest id.
            let best = counts
                .iter()
                .rev()
                .max_by_key(|(_, &n)| n)
                .map(|(g, _)| g.to_string());
            Ok(best)
        }
    }
}

/// Everything a query reads. Nothing here is mutated by serving.
pub struct ServeContext<'a> {
    pub weights: &'a ModelWeights,
    pub store: &'a VectorStore,
    pub adaptors: &'a HashMap<String, LoraAdaptor>,
    pub embedder: &'a Embedder,
    pub policy: GroupPolicy,
}

impl ServeContext<'_> {
    fn retrieve(&self, req: &ServeRequest, query: &ndarray::Array1<f64>) -> Result<Vec<Hit<'_>>> {
        match &req.doc_id {
            Some(doc) => {
                if !self.store.documents().contains_key(doc) {
                    return Err(Error::UnknownDocument(doc.clone()));
                }
                self.store.top_k_where(query, req.top_k, |r| &r.doc_id == doc)
            }
            None => self.store.top_k(query, req.top_k),
        }
    }

    fn adaptor_for(&self, req: &ServeRequest, hits: &[Hit<'_>]) -> Result<&LoraAdaptor> {
        let group = match &req.group_id {
            Some(g) => g.clone(),
            None => resolve_group(hits.iter().map(|h| h.record.group_id.as_str()), self.policy)?
                .ok_or_else(|| Error::AdaptorNotFound("<no retrieved passages>".into()))?,
        };
        self.adaptors.get(&group).ok_or(Error::AdaptorNotFound(group))
    }
}

/// Answers one request. The prompt is laid out as
/// `[summary rows; context tokens; Q: question \nA: ]`.
pub fn serve_query(req: &ServeRequest, ctx: &ServeContext<'_>) -> Result<ServeResponse> {
    let started = Instant::now();
    let w = ctx.weights;
    let window = w.config.window;
    let question = prompt_tokens(&req.question);
    let mut prefix = EmbeddingSequence::empty(w.config.d_model);
    let mut context: Vec<TokenId> = Vec::new();
    let mut passage_ids = Vec::new();
    let mut adaptor = None;
    let room = window.saturating_sub(question.len() + req.max_new_tokens);

    if req.mode != ServeMode::NoContext {
        let query = ctx.embedder.embed(&req.question);
        let hits = match req.mode {
            ServeMode::FullContext if req.doc_id.is_some() => Vec::new(),
            ServeMode::FullContext => ctx.store.top_k(&query, 1)?,
            _ => ctx.retrieve(req, &query)?,
        };
        passage_ids = hits.iter().map(|h| h.record.passage_id).collect();
        match req.mode {
            ServeMode::FullContext => {
                let doc = match &req.doc_id {
                    Some(d) => d.clone(),
                    None => hits[0].record.doc_id.clone(),
                };
                context = tokenize(&ctx.store.doc_text(&doc)?);
                context.truncate(room);
            }
            ServeMode::Retrieval => {
                for h in &hits {
                    context.extend(tokenize(&h.record.text));
                }
                context.truncate(room);
            }
            ServeMode::CompressedUnfinetuned | ServeMode::Lloco => {
                prefix = ctx.store.gather_summaries(hits.iter().map(|h| h.record))?;
                if req.mode == ServeMode::Lloco {
                    adaptor = Some(ctx.adaptor_for(req, &hits)?);
                }
            }
            ServeMode::NoContext => unreachable!(),
        }
    }

    let composition = PromptComposition {
        summary_rows: prefix.len(),
        context_tokens: context.len(),
        question_tokens: question.len(),
    };
    let needed = composition.total() + req.max_new_tokens;
    if needed > window {
        return Err(Error::LengthOverflow { len: needed, window });
    }
    let mut prompt = context;
    prompt.extend_from_slice(&question);
    let answer = if req.max_new_tokens == 0 {
        String::new()
    } else {
        let mut out = w.generate_until(
            &prefix,
            &prompt,
            req.max_new_tokens,
            GenerateMode::Greedy,
            adaptor,
            Some(ANSWER_END as TokenId),
        )?;
        if out.last() == Some(&(ANSWER_END as TokenId)) {
            out.pop();
        }
        detokenize(&out)
    };
    Ok(ServeResponse {
        answer,
        retrieved_passage_ids: passage_ids,
        adaptor_id: adaptor.map(|a| a.adaptor_id.clone()),
        composition,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}
