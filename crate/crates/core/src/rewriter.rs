//! Query rewriting into field-aligned tool needs and extracted arguments.
//!
//! The LLM route conditions on pseudo-relevance feedback: the top BM25
//! descriptions of the standardized corpus and a few full standardized
//! documents as schema exemplars. [`mock_rewrite`] is a rule-based offline
//! substitute.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{content_key, ContentCache};
use crate::corpus::Query;
use crate::error::{Error, Result};
use crate::provider::{
    complete_structured, extract_json_object, ChatMessage, ChatProvider, LlmRequest,
};
use crate::retrieval::{tokenize, Bm25Params, SparseIndex};
use crate::standardizer::StandardizedTool;

pub const TEMPLATE_VERSION: &str = "rewrite-v1";
const TEMPLATE: &str = include_str!("../prompts/rewrite_v1.txt");

pub const DEFAULT_MAX_NEEDS: usize = 8;
pub const DEFAULT_PRF_K: usize = 20;
pub const DEFAULT_EXEMPLARS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolNeed {
    pub user_intent: String,
    pub tool_description: String,
    pub expected_response: String,
}

impl ToolNeed {
    fn is_complete(&self) -> bool {
        [
            &self.user_intent,
            &self.tool_description,
            &self.expected_response,
        ]
        .iter()
        .all(|s| !s.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentSpec {
    pub role: String,
    #[serde(rename = "type", default)]
    pub type_hint: String,
}

impl ArgumentSpec {
    pub fn new(role: impl Into<String>, type_hint: impl Into<String>) -> Self {
        ArgumentSpec {
            role: role.into(),
            type_hint: type_hint.into(),
        }
    }

    /// `role (type)`, the argument-side counterpart of a rendered parameter.
    pub fn render(&self) -> String {
        format!("{} ({})", self.role, self.type_hint)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenQuery {
    pub query_id: String,
    pub tool_needs: Vec<ToolNeed>,
    #[serde(default)]
    pub extracted_arguments: Vec<ArgumentSpec>,
}

impl RewrittenQuery {
    /// The identity rewrite: the query text is the only need and the only
    /// argument. Used by ablation variants that skip rewriting.
    pub fn passthrough(query: &Query) -> Self {
        RewrittenQuery {
            query_id: query.id.clone(),
            tool_needs: vec![ToolNeed {
                user_intent: query.text.clone(),
                tool_description: query.text.clone(),
                expected_response: query.text.clone(),
            }],
            extracted_arguments: vec![ArgumentSpec::new(query.text.clone(), "")],
        }
    }

    pub fn validate(&self, max_needs: usize) -> Result<()> {
        let fail = |message: String| Error::Rewrite {
            query_id: self.query_id.clone(),
            message,
        };
        if self.tool_needs.is_empty() {
            return Err(fail("no tool needs".into()));
        }
        if self.tool_needs.len() > max_needs {
            return Err(fail(format!(
                "{} tool needs exceed the cap of {max_needs}",
                self.tool_needs.len()
            )));
        }
        if let Some(i) = self.tool_needs.iter().position(|n| !n.is_complete()) {
            return Err(fail(format!("tool need {i} has an empty field")));
        }
        if self
            .extracted_arguments
            .iter()
            .any(|a| a.role.trim().is_empty())
        {
            return Err(fail("argument with empty role".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfCandidate {
    pub tool_id: String,
    pub description: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfContext {
    pub candidates: Vec<PrfCandidate>,
    pub exemplar_docs: Vec<StandardizedTool>,
}

impl PrfContext {
    pub fn candidate_ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.tool_id.as_str()).collect()
    }
}

/// BM25 over standardized descriptions, used only for feedback.
#[derive(Debug, Clone)]
pub struct PrfIndex {
    index: SparseIndex,
    tools: BTreeMap<String, StandardizedTool>,
}

impl PrfIndex {
    pub fn build(tools: &[StandardizedTool]) -> Result<Self> {
        if tools.is_empty() {
            return Err(Error::Config(
                "feedback index needs at least one tool".into(),
            ));
        }
        let index = SparseIndex::build(
            tools
                .iter()
                .map(|t| (t.tool_id.as_str(), t.description.as_str())),
            Bm25Params::default(),
        )?;
        let tools = tools
            .iter()
            .map(|t| (t.tool_id.clone(), t.clone()))
            .collect();
        Ok(PrfIndex { index, tools })
    }

    pub fn index(&self) -> &SparseIndex {
        &self.index
    }

    /// Top `k` descriptions for the query text and the full documents of
    /// the first `exemplars` of them.
    pub fn candidates(&self, query: &Query, k: usize, exemplars: usize) -> PrfContext {
        let hits = self.index.top_n(&tokenize(&query.text), k);
        let candidates: Vec<PrfCandidate> = hits
            .into_iter()
            .map(|(tool_id, score)| PrfCandidate {
                description: self.tools[&tool_id].description.clone(),
                tool_id,
                score,
            })
            .collect();
        let exemplar_docs = candidates
            .iter()
            .take(exemplars)
            .map(|c| self.tools[&c.tool_id].clone())
            .collect();
        PrfContext {
            candidates,
            exemplar_docs,
        }
    }
}

pub fn prf_candidates(query: &Query, index: &PrfIndex, k: usize) -> PrfContext {
    index.candidates(query, k, DEFAULT_EXEMPLARS)
}

#[derive(Deserialize)]
struct ModelOutput {
    tool_needs: Vec<ToolNeed>,
    #[serde(default)]
    extracted_arguments: Vec<ArgumentSpec>,
}

fn parse_model_output(
    query_id: &str,
    max_needs: usize,
    text: &str,
) -> std::result::Result<RewrittenQuery, String> {
    let json = extract_json_object(text).ok_or("no JSON object in reply")?;
    let out: ModelOutput = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let mut rq = RewrittenQuery {
        query_id: query_id.to_string(),
        tool_needs: out.tool_needs,
        extracted_arguments: out.extracted_arguments,
    };
    if rq.tool_needs.len() > max_needs {
        log::warn!(
            "query {query_id:?}: keeping the first {max_needs} of {} tool needs",
            rq.tool_needs.len()
        );
        rq.tool_needs.truncate(max_needs);
    }
    rq.validate(max_needs).map_err(|e| e.to_string())?;
    Ok(rq)
}

pub fn cache_key(query: &Query, prf: &PrfContext) -> String {
    content_key([
        query.text.as_str(),
        prf.candidate_ids().join("\n").as_str(),
        TEMPLATE_VERSION,
    ])
}

pub fn build_request(query: &Query, prf: &PrfContext, max_needs: usize) -> LlmRequest {
    let candidates = prf
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, c.description))
        .collect::<Vec<_>>()
        .join("\n");
    // tool ids stay out of the prompt, like tool names stay out of the fields
    let exemplars = prf
        .exemplar_docs
        .iter()
        .map(|t| {
            serde_json::json!({
                "description": t.description,
                "parameters": t.parameters,
                "response": t.response,
                "examples": t.examples,
            })
            .to_string()
        })
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = TEMPLATE
        .replace("{{MAX_NEEDS}}", &max_needs.to_string())
        .replace("{{CANDIDATES}}", &candidates)
        .replace("{{EXEMPLARS}}", &exemplars)
        .replace("{{QUERY}}", &query.text);
    LlmRequest::new(vec![
        ChatMessage::system(
            "You analyze user requests for a tool retrieval system. You answer with JSON only.",
        ),
        ChatMessage::user(prompt),
    ])
}

pub fn rewrite(
    query: &Query,
    prf: &PrfContext,
    provider: &dyn ChatProvider,
    cache: &ContentCache,
    max_needs: usize,
) -> Result<RewrittenQuery> {
    let key = cache_key(query, prf);
    if let Some(text) = cache.get(&key)? {
        match parse_model_output(&query.id, max_needs, &text) {
            Ok(rq) => return Ok(rq),
            Err(e) => log::warn!("ignoring unparseable cache entry {key}: {e}"),
        }
    }
    let outcome = complete_structured(provider, build_request(query, prf, max_needs), |text| {
        parse_model_output(&query.id, max_needs, text)
    })?;
    let (rq, text) = outcome.map_err(|message| Error::Rewrite {
        query_id: query.id.clone(),
        message,
    })?;
    cache.put(&key, &text)?;
    Ok(rq)
}

const CLAUSE_MARKERS: &[&str] = &["and then", ";", ", then", " then "];

const ACTION_VERBS: &[&str] = &[
    "add",
    "analyze",
    "analyse",
    "book",
    "buy",
    "calculate",
    "check",
    "compare",
    "compute",
    "convert",
    "create",
    "delete",
    "download",
    "draft",
    "draw",
    "email",
    "estimate",
    "explain",
    "extract",
    "fetch",
    "find",
    "generate",
    "get",
    "list",
    "look",
    "make",
    "notify",
    "open",
    "order",
    "plan",
    "play",
    "plot",
    "post",
    "predict",
    "read",
    "recommend",
    "remove",
    "reserve",
    "retrieve",
    "schedule",
    "search",
    "send",
    "set",
    "share",
    "show",
    "summarize",
    "summarise",
    "tell",
    "translate",
    "update",
    "upload",
    "visualize",
    "write",
];

const CURRENCY_CODES: &[&str] = &[
    "AUD", "BRL", "CAD", "CHF", "CNY", "CZK", "DKK", "EUR", "GBP", "HKD", "HUF", "IDR", "ILS",
    "INR", "JPY", "KRW", "MXN", "NOK", "NZD", "PHP", "PLN", "RUB", "SEK", "SGD", "THB", "TRY",
    "USD", "ZAR",
];

fn split_on_markers(text: &str) -> Vec<String> {
    // ASCII lowercasing keeps byte offsets aligned with `text`
    let lower = text.to_ascii_lowercase();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < text.len() {
        let hit = CLAUSE_MARKERS.iter().find(|m| lower[i..].starts_with(**m));
        match hit {
            Some(m) => {
                pieces.push(text[start..i].to_string());
                i += m.len();
                start = i;
            }
            None => i += lower[i..].chars().next().map_or(1, char::len_utf8),
        }
    }
    pieces.push(text[start..].to_string());
    pieces
}

/// Splits at " and " when the next word is an action verb.
fn split_on_verb_conjunction(clause: &str) -> Vec<String> {
    let lower = clause.to_ascii_lowercase();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut from = 0;
    while let Some(off) = lower[from..].find(" and ") {
        let at = from + off;
        let rest = &lower[at + 5..];
        let next: String = rest.chars().take_while(|c| c.is_alphabetic()).collect();
        if ACTION_VERBS.contains(&next.as_str()) {
            pieces.push(clause[start..at].to_string());
            start = at + 5;
        }
        from = at + 5;
    }
    pieces.push(clause[start..].to_string());
    pieces
}

fn clean_clause(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| matches!(c, '.' | '?' | '!' | ',') || c.is_whitespace())
        .to_string()
}

fn split_clauses(text: &str, max_needs: usize) -> Vec<String> {
    let mut clauses: Vec<String> = split_on_markers(text)
        .iter()
        .flat_map(|c| split_on_verb_conjunction(c))
        .map(|c| clean_clause(&c))
        .filter(|c| !c.is_empty())
        .collect();
    if clauses.len() > max_needs.max(1) {
        let tail = clauses.split_off(max_needs.max(1) - 1).join(" and ");
        clauses.push(tail);
    }
    if clauses.is_empty() {
        clauses.push(text.trim().to_string());
    }
    clauses
}

fn is_number(word: &str) -> bool {
    word.chars().any(|c| c.is_ascii_digit())
        && word
            .chars()
            .all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

fn extract_arguments(text: &str) -> Vec<ArgumentSpec> {
    let mut args = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |args: &mut Vec<ArgumentSpec>, role: &str, type_hint: &str| {
        if !role.is_empty() && seen.insert(role.to_string()) {
            args.push(ArgumentSpec::new(role, type_hint));
        }
    };

    // quoted spans first, then the remaining text word by word
    let mut unquoted = String::new();
    let mut quoted = String::new();
    let mut in_quote = false;
    for c in text.chars() {
        match c {
            '"' | '\u{201c}' | '\u{201d}' => {
                if in_quote {
                    push(&mut args, quoted.trim(), "string");
                    quoted.clear();
                    unquoted.push(' ');
                }
                in_quote = !in_quote;
            }
            _ if in_quote => quoted.push(c),
            _ => unquoted.push(c),
        }
    }

    let mut sentence_start = true;
    let mut previous = String::new();
    let mut saw_source_currency = false;
    for raw in unquoted.split_whitespace() {
        let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
        let ends_sentence = raw.ends_with(['.', '?', '!']);
        if word.is_empty() {
            sentence_start |= ends_sentence;
            continue;
        }
        if CURRENCY_CODES.contains(&word) {
            if matches!(previous.as_str(), "to" | "into") || saw_source_currency {
                push(&mut args, "target currency", "string");
            } else {
                push(&mut args, "source currency", "string");
                saw_source_currency = true;
            }
        } else if is_number(word) {
            push(&mut args, "amount", "number");
        } else if !sentence_start && word.chars().next().is_some_and(char::is_uppercase) {
            push(&mut args, word, "string");
        }
        previous = word.to_lowercase();
        sentence_start = ends_sentence;
    }
    args
}

/// Rule-based rewrite: clauses become tool needs, quoted spans,
/// capitalized words, numbers and currency codes become arguments.
pub fn mock_rewrite(query: &Query) -> RewrittenQuery {
    mock_rewrite_capped(query, DEFAULT_MAX_NEEDS)
}

pub fn mock_rewrite_capped(query: &Query, max_needs: usize) -> RewrittenQuery {
    let tool_needs = split_clauses(&query.text, max_needs)
        .into_iter()
        .map(|clause| ToolNeed {
            user_intent: clause.clone(),
            tool_description: clause.clone(),
            expected_response: format!("result of: {clause}"),
        })
        .collect();
    RewrittenQuery {
        query_id: query.id.clone(),
        tool_needs,
        extracted_arguments: extract_arguments(&query.text),
    }
}

#[derive(Clone, Copy)]
pub enum Rewriter<'a> {
    Mock,
    Llm {
        provider: &'a dyn ChatProvider,
        cache: &'a ContentCache,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct RewriteSettings {
    pub prf_k: usize,
    pub exemplars: usize,
    pub max_needs: usize,
    pub parallelism: usize,
}

impl Default for RewriteSettings {
    fn default() -> Self {
        RewriteSettings {
            prf_k: DEFAULT_PRF_K,
            exemplars: DEFAULT_EXEMPLARS,
            max_needs: DEFAULT_MAX_NEEDS,
            parallelism: crate::standardizer::DEFAULT_PARALLELISM,
        }
    }
}

impl Rewriter<'_> {
    pub fn run_all(
        &self,
        queries: &[Query],
        prf: &PrfIndex,
        settings: RewriteSettings,
    ) -> Result<Vec<RewrittenQuery>> {
        let one = |q: &Query| -> Result<RewrittenQuery> {
            match self {
                Rewriter::Mock => Ok(mock_rewrite_capped(q, settings.max_needs)),
                Rewriter::Llm { provider, cache } => {
                    let ctx = prf.candidates(q, settings.prf_k, settings.exemplars);
                    rewrite(q, &ctx, *provider, cache, settings.max_needs)
                }
            }
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.parallelism.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| queries.par_iter().map(one).collect())
    }
}

pub fn write_rewritten(path: &Path, rewritten: &[RewrittenQuery]) -> Result<()> {
    crate::corpus::write_jsonl(path, rewritten)
}

pub fn read_rewritten(path: &Path) -> Result<Vec<RewrittenQuery>> {
    crate::corpus::read_jsonl(path)
}
