//! Relevance functions over per-field tool corpora.
//!
//! A [`RelevanceBackend`] owns one index per standardized field, one over the
//! concatenated document (for the single-text baseline and negative mining)
//! and one over individual rendered parameters. The sparse variant scores
//! with BM25, the dense variant with cosine similarity of unit embeddings.

mod dense;
mod sparse;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dense::{cosine, embed, text_hash, EmbeddingStore, HashingEmbedder};
pub use sparse::{Bm25Params, Posting, SparseIndex, DEFAULT_B, DEFAULT_K1};

use crate::error::{Error, Result};
use crate::provider::EmbeddingProvider;
use crate::standardizer::StandardizedTool;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldId {
    Description,
    Parameters,
    Response,
    Examples,
}

impl FieldId {
    pub const ALL: [FieldId; 4] = [
        FieldId::Description,
        FieldId::Parameters,
        FieldId::Response,
        FieldId::Examples,
    ];

    /// Fields matched by text similarity against the tool needs.
    pub const SEMANTIC: [FieldId; 3] = [FieldId::Description, FieldId::Response, FieldId::Examples];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FieldId::Description => "description",
            FieldId::Parameters => "parameters",
            FieldId::Response => "response",
            FieldId::Examples => "examples",
        }
    }
}

impl fmt::Display for FieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FieldId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FieldId::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown field {s:?}")))
    }
}

/// Flat text of one field of a standardized tool.
pub fn field_text(tool: &StandardizedTool, field: FieldId) -> String {
    match field {
        FieldId::Description => tool.description.clone(),
        FieldId::Parameters => tool
            .parameters
            .iter()
            .map(|p| p.render())
            .collect::<Vec<_>>()
            .join("\n"),
        FieldId::Response => tool.response.clone(),
        FieldId::Examples => tool.examples.join("\n"),
    }
}

/// All four fields, newline-joined in schema order.
pub fn concat_fields(tool: &StandardizedTool) -> String {
    FieldId::ALL
        .iter()
        .map(|&f| field_text(tool, f))
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldCorpus {
    pub field: FieldId,
    pub docs: BTreeMap<String, String>,
}

impl FieldCorpus {
    pub fn from_tools(tools: &[StandardizedTool], field: FieldId) -> Self {
        FieldCorpus {
            field,
            docs: tools
                .iter()
                .map(|t| (t.tool_id.clone(), field_text(t, field)))
                .collect(),
        }
    }
}

/// Texts a backend indexes, keyed by tool id.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendDocs {
    pub fields: [BTreeMap<String, String>; 4],
    pub full_doc: BTreeMap<String, String>,
    pub params: BTreeMap<String, Vec<String>>,
}

impl BackendDocs {
    /// Field texts from standardized tools; the full document is the
    /// concatenation of all four fields.
    pub fn from_standardized(tools: &[StandardizedTool]) -> Self {
        let fields = FieldId::ALL.map(|f| FieldCorpus::from_tools(tools, f).docs);
        BackendDocs {
            fields,
            full_doc: tools
                .iter()
                .map(|t| (t.tool_id.clone(), concat_fields(t)))
                .collect(),
            params: tools
                .iter()
                .map(|t| {
                    (
                        t.tool_id.clone(),
                        t.parameters.iter().map(|p| p.render()).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn with_full_doc(mut self, full_doc: BTreeMap<String, String>) -> Self {
        self.full_doc = full_doc;
        self
    }

    fn tool_ids(&self) -> Result<Vec<String>> {
        let ids: Vec<String> = self.fields[0].keys().cloned().collect();
        let same = |m: &BTreeMap<String, String>| m.len() == ids.len() && m.keys().eq(ids.iter());
        if !self.fields.iter().all(same)
            || !same(&self.full_doc)
            || self.params.len() != ids.len()
            || !self.params.keys().eq(ids.iter())
        {
            return Err(Error::Config(
                "backend corpora do not cover the same tool ids".into(),
            ));
        }
        if ids.is_empty() {
            return Err(Error::Config(
                "cannot build a backend over zero tools".into(),
            ));
        }
        Ok(ids)
    }

    /// Parameter unit ids sort in tool order, so each tool's units form a
    /// contiguous range.
    fn param_units(&self) -> (Vec<(String, String)>, Vec<Range<usize>>) {
        let mut units = Vec::new();
        let mut ranges = Vec::with_capacity(self.params.len());
        for (pos, params) in self.params.values().enumerate() {
            let start = units.len();
            for (j, text) in params.iter().enumerate() {
                units.push((format!("{pos:09}:{j:05}"), text.clone()));
            }
            ranges.push(start..units.len());
        }
        (units, ranges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Sparse,
    Dense,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Sparse => "sparse",
            BackendKind::Dense => "dense",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" | "bm25" => Ok(BackendKind::Sparse),
            "dense" => Ok(BackendKind::Dense),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// What a query is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Field(FieldId),
    FullDoc,
}

/// Query text in the representation a backend scores.
#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    Tokens(Vec<String>),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenseIndex {
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum TextIndex {
    Sparse(SparseIndex),
    Dense(DenseIndex),
}

impl TextIndex {
    fn score_all(&self, q: &Prepared) -> Vec<f64> {
        match (self, q) {
            (TextIndex::Sparse(idx), Prepared::Tokens(t)) => idx.score_all(t),
            (TextIndex::Dense(idx), Prepared::Vector(v)) => {
                idx.vectors.iter().map(|d| unit_dot(d, v)).collect()
            }
            _ => unreachable!("prepared query kind always matches the backend kind"),
        }
    }

    fn score_at(&self, q: &Prepared, pos: usize) -> f64 {
        match (self, q) {
            (TextIndex::Sparse(idx), Prepared::Tokens(t)) => idx.score_at(t, pos),
            (TextIndex::Dense(idx), Prepared::Vector(v)) => unit_dot(&idx.vectors[pos], v),
            _ => unreachable!("prepared query kind always matches the backend kind"),
        }
    }
}

fn unit_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

/// The relevance function shared by every scoring stage. Built indexes are
/// never mutated; the dense variant additionally keeps a table of embedded
/// query-side texts that must be filled by [`RelevanceBackend::embed_queries`]
/// before those texts can be scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelevanceBackend {
    kind: BackendKind,
    tool_ids: Vec<String>,
    fields: Vec<TextIndex>,
    full_doc: TextIndex,
    param_units: Option<TextIndex>,
    param_ranges: Vec<Range<usize>>,
    provider_tag: Option<String>,
    #[serde(skip)]
    queries: HashMap<String, Vec<f64>>,
}

impl RelevanceBackend {
    pub fn build_sparse(docs: &BackendDocs, params: Bm25Params) -> Result<Self> {
        let tool_ids = docs.tool_ids()?;
        let fields = docs
            .fields
            .iter()
            .map(|m| SparseIndex::build(m.iter(), params).map(TextIndex::Sparse))
            .collect::<Result<Vec<_>>>()?;
        let full_doc = TextIndex::Sparse(SparseIndex::build(docs.full_doc.iter(), params)?);
        let (units, param_ranges) = docs.param_units();
        let param_units = if units.is_empty() {
            None
        } else {
            Some(TextIndex::Sparse(SparseIndex::build(units, params)?))
        };
        Ok(RelevanceBackend {
            kind: BackendKind::Sparse,
            tool_ids,
            fields,
            full_doc,
            param_units,
            param_ranges,
            provider_tag: None,
            queries: HashMap::new(),
        })
    }

    pub fn build_dense(
        docs: &BackendDocs,
        provider: &dyn EmbeddingProvider,
        store: &mut EmbeddingStore,
    ) -> Result<Self> {
        let tool_ids = docs.tool_ids()?;
        let mut dense = |texts: Vec<String>| -> Result<TextIndex> {
            Ok(TextIndex::Dense(DenseIndex {
                vectors: embed(provider, &texts, store)?,
            }))
        };
        let fields = docs
            .fields
            .iter()
            .map(|m| dense(m.values().cloned().collect()))
            .collect::<Result<Vec<_>>>()?;
        let full_doc = dense(docs.full_doc.values().cloned().collect())?;
        let (units, param_ranges) = docs.param_units();
        let param_units = if units.is_empty() {
            None
        } else {
            Some(dense(units.into_iter().map(|(_, t)| t).collect())?)
        };
        Ok(RelevanceBackend {
            kind: BackendKind::Dense,
            tool_ids,
            fields,
            full_doc,
            param_units,
            param_ranges,
            provider_tag: Some(provider.tag().to_string()),
            queries: HashMap::new(),
        })
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn tool_ids(&self) -> &[String] {
        &self.tool_ids
    }

    pub fn position(&self, tool_id: &str) -> Option<usize> {
        self.tool_ids
            .binary_search_by(|t| t.as_str().cmp(tool_id))
            .ok()
    }

    /// Embeds query-side texts for the dense variant; a no-op for sparse.
    pub fn embed_queries(
        &mut self,
        provider: &dyn EmbeddingProvider,
        store: &mut EmbeddingStore,
        texts: &[String],
    ) -> Result<()> {
        if self.kind == BackendKind::Sparse {
            return Ok(());
        }
        if self.provider_tag.as_deref() != Some(provider.tag()) {
            return Err(Error::Config(format!(
                "backend was built with {:?}, not {:?}",
                self.provider_tag,
                provider.tag()
            )));
        }
        let vectors = embed(provider, texts, store)?;
        for (t, v) in texts.iter().zip(vectors) {
            self.queries.insert(text_hash(t), v);
        }
        Ok(())
    }

    pub fn prepare(&self, text: &str) -> Result<Prepared> {
        match self.kind {
            BackendKind::Sparse => Ok(Prepared::Tokens(tokenize(text))),
            BackendKind::Dense => self
                .queries
                .get(&text_hash(text))
                .cloned()
                .map(Prepared::Vector)
                .ok_or_else(|| Error::Config(format!("query text {text:?} has not been embedded"))),
        }
    }

    fn index(&self, target: Target) -> &TextIndex {
        match target {
            Target::Field(f) => &self.fields[f.index()],
            Target::FullDoc => &self.full_doc,
        }
    }

    /// Scores of every tool against `target`, aligned with [`Self::tool_ids`].
    pub fn score_all(&self, target: Target, query: &Prepared) -> Vec<f64> {
        self.index(target).score_all(query)
    }

    pub fn score_at(&self, target: Target, query: &Prepared, pos: usize) -> f64 {
        self.index(target).score_at(query, pos)
    }

    pub fn score(&self, target: Target, query: &str, tool_id: &str) -> Result<f64> {
        let pos = self
            .position(tool_id)
            .ok_or_else(|| Error::UnknownTool(tool_id.to_string()))?;
        Ok(self.score_at(target, &self.prepare(query)?, pos))
    }

    pub fn top_n(&self, target: Target, query: &Prepared, n: usize) -> Vec<(String, f64)> {
        top_n_by_score(&self.tool_ids, &self.score_all(target, query), n)
    }

    pub fn param_count(&self, pos: usize) -> usize {
        self.param_ranges[pos].len()
    }

    /// For each parameter of the tool at `pos`, the best relevance of any
    /// argument to it. With no arguments every parameter scores 0.
    pub fn param_scores(&self, pos: usize, args: &[Prepared]) -> Vec<f64> {
        let range = self.param_ranges[pos].clone();
        let Some(units) = &self.param_units else {
            return Vec::new();
        };
        range
            .map(|unit| {
                args.iter()
                    .map(|a| units.score_at(a, unit))
                    .fold(None, |best: Option<f64>, s| {
                        Some(best.map_or(s, |b| b.max(s)))
                    })
                    .unwrap_or(0.0)
            })
            .collect()
    }
}

/// Sorts by score descending, then id ascending, and keeps the first `n`.
pub fn top_n_by_score(ids: &[String], scores: &[f64], n: usize) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        (scores[b] + 0.0)
            .total_cmp(&(scores[a] + 0.0))
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    order
        .into_iter()
        .take(n)
        .map(|i| (ids[i].clone(), scores[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::standardizer::ParamSpec;

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("Get_Weather(city)"), ["get", "weather", "city"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("USD→EUR 5x"), ["usd", "eur", "5x"]);
        assert_eq!(tokenize("Ünïcode wörds"), ["ünïcode", "wörds"]);
    }

    fn tool(id: &str, desc: &str, params: &[&str]) -> StandardizedTool {
        StandardizedTool {
            tool_id: id.into(),
            description: desc.into(),
            parameters: params
                .iter()
                .map(|p| ParamSpec::new(*p, "string", format!("the {p}"), true))
                .collect(),
            response: format!("{desc} result"),
            examples: vec![format!("please {desc}")],
        }
    }

    #[test]
    fn parameters_render_one_line_each() {
        let mut t = tool("t", "x", &["city"]);
        t.parameters.push(ParamSpec::new(
            "units",
            "string",
            "metric or imperial",
            false,
        ));
        assert_eq!(
            field_text(&t, FieldId::Parameters),
            "city (string): the city [required]\nunits (string): metric or imperial [optional]"
        );
    }

    #[test]
    fn top_n_matches_exhaustive_sort() {
        let tools = vec![
            tool("b", "weather forecast", &["city"]),
            tool("a", "weather", &["city", "date"]),
            tool("c", "stock price", &["ticker"]),
            tool("d", "", &[]),
        ];
        let backend = RelevanceBackend::build_sparse(
            &BackendDocs::from_standardized(&tools),
            Bm25Params::default(),
        )
        .unwrap();
        let q = backend.prepare("weather price").unwrap();
        for field in FieldId::ALL {
            let target = Target::Field(field);
            let top = backend.top_n(target, &q, 10);
            let mut brute: Vec<(String, f64)> = backend
                .tool_ids()
                .iter()
                .map(|id| {
                    (
                        id.clone(),
                        backend.score(target, "weather price", id).unwrap(),
                    )
                })
                .collect();
            brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            assert_eq!(top, brute);
        }
    }

    #[test]
    fn param_scores_take_best_argument() {
        let tools = vec![
            tool("a", "weather", &["city", "date"]),
            tool("b", "none", &[]),
        ];
        let backend = RelevanceBackend::build_sparse(
            &BackendDocs::from_standardized(&tools),
            Bm25Params::default(),
        )
        .unwrap();
        let args = vec![backend.prepare("city (string)").unwrap()];
        let s = backend.param_scores(0, &args);
        assert_eq!(s.len(), 2);
        assert!(s[0] > s[1]);
        assert_eq!(backend.param_scores(0, &[]), vec![0.0, 0.0]);
        assert!(backend.param_scores(1, &args).is_empty());
    }

    #[test]
    fn dense_identical_texts_score_one() {
        let tools = vec![
            tool("a", "weather", &["city"]),
            tool("b", "stock price", &["ticker"]),
        ];
        let docs = BackendDocs::from_standardized(&tools);
        let provider = HashingEmbedder::new(64);
        let mut store = EmbeddingStore::new(provider.tag());
        let mut backend = RelevanceBackend::build_dense(&docs, &provider, &mut store).unwrap();
        let text = tools[0].parameters[0].render();
        assert!(backend.prepare(&text).is_err());
        backend
            .embed_queries(&provider, &mut store, &[text.clone()])
            .unwrap();
        let s = backend.param_scores(0, &[backend.prepare(&text).unwrap()]);
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_corpora_are_rejected() {
        let tools = vec![tool("a", "x", &[])];
        let mut docs = BackendDocs::from_standardized(&tools);
        docs.full_doc.insert("zzz".into(), "extra".into());
        assert!(RelevanceBackend::build_sparse(&docs, Bm25Params::default()).is_err());
    }
}
