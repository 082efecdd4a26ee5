//! Per-field scoring, parameter alignment, penalty and aggregation.
//!
//! For a rewritten query `q'` and a tool `t` the score is
//!
//! ```text
//! S(q, t) = Σ_f w_f · S_f(q, t) + b − P(q, t)
//! ```
//!
//! where the three text fields take the best match over tool needs, the
//! parameters field is the mean best-argument match of the tool's
//! parameters, and `P` sums a sigmoid-gated cost for every parameter whose
//! match falls below the threshold `τ`.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{FieldId, Prepared, RelevanceBackend, Target};
use crate::rewriter::{RewrittenQuery, ToolNeed};
use crate::standardizer::StandardizedTool;

pub const DEFAULT_ALPHA: f64 = 15.0;
pub const DEFAULT_PRUNE_M: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringModel {
    /// Indexed by [`FieldId::index`].
    pub weights: [f64; 4],
    pub bias: f64,
    pub tau: f64,
    pub w_required: f64,
    pub w_optional: f64,
    pub alpha: f64,
}

impl Default for ScoringModel {
    fn default() -> Self {
        ScoringModel {
            weights: [1.0; 4],
            bias: 0.0,
            tau: 0.5,
            w_required: 0.5,
            w_optional: 0.1,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldWeights {
    pub description: f64,
    pub parameters: f64,
    pub response: f64,
    pub examples: f64,
}

impl From<[f64; 4]> for FieldWeights {
    fn from(w: [f64; 4]) -> Self {
        FieldWeights {
            description: w[FieldId::Description.index()],
            parameters: w[FieldId::Parameters.index()],
            response: w[FieldId::Response.index()],
            examples: w[FieldId::Examples.index()],
        }
    }
}

impl From<FieldWeights> for [f64; 4] {
    fn from(w: FieldWeights) -> Self {
        let mut out = [0.0; 4];
        out[FieldId::Description.index()] = w.description;
        out[FieldId::Parameters.index()] = w.parameters;
        out[FieldId::Response.index()] = w.response;
        out[FieldId::Examples.index()] = w.examples;
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    weights: FieldWeights,
    bias: f64,
    tau: f64,
    w_required: f64,
    w_optional: f64,
    alpha: f64,
    #[serde(default, skip_deserializing)]
    normalized_weights: Option<FieldWeights>,
}

impl ScoringModel {
    /// Equal field weights of 0.25, no bias, no penalty.
    pub fn mean() -> Self {
        ScoringModel {
            weights: [0.25; 4],
            bias: 0.0,
            w_required: 0.0,
            w_optional: 0.0,
            ..ScoringModel::default()
        }
    }

    pub fn without_penalty(self) -> Self {
        ScoringModel {
            w_required: 0.0,
            w_optional: 0.0,
            ..self
        }
    }

    pub fn weight(&self, field: FieldId) -> f64 {
        self.weights[field.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        let all =
            self.weights
                .iter()
                .chain([&self.bias, &self.tau, &self.w_required, &self.w_optional]);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("model has non-finite parameters".into()));
        }
        Ok(())
    }

    /// `w_f / Σ w_f`. Warns when a weight is negative, since the shares
    /// then stop reading as percentages.
    pub fn normalized_weights(&self) -> [f64; 4] {
        if self.weights.iter().any(|&w| w < 0.0) {
            log::warn!(
                "negative field weight in {:?}; normalized shares are not proportions",
                self.weights
            );
        }
        let sum: f64 = self.weights.iter().sum();
        if sum == 0.0 {
            return [0.0; 4];
        }
        self.weights.map(|w| w / sum)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            weights: self.weights.into(),
            bias: self.bias,
            tau: self.tau,
            w_required: self.w_required,
            w_optional: self.w_optional,
            alpha: self.alpha,
            normalized_weights: Some(self.normalized_weights().into()),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let model = ScoringModel {
            weights: file.weights.into(),
            bias: file.bias,
            tau: file.tau,
            w_required: file.w_required,
            w_optional: file.w_optional,
            alpha: file.alpha,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamMatch {
    pub score: f64,
    pub required: bool,
}

/// Model-independent inputs of the score for one (query, tool) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Components {
    /// Per-field base scores; the parameters entry is [`param_base`].
    pub fields: [f64; 4],
    pub params: Vec<ParamMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldScores {
    pub fields: [f64; 4],
    pub params: Vec<ParamMatch>,
    pub penalty: f64,
    pub total: f64,
}

impl Components {
    pub fn score(&self, model: &ScoringModel) -> FieldScores {
        let penalty = param_penalty(&self.params, model);
        FieldScores {
            fields: self.fields,
            params: self.params.clone(),
            penalty,
            total: aggregate(self.fields, penalty, model),
        }
    }
}

/// Query-side text of a need aligned with a document field.
pub fn need_text(need: &ToolNeed, field: FieldId) -> Result<&str> {
    match field {
        FieldId::Description => Ok(&need.tool_description),
        FieldId::Response => Ok(&need.expected_response),
        FieldId::Examples => Ok(&need.user_intent),
        FieldId::Parameters => Err(Error::Contract(
            "the parameters field is matched against arguments, not tool needs".into(),
        )),
    }
}

/// Every text a backend must be able to score for this query: need
/// projections, rendered arguments and the original text.
pub fn query_texts(rq: &RewrittenQuery, original: &str) -> Vec<String> {
    let mut texts: Vec<String> = Vec::new();
    for need in &rq.tool_needs {
        for f in FieldId::SEMANTIC {
            texts.push(need_text(need, f).expect("semantic field").to_string());
        }
    }
    texts.extend(rq.extracted_arguments.iter().map(|a| a.render()));
    texts.push(original.to_string());
    texts
}

/// A rewritten query in the backend's representation.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    /// `needs[f]` holds one entry per tool need, for semantic field `f`.
    needs: [Vec<Prepared>; 4],
    args: Vec<Prepared>,
    original: Prepared,
}

impl PreparedQuery {
    pub fn new(rq: &RewrittenQuery, original: &str, backend: &RelevanceBackend) -> Result<Self> {
        if rq.tool_needs.is_empty() {
            return Err(Error::Contract(format!(
                "query {:?} has no tool needs",
                rq.query_id
            )));
        }
        let mut needs: [Vec<Prepared>; 4] = Default::default();
        for f in FieldId::SEMANTIC {
            needs[f.index()] = rq
                .tool_needs
                .iter()
                .map(|n| backend.prepare(need_text(n, f)?))
                .collect::<Result<_>>()?;
        }
        Ok(PreparedQuery {
            needs,
            args: rq
                .extracted_arguments
                .iter()
                .map(|a| backend.prepare(&a.render()))
                .collect::<Result<_>>()?,
            original: backend.prepare(original)?,
        })
    }
}

/// Max over tool needs of the field relevance, for every tool.
fn semantic_scores_all(q: &PreparedQuery, field: FieldId, backend: &RelevanceBackend) -> Vec<f64> {
    let mut best = vec![f64::NEG_INFINITY; backend.tool_ids().len()];
    for need in &q.needs[field.index()] {
        for (b, s) in best
            .iter_mut()
            .zip(backend.score_all(Target::Field(field), need))
        {
            *b = b.max(s);
        }
    }
    best
}

pub fn semantic_field_score(
    rq: &RewrittenQuery,
    tool_id: &str,
    field: FieldId,
    backend: &RelevanceBackend,
) -> Result<f64> {
    if rq.tool_needs.is_empty() {
        return Err(Error::Contract(format!(
            "query {:?} has no tool needs",
            rq.query_id
        )));
    }
    let pos = backend
        .position(tool_id)
        .ok_or_else(|| Error::UnknownTool(tool_id.to_string()))?;
    let mut best = f64::NEG_INFINITY;
    for need in &rq.tool_needs {
        let q = backend.prepare(need_text(need, field)?)?;
        best = best.max(backend.score_at(Target::Field(field), &q, pos));
    }
    Ok(best)
}

/// Row-wise maximum of a parameter × argument relevance matrix. With no
/// arguments every parameter scores 0.
pub fn param_match_matrix(phi: &[Vec<f64>], required: &[bool]) -> Vec<ParamMatch> {
    phi.iter()
        .zip(required)
        .map(|(row, &required)| ParamMatch {
            score: row.iter().copied().reduce(f64::max).unwrap_or(0.0),
            required,
        })
        .collect()
}

pub fn param_match(
    backend: &RelevanceBackend,
    pos: usize,
    required: &[bool],
    args: &[Prepared],
) -> Vec<ParamMatch> {
    backend
        .param_scores(pos, args)
        .into_iter()
        .zip(required)
        .map(|(score, &required)| ParamMatch { score, required })
        .collect()
}

/// Mean parameter match; a tool without parameters is fully executable.
pub fn param_base(params: &[ParamMatch]) -> f64 {
    if params.is_empty() {
        1.0
    } else {
        params.iter().map(|p| p.score).sum::<f64>() / params.len() as f64
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft indicator that `s` falls below `τ`: `1 / (1 + exp(α(s − τ)))`.
pub fn penalty_gate(score: f64, model: &ScoringModel) -> f64 {
    sigmoid(model.alpha * (model.tau - score))
}

pub fn param_loss(p: &ParamMatch, model: &ScoringModel) -> f64 {
    let weight = if p.required {
        model.w_required
    } else {
        model.w_optional
    };
    penalty_gate(p.score, model) * weight
}

pub fn param_penalty(params: &[ParamMatch], model: &ScoringModel) -> f64 {
    params.iter().map(|p| param_loss(p, model)).sum()
}

pub fn aggregate(fields: [f64; 4], penalty: f64, model: &ScoringModel) -> f64 {
    let weighted: f64 = fields.iter().zip(&model.weights).map(|(s, w)| w * s).sum();
    weighted + model.bias - penalty
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    #[default]
    Mftr,
    FullDoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RankOptions {
    /// Score only the union of per-field top-M candidates.
    pub prune_m: Option<usize>,
    /// Rescale each semantic field to [0, 1] across tools per query.
    pub min_max: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTool {
    pub tool_id: String,
    pub rank: usize,
    pub score: f64,
    /// Present in multi-field mode.
    pub components: Option<FieldScores>,
}

/// Scores the multi-field pipeline needs from one corpus, aligned with the
/// backend's tool order.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    backend: &'a RelevanceBackend,
    required: Vec<Vec<bool>>,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a RelevanceBackend, tools: &[StandardizedTool]) -> Result<Self> {
        let mut required = vec![None; backend.tool_ids().len()];
        for t in tools {
            let pos = backend
                .position(&t.tool_id)
                .ok_or_else(|| Error::UnknownTool(t.tool_id.clone()))?;
            if backend.param_count(pos) != t.parameters.len() {
                return Err(Error::Config(format!(
                    "tool {:?} has {} parameters but the index holds {}",
                    t.tool_id,
                    t.parameters.len(),
                    backend.param_count(pos)
                )));
            }
            required[pos] = Some(t.parameters.iter().map(|p| p.required).collect());
        }
        let required = required
            .into_iter()
            .zip(backend.tool_ids())
            .map(|(r, id)| {
                r.ok_or_else(|| Error::Config(format!("index tool {id:?} missing from corpus")))
            })
            .collect::<Result<_>>()?;
        Ok(Scorer { backend, required })
    }

    pub fn backend(&self) -> &RelevanceBackend {
        self.backend
    }

    pub fn prepare(&self, rq: &RewrittenQuery, original: &str) -> Result<PreparedQuery> {
        PreparedQuery::new(rq, original, self.backend)
    }

    pub fn components_at(&self, q: &PreparedQuery, pos: usize) -> Components {
        let mut fields = [0.0; 4];
        for f in FieldId::SEMANTIC {
            fields[f.index()] = q.needs[f.index()]
                .iter()
                .map(|n| self.backend.score_at(Target::Field(f), n, pos))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        let params = param_match(self.backend, pos, &self.required[pos], &q.args);
        fields[FieldId::Parameters.index()] = param_base(&params);
        Components { fields, params }
    }

    /// Components of every tool, aligned with the backend's tool order.
    pub fn components_all(&self, q: &PreparedQuery, options: RankOptions) -> Vec<Components> {
        let n = self.backend.tool_ids().len();
        let mut semantic: [Vec<f64>; 4] = Default::default();
        for f in FieldId::SEMANTIC {
            let mut s = semantic_scores_all(q, f, self.backend);
            if options.min_max {
                min_max(&mut s);
            }
            semantic[f.index()] = s;
        }
        (0..n)
            .into_par_iter()
            .map(|pos| {
                let params = param_match(self.backend, pos, &self.required[pos], &q.args);
                let mut fields = [0.0; 4];
                for f in FieldId::SEMANTIC {
                    fields[f.index()] = semantic[f.index()][pos];
                }
                fields[FieldId::Parameters.index()] = param_base(&params);
                Components { fields, params }
            })
            .collect()
    }

    fn candidates(&self, q: &PreparedQuery, m: usize) -> BTreeSet<usize> {
        let mut keep = BTreeSet::new();
        for f in FieldId::SEMANTIC {
            for need in &q.needs[f.index()] {
                for (id, _) in self.backend.top_n(Target::Field(f), need, m) {
                    keep.insert(self.backend.position(&id).expect("id from backend"));
                }
            }
        }
        for (id, _) in self.backend.top_n(Target::FullDoc, &q.original, m) {
            keep.insert(self.backend.position(&id).expect("id from backend"));
        }
        keep
    }

    pub fn rank(
        &self,
        q: &PreparedQuery,
        model: &ScoringModel,
        mode: RankMode,
        options: RankOptions,
    ) -> Vec<ScoredTool> {
        let ids = self.backend.tool_ids();
        let keep: Option<BTreeSet<usize>> = options.prune_m.map(|m| self.candidates(q, m));
        let kept = |pos: &usize| keep.as_ref().is_none_or(|k| k.contains(pos));
        let scored: Vec<(usize, f64, Option<FieldScores>)> = match mode {
            RankMode::FullDoc => self
                .backend
                .score_all(Target::FullDoc, &q.original)
                .into_iter()
                .enumerate()
                .filter(|(pos, _)| kept(pos))
                .map(|(pos, s)| (pos, s, None))
                .collect(),
            RankMode::Mftr => self
                .components_all(q, options)
                .into_iter()
                .enumerate()
                .filter(|(pos, _)| kept(pos))
                .map(|(pos, c)| {
                    let fs = c.score(model);
                    (pos, fs.total, Some(fs))
                })
                .collect(),
        };
        sort_ranking(
            scored
                .into_iter()
                .map(|(pos, score, components)| ScoredTool {
                    tool_id: ids[pos].clone(),
                    rank: 0,
                    score,
                    components,
                })
                .collect(),
        )
    }
}

fn min_max(scores: &mut [f64]) {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for s in scores.iter_mut() {
        *s = if span > 0.0 { (*s - lo) / span } else { 0.0 };
    }
}

/// Score descending, tool id ascending; assigns ranks from 1.
pub fn sort_ranking(mut tools: Vec<ScoredTool>) -> Vec<ScoredTool> {
    tools.sort_by(|a, b| {
        (b.score + 0.0)
            .total_cmp(&(a.score + 0.0))
            .then_with(|| a.tool_id.cmp(&b.tool_id))
    });
    for (i, t) in tools.iter_mut().enumerate() {
        t.rank = i + 1;
    }
    tools
}

/// Ranks the corpus for one rewritten query.
pub fn rank_tools(
    rq: &RewrittenQuery,
    original: &str,
    tools: &[StandardizedTool],
    model: &ScoringModel,
    backend: &RelevanceBackend,
    mode: RankMode,
) -> Result<Vec<ScoredTool>> {
    let scorer = Scorer::new(backend, tools)?;
    let q = scorer.prepare(rq, original)?;
    Ok(scorer.rank(&q, model, mode, RankOptions::default()))
}
