//! Brute-force reference implementations, written from the formulas with no
//! engine code beyond tokenization and text rendering.

#![allow(dead_code)]

use std::collections::BTreeSet;

use mftr::retrieval::{field_text, tokenize, FieldId};
use mftr::rewriter::RewrittenQuery;
use mftr::scorer::ScoringModel;
use mftr::standardizer::StandardizedTool;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

/// Okapi BM25 of `doc` (an element of `corpus`) with the non-negative idf.
pub fn bm25(query: &[String], doc: &[String], corpus: &[Vec<String>]) -> f64 {
    let n = corpus.len() as f64;
    let avg = corpus.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let dl = doc.len() as f64;
    let mut score = 0.0;
    for term in query {
        let tf = doc.iter().filter(|t| *t == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = corpus.iter().filter(|d| d.contains(term)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        score += idf * (tf * (K1 + 1.0)) / (tf + K1 * (1.0 - B + B * dl / avg));
    }
    score
}

pub fn ndcg(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if relevant.contains(id) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut ideal = 0.0;
    for i in 0..relevant.len().min(k) {
        ideal += 1.0 / ((i + 2) as f64).log2();
    }
    dcg / ideal
}

pub fn recall(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let hits = ranking
        .iter()
        .take(k)
        .filter(|id| relevant.contains(*id))
        .count();
    hits as f64 / relevant.len() as f64
}

/// Exhaustive multi-field score of every tool, sorted by score descending
/// then id ascending.
pub fn rank_oracle(
    tools: &[StandardizedTool],
    rq: &RewrittenQuery,
    model: &ScoringModel,
) -> Vec<(String, f64)> {
    let field_docs = |f: FieldId| -> Vec<Vec<String>> {
        tools.iter().map(|t| tokenize(&field_text(t, f))).collect()
    };
    let desc = field_docs(FieldId::Description);
    let resp = field_docs(FieldId::Response);
    let exam = field_docs(FieldId::Examples);
    let units: Vec<Vec<String>> = tools
        .iter()
        .flat_map(|t| t.parameters.iter().map(|p| tokenize(&p.render())))
        .collect();
    let args: Vec<Vec<String>> = rq
        .extracted_arguments
        .iter()
        .map(|a| tokenize(&a.render()))
        .collect();

    let best_need =
        |docs: &Vec<Vec<String>>, i: usize, pick: &dyn Fn(&mftr::rewriter::ToolNeed) -> String| {
            rq.tool_needs
                .iter()
                .map(|n| bm25(&tokenize(&pick(n)), &docs[i], docs))
                .fold(f64::NEG_INFINITY, f64::max)
        };

    let mut out = Vec::new();
    let mut unit = 0;
    for (i, tool) in tools.iter().enumerate() {
        let s_desc = best_need(&desc, i, &|n| n.tool_description.clone());
        let s_resp = best_need(&resp, i, &|n| n.expected_response.clone());
        let s_exam = best_need(&exam, i, &|n| n.user_intent.clone());
        let mut matched = Vec::new();
        for p in &tool.parameters {
            let s = args
                .iter()
                .map(|a| bm25(a, &units[unit], &units))
                .fold(None, |acc: Option<f64>, x| {
                    Some(acc.map_or(x, |m| m.max(x)))
                })
                .unwrap_or(0.0);
            matched.push((s, p.required));
            unit += 1;
        }
        let base = if matched.is_empty() {
            1.0
        } else {
            matched.iter().map(|m| m.0).sum::<f64>() / matched.len() as f64
        };
        let mut penalty = 0.0;
        for (s, required) in &matched {
            let gate = 1.0 / (1.0 + (model.alpha * (s - model.tau)).exp());
            penalty += gate
                * if *required {
                    model.w_required
                } else {
                    model.w_optional
                };
        }
        let w = model.weights;
        let total =
            w[0] * s_desc + w[1] * base + w[2] * s_resp + w[3] * s_exam + model.bias - penalty;
        out.push((tool.tool_id.clone(), total));
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}
