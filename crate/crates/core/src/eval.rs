//! Ranking metrics, run files, reports and the field-masking ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Qrels, Query};
use crate::error::{Error, Result};
use crate::provider::EmbeddingProvider;
use crate::retrieval::{
    embed, field_text, tokenize, top_n_by_score, Bm25Params, EmbeddingStore, FieldId, SparseIndex,
};
use crate::scorer::ScoredTool;
use crate::standardizer::StandardizedTool;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 100];
pub const DEFAULT_TOP_N: usize = 100;

/// Binary-gain NDCG with a `1/log2(rank + 1)` discount.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<&str>, k: usize) -> f64 {
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, t)| relevant.contains(t.as_ref()))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

pub fn recall_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<&str>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranking
        .iter()
        .take(k)
        .filter(|t| relevant.contains(t.as_ref()))
        .count();
    hits as f64 / relevant.len() as f64
}

/// Per query, tool ids with scores in rank order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRanking {
    pub queries: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunRanking {
    pub fn insert(&mut self, query_id: impl Into<String>, ranking: &[ScoredTool], top_n: usize) {
        self.queries.insert(
            query_id.into(),
            ranking
                .iter()
                .take(top_n)
                .map(|t| (t.tool_id.clone(), t.score))
                .collect(),
        );
    }

    pub fn extend(&mut self, other: RunRanking) {
        self.queries.extend(other.queries);
    }

    pub fn ids(&self, query_id: &str) -> Vec<&str> {
        self.queries
            .get(query_id)
            .map(|r| r.iter().map(|(t, _)| t.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        for (q, ranking) in &self.queries {
            let mut seen = BTreeSet::new();
            for (t, _) in ranking {
                if !seen.insert(t.as_str()) {
                    return Err(Error::InvalidDataset(format!(
                        "run lists tool {t:?} twice for query {q:?}"
                    )));
                }
            }
            if ranking.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(Error::InvalidDataset(format!(
                    "run scores increase within query {q:?}"
                )));
            }
        }
        Ok(())
    }

    /// `query_id Q0 tool_id rank score tag`, one line per entry.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (q, ranking) in &self.queries {
            for (i, (t, s)) in ranking.iter().enumerate() {
                writeln!(out, "{q} Q0 {t} {} {s} {tag}", i + 1).expect("write to String");
            }
        }
        out
    }

    pub fn write_trec(&self, path: &Path, tag: &str) -> Result<()> {
        std::fs::write(path, self.to_trec(tag)).map_err(|e| Error::io(path, e))
    }

    pub fn read_trec(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: message.to_string(),
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 6 {
                return Err(bad("expected 6 whitespace-separated columns"));
            }
            let rank: usize = cols[3].parse().map_err(|_| bad("rank is not an integer"))?;
            let score: f64 = cols[4].parse().map_err(|_| bad("score is not a number"))?;
            rows.entry(cols[0].to_string())
                .or_default()
                .push((rank, cols[2].to_string(), score));
        }
        let queries = rows
            .into_iter()
            .map(|(q, mut r)| {
                r.sort_by_key(|(rank, _, _)| *rank);
                (q, r.into_iter().map(|(_, t, s)| (t, s)).collect())
            })
            .collect();
        let run = RunRanking { queries };
        run.validate()?;
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub ndcg: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_tag: String,
    pub dataset: String,
    pub backend: String,
    pub mode: String,
    pub ks: Vec<usize>,
    pub mean: Metrics,
    pub per_query: BTreeMap<String, Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn ndcg(&self, k: usize) -> f64 {
        self.mean.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.mean.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn query_metrics(ranking: &[&str], relevant: &BTreeSet<&str>, ks: &[usize]) -> Metrics {
    Metrics {
        ndcg: ks
            .iter()
            .map(|&k| (k, ndcg_at_k(ranking, relevant, k)))
            .collect(),
        recall: ks
            .iter()
            .map(|&k| (k, recall_at_k(ranking, relevant, k)))
            .collect(),
    }
}

/// Per-query metrics and their unweighted mean over the run's queries.
pub fn evaluate_run(run: &RunRanking, qrels: &Qrels, ks: &[usize]) -> Result<EvalReport> {
    if ks.contains(&0) {
        return Err(Error::Config("metric cutoff k must be at least 1".into()));
    }
    let mut per_query = BTreeMap::new();
    for q in run.queries.keys() {
        if !qrels.contains_query(q) {
            return Err(Error::DanglingReference {
                kind: "query",
                id: q.clone(),
            });
        }
        per_query.insert(
            q.clone(),
            query_metrics(&run.ids(q), &qrels.relevant(q), ks),
        );
    }
    let n = per_query.len().max(1) as f64;
    let mean_of = |pick: &dyn Fn(&Metrics) -> &BTreeMap<usize, f64>| -> BTreeMap<usize, f64> {
        ks.iter()
            .map(|&k| (k, per_query.values().map(|m| pick(m)[&k]).sum::<f64>() / n))
            .collect()
    };
    let mean = Metrics {
        ndcg: mean_of(&|m| &m.ndcg),
        recall: mean_of(&|m| &m.recall),
    };
    Ok(EvalReport {
        ks: ks.to_vec(),
        mean,
        per_query,
        ..EvalReport::default()
    })
}

/// Plain-text table: one row per report, N@10 and R@10 per dataset.
pub fn render_table(reports: &[EvalReport]) -> String {
    let datasets: Vec<&str> = reports
        .iter()
        .map(|r| r.dataset.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows: Vec<String> = reports
        .iter()
        .map(|r| format!("{} ({})", r.mode, r.backend))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let width = rows.iter().map(String::len).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}", "method");
    for d in &datasets {
        let _ = write!(out, " | {:>8} {:>8}", format!("{d} N@10"), "R@10");
    }
    out.push('\n');
    for row in &rows {
        let _ = write!(out, "{row:width$}");
        for d in &datasets {
            match reports
                .iter()
                .find(|r| r.dataset == *d && format!("{} ({})", r.mode, r.backend) == *row)
            {
                Some(r) => {
                    let _ = write!(out, " | {:>8.4} {:>8.4}", r.ndcg(10), r.recall(10));
                }
                None => {
                    let _ = write!(out, " | {:>8} {:>8}", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// A unit of the single-text document that can be masked out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTarget {
    Name,
    Field(FieldId),
}

impl MaskTarget {
    pub const ALL: [MaskTarget; 5] = [
        MaskTarget::Name,
        MaskTarget::Field(FieldId::Description),
        MaskTarget::Field(FieldId::Parameters),
        MaskTarget::Field(FieldId::Response),
        MaskTarget::Field(FieldId::Examples),
    ];

    pub fn label(&self) -> &'static str {
        match self {
            MaskTarget::Name => "name",
            MaskTarget::Field(f) => f.as_str(),
        }
    }
}

impl std::str::FromStr for MaskTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "name" {
            Ok(MaskTarget::Name)
        } else {
            s.parse().map(MaskTarget::Field)
        }
    }
}

/// The single text used for the masking experiment: tool name followed by
/// the four fields, minus the masked units.
pub fn masked_document(tool: &StandardizedTool, masked: &BTreeSet<MaskTarget>) -> String {
    let mut parts = Vec::new();
    if !masked.contains(&MaskTarget::Name) {
        parts.push(tool.tool_id.clone());
    }
    for f in FieldId::ALL {
        if !masked.contains(&MaskTarget::Field(f)) {
            parts.push(field_text(tool, f));
        }
    }
    parts.retain(|p| !p.is_empty());
    parts.join("\n")
}

#[derive(Clone, Copy)]
pub enum AblationBackend<'a> {
    Sparse(Bm25Params),
    Dense(&'a dyn EmbeddingProvider),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDelta {
    pub masked: Vec<String>,
    pub ndcg: BTreeMap<usize, f64>,
    /// `100 · (masked − full) / full`; `None` when the full score is 0.
    pub delta_percent: BTreeMap<usize, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ks: Vec<usize>,
    pub full_ndcg: BTreeMap<usize, f64>,
    pub deltas: Vec<MaskDelta>,
}

impl AblationReport {
    pub fn delta(&self, masked: &[MaskTarget], k: usize) -> Option<f64> {
        let labels: Vec<&str> = masked.iter().map(MaskTarget::label).collect();
        self.deltas
            .iter()
            .find(|d| d.masked == labels)
            .and_then(|d| d.delta_percent.get(&k).copied().flatten())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("masked");
        for k in &self.ks {
            let _ = write!(out, " | N@{k:<3} | delta%");
        }
        out.push('\n');
        let _ = write!(out, "(none)");
        for k in &self.ks {
            let _ = write!(out, " | {:.4} | {:>6}", self.full_ndcg[k], "-");
        }
        out.push('\n');
        for d in &self.deltas {
            let _ = write!(out, "{}", d.masked.join("+"));
            for k in &self.ks {
                let delta = d.delta_percent[k].map_or("n/a".to_string(), |x| format!("{x:+.2}"));
                let _ = write!(out, " | {:.4} | {delta:>6}", d.ndcg[k]);
            }
            out.push('\n');
        }
        out
    }
}

fn full_doc_ndcg(
    docs: &BTreeMap<String, String>,
    queries: &[Query],
    qrels: &Qrels,
    backend: AblationBackend<'_>,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let top = ks.iter().copied().max().unwrap_or(1);
    let mut run = RunRanking::default();
    match backend {
        AblationBackend::Sparse(params) => {
            let index = SparseIndex::build(docs.iter(), params)?;
            for q in queries {
                let hits = index.top_n(&tokenize(&q.text), top);
                run.queries.insert(q.id.clone(), hits);
            }
        }
        AblationBackend::Dense(provider) => {
            let mut store = EmbeddingStore::new(provider.tag());
            let ids: Vec<String> = docs.keys().cloned().collect();
            let doc_vecs = embed(
                provider,
                &docs.values().cloned().collect::<Vec<_>>(),
                &mut store,
            )?;
            let texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
            let query_vecs = embed(provider, &texts, &mut store)?;
            for (q, qv) in queries.iter().zip(&query_vecs) {
                let scores: Vec<f64> = doc_vecs
                    .iter()
                    .map(|d| d.iter().zip(qv).map(|(a, b)| a * b).sum())
                    .collect();
                run.queries
                    .insert(q.id.clone(), top_n_by_score(&ids, &scores, top));
            }
        }
    }
    Ok(evaluate_run(&run, qrels, ks)?.mean.ndcg)
}

/// Re-runs single-text retrieval with each mask set removed from every
/// document and reports the relative NDCG change.
pub fn field_mask_ablation(
    tools: &[StandardizedTool],
    queries: &[Query],
    qrels: &Qrels,
    backend: AblationBackend<'_>,
    masks: &[BTreeSet<MaskTarget>],
    ks: &[usize],
) -> Result<AblationReport> {
    for m in masks {
        if MaskTarget::ALL.iter().all(|t| m.contains(t)) {
            return Err(Error::Config("cannot mask every field at once".into()));
        }
        if m.is_empty() {
            return Err(Error::Config("empty mask set".into()));
        }
    }
    let docs_for = |masked: &BTreeSet<MaskTarget>| -> BTreeMap<String, String> {
        tools
            .iter()
            .map(|t| (t.tool_id.clone(), masked_document(t, masked)))
            .collect()
    };
    let full_ndcg = full_doc_ndcg(&docs_for(&BTreeSet::new()), queries, qrels, backend, ks)?;
    let mut deltas = Vec::new();
    for m in masks {
        let ndcg = full_doc_ndcg(&docs_for(m), queries, qrels, backend, ks)?;
        let delta_percent = ks
            .iter()
            .map(|k| {
                let full = full_ndcg[k];
                let d = (full != 0.0).then(|| 100.0 * (ndcg[k] - full) / full);
                (*k, d)
            })
            .collect();
        deltas.push(MaskDelta {
            masked: m.iter().map(|t| t.label().to_string()).collect(),
            ndcg,
            delta_percent,
        });
    }
    Ok(AblationReport {
        ks: ks.to_vec(),
        full_ndcg,
        deltas,
    })
}

/// One single-field mask set per target.
pub fn single_masks(targets: &[MaskTarget]) -> Vec<BTreeSet<MaskTarget>> {
    targets.iter().map(|t| BTreeSet::from([*t])).collect()
}
