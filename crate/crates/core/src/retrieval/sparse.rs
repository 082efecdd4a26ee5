//! Okapi BM25 over an in-memory inverted index.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::tokenize;
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "IndexData", into = "IndexData")]
pub struct SparseIndex {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
    lookup: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct IndexData {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl From<IndexData> for SparseIndex {
    fn from(d: IndexData) -> Self {
        let lookup = d
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        SparseIndex {
            params: d.params,
            doc_ids: d.doc_ids,
            doc_lens: d.doc_lens,
            avg_len: d.avg_len,
            postings: d.postings,
            lookup,
        }
    }
}

impl From<SparseIndex> for IndexData {
    fn from(s: SparseIndex) -> Self {
        IndexData {
            params: s.params,
            doc_ids: s.doc_ids,
            doc_lens: s.doc_lens,
            avg_len: s.avg_len,
            postings: s.postings,
        }
    }
}

impl SparseIndex {
    /// Indexes `(doc_id, text)` pairs. Documents are stored in id order so
    /// that the index is identical for any input order.
    pub fn build<I, S, T>(docs: I, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut tokenized: Vec<(String, Vec<String>)> = docs
            .into_iter()
            .map(|(id, text)| (id.into(), tokenize(text.as_ref())))
            .collect();
        if tokenized.is_empty() {
            return Err(Error::Config(
                "cannot build a sparse index over an empty corpus".into(),
            ));
        }
        tokenized.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = tokenized.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateId {
                kind: "document",
                id: w[0].0.clone(),
            });
        }

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(tokenized.len());
        for (doc, (_, tokens)) in tokenized.iter().enumerate() {
            doc_lens.push(tokens.len() as u32);
            let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term.to_string()).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
        }
        let total: u64 = doc_lens.iter().map(|&l| u64::from(l)).sum();
        let avg_len = total as f64 / doc_lens.len() as f64;
        let doc_ids: Vec<String> = tokenized.into_iter().map(|(id, _)| id).collect();

        Ok(IndexData {
            params,
            doc_ids,
            doc_lens,
            avg_len,
            postings,
        }
        .into())
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.position(doc_id).map(|i| self.doc_lens[i])
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.lookup.get(doc_id).map(|&i| i as usize)
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let dl = f64::from(self.doc_lens[doc]);
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / self.avg_len))
    }

    /// BM25 score of one document. Every query token contributes, so a
    /// repeated query token counts once per occurrence.
    pub fn score(&self, query_tokens: &[String], doc_id: &str) -> Result<f64> {
        let doc = self
            .position(doc_id)
            .ok_or_else(|| Error::UnknownTool(doc_id.to_string()))?;
        Ok(self.score_at(query_tokens, doc))
    }

    pub fn score_at(&self, query_tokens: &[String], doc: usize) -> f64 {
        let mut score = 0.0;
        for token in query_tokens {
            let Some(list) = self.postings.get(token) else {
                continue;
            };
            if let Ok(i) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += self.term_weight(self.idf(list.len()), list[i].tf, doc);
            }
        }
        score
    }

    /// Scores of every document, in index order.
    pub fn score_all(&self, query_tokens: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        for token in query_tokens {
            let Some(list) = self.postings.get(token) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                scores[p.doc as usize] += self.term_weight(idf, p.tf, p.doc as usize);
            }
        }
        scores
    }

    /// The `n` best documents, score descending then id ascending.
    /// Zero-score documents are included when fewer than `n` documents match.
    pub fn top_n(&self, query_tokens: &[String], n: usize) -> Vec<(String, f64)> {
        let scores = self.score_all(query_tokens);
        super::top_n_by_score(&self.doc_ids, &scores, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn statistics_of_three_doc_corpus() {
        let idx = SparseIndex::build(
            [("d1", "a b"), ("d2", "a"), ("d3", "c")],
            Bm25Params::default(),
        )
        .unwrap();
        assert_eq!(idx.doc_count(), 3);
        assert!((idx.avg_doc_len() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(idx.doc_freq("a"), 2);
    }

    #[test]
    fn empty_text_doc_has_zero_length_and_zero_score() {
        let idx =
            SparseIndex::build([("d1", "a b"), ("empty", "")], Bm25Params::default()).unwrap();
        assert_eq!(idx.doc_len("empty"), Some(0));
        assert_eq!(idx.score(&toks("a b"), "empty").unwrap(), 0.0);
        let top = idx.top_n(&toks("a"), 10);
        assert_eq!(top.len(), 2);
        assert_eq!(top[1], ("empty".to_string(), 0.0));
    }

    #[test]
    fn rebuild_is_identical() {
        let docs = [("x", "one two two"), ("y", "three"), ("w", "two four")];
        let a = SparseIndex::build(docs, Bm25Params::default()).unwrap();
        let mut rev = docs;
        rev.reverse();
        let b = SparseIndex::build(rev, Bm25Params::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn absent_terms_score_zero() {
        let idx =
            SparseIndex::build([("d1", "apple"), ("d2", "banana")], Bm25Params::default()).unwrap();
        assert_eq!(idx.score(&toks("cherry durian"), "d1").unwrap(), 0.0);
        assert!(matches!(
            idx.score(&toks("apple"), "nope"),
            Err(Error::UnknownTool(_))
        ));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let docs: Vec<(String, String)> = vec![];
        assert!(SparseIndex::build(docs, Bm25Params::default()).is_err());
    }

    #[test]
    fn serde_round_trip_keeps_lookup() {
        let idx = SparseIndex::build(
            [("d1", "apple apple banana"), ("d2", "apple")],
            Bm25Params::default(),
        )
        .unwrap();
        let json = serde_json::to_string(&idx).unwrap();
        let back: SparseIndex = serde_json::from_str(&json).unwrap();
        assert_eq!(
            back.score(&toks("apple"), "d1").unwrap(),
            idx.score(&toks("apple"), "d1").unwrap()
        );
    }
}
