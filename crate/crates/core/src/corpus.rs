//! Tool-retrieval datasets: tools, queries and relevance judgments.
//!
//! On disk a dataset is a directory holding `tools.jsonl`, `queries.jsonl`
//! and `qrels.tsv`. Loading validates every invariant (unique ids, no
//! dangling judgments, at least one relevant tool per query) so downstream
//! stages can assume a well-formed [`Dataset`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const TOOLS_FILE: &str = "tools.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QRELS_FILE: &str = "qrels.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTool {
    pub id: String,
    pub source_tag: String,
    pub doc: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turns: Option<Vec<(String, String)>>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            text: text.into(),
            turns: None,
        }
    }

    /// Builds a query from dialogue turns; the text is one `role: utterance`
    /// line per turn.
    pub fn from_turns(id: impl Into<String>, turns: Vec<(String, String)>) -> Self {
        Query {
            id: id.into(),
            text: flatten_turns(&turns),
            turns: Some(turns),
        }
    }
}

pub fn flatten_turns(turns: &[(String, String)]) -> String {
    turns
        .iter()
        .map(|(role, utterance)| format!("{role}: {utterance}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Relevance judgments, normalized to binary grades.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Qrels {
    entries: BTreeMap<String, BTreeMap<String, u8>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment; any positive grade is stored as 1.
    pub fn insert(&mut self, query_id: impl Into<String>, tool_id: impl Into<String>, grade: u32) {
        let grade = u8::from(grade > 0);
        self.entries
            .entry(query_id.into())
            .or_default()
            .insert(tool_id.into(), grade);
    }

    pub fn relevant(&self, query_id: &str) -> BTreeSet<&str> {
        self.entries
            .get(query_id)
            .map(|tools| {
                tools
                    .iter()
                    .filter(|(_, &g)| g > 0)
                    .map(|(t, _)| t.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn is_relevant(&self, query_id: &str, tool_id: &str) -> bool {
        self.entries
            .get(query_id)
            .and_then(|tools| tools.get(tool_id))
            .is_some_and(|&g| g > 0)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.entries.contains_key(query_id)
    }

    /// All `(query_id, tool_id, grade)` triples in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u8)> {
        self.entries
            .iter()
            .flat_map(|(q, tools)| tools.iter().map(move |(t, &g)| (q.as_str(), t.as_str(), g)))
    }

    pub fn relevant_pair_count(&self) -> usize {
        self.iter().filter(|&(_, _, g)| g > 0).count()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn retain_queries(&mut self, keep: impl Fn(&str) -> bool) {
        self.entries.retain(|q, _| keep(q));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub tools: Vec<RawTool>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

impl Dataset {
    /// Checks every dataset invariant, reporting the first offending id.
    pub fn validate(&self) -> Result<()> {
        let mut tool_ids = HashSet::with_capacity(self.tools.len());
        for tool in &self.tools {
            if tool.id.is_empty() {
                return Err(Error::InvalidDataset("empty tool id".into()));
            }
            if !tool_ids.insert(tool.id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "tool",
                    id: tool.id.clone(),
                });
            }
            if doc_is_empty(&tool.doc) {
                return Err(Error::InvalidDataset(format!(
                    "tool {:?} has an empty doc",
                    tool.id
                )));
            }
        }
        let mut query_ids = HashSet::with_capacity(self.queries.len());
        for query in &self.queries {
            if query.id.is_empty() {
                return Err(Error::InvalidDataset("empty query id".into()));
            }
            if !query_ids.insert(query.id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "query",
                    id: query.id.clone(),
                });
            }
            if query.text.trim().is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "query {:?} has empty text",
                    query.id
                )));
            }
        }
        for (q, t, _) in self.qrels.iter() {
            if !query_ids.contains(q) {
                return Err(Error::DanglingReference {
                    kind: "query",
                    id: q.to_string(),
                });
            }
            if !tool_ids.contains(t) {
                return Err(Error::DanglingReference {
                    kind: "tool",
                    id: t.to_string(),
                });
            }
        }
        for query in &self.queries {
            if self.qrels.relevant(&query.id).is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "query {:?} has no relevant tool",
                    query.id
                )));
            }
        }
        Ok(())
    }

    pub fn tool(&self, id: &str) -> Option<&RawTool> {
        self.tools.iter().find(|t| t.id == id)
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }

    /// Writes the dataset in the on-disk layout read by [`load_dataset`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let path = dir.join(TOOLS_FILE);
        let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for tool in &self.tools {
            let line =
                serde_json::json!({ "id": tool.id, "source": tool.source_tag, "doc": tool.doc });
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(QUERIES_FILE);
        let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for query in &self.queries {
            let line = match &query.turns {
                Some(turns) => {
                    serde_json::json!({ "id": query.id, "text": query.text, "turns": turns })
                }
                None => serde_json::json!({ "id": query.id, "text": query.text }),
            };
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(QRELS_FILE);
        let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for (q, t, g) in self.qrels.iter() {
            writeln!(out, "{q}\t{t}\t{g}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn doc_is_empty(doc: &Value) -> bool {
    match doc {
        Value::Null => true,
        Value::String(s) => s.trim().is_empty(),
        Value::Array(a) => a.is_empty(),
        Value::Object(o) => o.is_empty(),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// `tools.jsonl` + `queries.jsonl` + `qrels.tsv`.
    #[default]
    Jsonl,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetFormat::Jsonl => f.write_str("jsonl"),
        }
    }
}

#[derive(Deserialize)]
struct ToolLine {
    id: String,
    #[serde(default)]
    source: Option<String>,
    doc: Value,
}

#[derive(Deserialize)]
struct QueryLine {
    id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    turns: Option<Vec<(String, String)>>,
}

/// Loads and validates a dataset directory. The dataset is named after the
/// directory.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let DatasetFormat::Jsonl = format;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    for file in [TOOLS_FILE, QUERIES_FILE, QRELS_FILE] {
        if !path.join(file).is_file() {
            return Err(Error::InvalidDataset(format!(
                "{} not found",
                path.join(file).display()
            )));
        }
    }

    let tools = read_jsonl::<ToolLine>(&path.join(TOOLS_FILE))?
        .into_iter()
        .map(|line| RawTool {
            id: line.id,
            source_tag: line.source.unwrap_or_else(|| name.clone()),
            doc: line.doc,
        })
        .collect();

    let queries_path = path.join(QUERIES_FILE);
    let mut queries = Vec::new();
    for (idx, line) in read_jsonl::<QueryLine>(&queries_path)?
        .into_iter()
        .enumerate()
    {
        let query = match (line.turns, line.text) {
            (Some(turns), _) if !turns.is_empty() => Query::from_turns(line.id, turns),
            (_, Some(text)) => Query::new(line.id, text),
            _ => {
                return Err(Error::Parse {
                    path: queries_path,
                    line: idx + 1,
                    message: "query needs either `text` or non-empty `turns`".into(),
                })
            }
        };
        queries.push(query);
    }

    let qrels = read_qrels(&path.join(QRELS_FILE))?;
    let dataset = Dataset {
        name,
        tools,
        queries,
        qrels,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (idx == 0 && line.starts_with("query_id\t")) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated columns, got {}",
                cols.len()
            )));
        }
        let grade: u32 = cols[2].trim().parse().map_err(|_| {
            parse_err(format!(
                "relevance {:?} is not a non-negative integer",
                cols[2]
            ))
        })?;
        qrels.insert(cols[0], cols[1], grade);
    }
    Ok(qrels)
}

/// Merges datasets into one benchmark. Every id is rewritten to
/// `<dataset name>/<id>` so sources cannot collide.
pub fn build_mixed(datasets: &[Dataset]) -> Result<Dataset> {
    if datasets.len() < 2 {
        return Err(Error::Config(format!(
            "mixing needs at least 2 datasets, got {}",
            datasets.len()
        )));
    }
    let prefixed = |tag: &str, id: &str| format!("{tag}/{id}");
    let mut mixed = Dataset {
        name: "mixed".to_string(),
        tools: Vec::new(),
        queries: Vec::new(),
        qrels: Qrels::new(),
    };
    for ds in datasets {
        let tag = ds.name.as_str();
        mixed.tools.extend(ds.tools.iter().map(|t| RawTool {
            id: prefixed(tag, &t.id),
            source_tag: tag.to_string(),
            doc: t.doc.clone(),
        }));
        mixed.queries.extend(ds.queries.iter().map(|q| Query {
            id: prefixed(tag, &q.id),
            text: q.text.clone(),
            turns: q.turns.clone(),
        }));
        for (q, t, g) in ds.qrels.iter() {
            mixed
                .qrels
                .insert(prefixed(tag, q), prefixed(tag, t), u32::from(g));
        }
    }
    mixed.validate()?;
    Ok(mixed)
}

/// Mean number of relevant tools per query.
pub fn avg_tools_per_query(dataset: &Dataset) -> Result<f64> {
    if dataset.queries.is_empty() {
        return Err(Error::EmptyQueries);
    }
    let pairs = dataset
        .queries
        .iter()
        .map(|q| dataset.qrels.relevant(&q.id).len())
        .sum::<usize>();
    Ok(pairs as f64 / dataset.queries.len() as f64)
}

/// Drops queries whose text exactly repeats an earlier query's text, along
/// with their judgments. Returns the ids that were removed.
pub fn dedup_queries(dataset: &mut Dataset) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut removed = Vec::new();
    dataset.queries.retain(|q| {
        if seen.insert(q.text.clone()) {
            true
        } else {
            removed.push(q.id.clone());
            false
        }
    });
    if !removed.is_empty() {
        let gone: HashSet<&str> = removed.iter().map(String::as_str).collect();
        dataset.qrels.retain_queries(|q| !gone.contains(q));
        log::warn!(
            "{}: removed {} duplicate queries: {:?}",
            dataset.name,
            removed.len(),
            removed
        );
    }
    removed
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn tiny(dir: &Path) {
        write(
            dir,
            TOOLS_FILE,
            "{\"id\":\"t1\",\"doc\":{\"description\":\"weather\"}}\n{\"id\":\"t2\",\"doc\":\"plain text doc\"}\n{\"id\":\"t3\",\"doc\":{\"desc\":\"x\"}}\n",
        );
        write(
            dir,
            QUERIES_FILE,
            "{\"id\":\"q1\",\"text\":\"get weather\"}\n{\"id\":\"q2\",\"text\":\"other\"}\n",
        );
        write(dir, QRELS_FILE, "q1\tt1\t1\nq2\tt2\t2\nq2\tt3\t0\n");
    }

    #[test]
    fn loads_consistent_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        tiny(tmp.path());
        let ds = load_dataset(tmp.path(), DatasetFormat::Jsonl).unwrap();
        assert_eq!(ds.tools.len(), 3);
        assert_eq!(ds.queries.len(), 2);
        // grade 2 normalized to 1, grade 0 kept as judged non-relevant
        assert!(ds.qrels.is_relevant("q2", "t2"));
        assert!(!ds.qrels.is_relevant("q2", "t3"));
        assert_eq!(ds.qrels.len(), 3);
    }

    #[test]
    fn dangling_tool_reference_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        tiny(tmp.path());
        write(tmp.path(), QRELS_FILE, "q1\tt1\t1\nq2\ttX\t1\n");
        let err = load_dataset(tmp.path(), DatasetFormat::Jsonl).unwrap_err();
        assert!(matches!(&err, Error::DanglingReference { kind: "tool", id } if id == "tX"));
        assert!(err.to_string().contains("tX"));
    }

    #[test]
    fn duplicate_tool_id_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        tiny(tmp.path());
        write(
            tmp.path(),
            TOOLS_FILE,
            "{\"id\":\"t1\",\"doc\":\"a\"}\n{\"id\":\"t1\",\"doc\":\"b\"}\n",
        );
        let err = load_dataset(tmp.path(), DatasetFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { kind: "tool", ref id } if id == "t1"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let tmp = tempfile::tempdir().unwrap();
        tiny(tmp.path());
        write(
            tmp.path(),
            QUERIES_FILE,
            "{\"id\":\"q1\",\"text\":\"a\"}\n{not json\n",
        );
        let err = load_dataset(tmp.path(), DatasetFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn dialogue_turns_are_flattened_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        tiny(tmp.path());
        write(
            tmp.path(),
            QUERIES_FILE,
            concat!(
                "{\"id\":\"q1\",\"turns\":[[\"user\",\"hi\"],[\"assistant\",\"how can I help?\"],[\"user\",\"set an alarm for 7\"]]}\n",
                "{\"id\":\"q2\",\"text\":\"other\"}\n"
            ),
        );
        let ds = load_dataset(tmp.path(), DatasetFormat::Jsonl).unwrap();
        let q = ds.query("q1").unwrap();
        assert_eq!(
            q.text,
            "user: hi\nassistant: how can I help?\nuser: set an alarm for 7"
        );
        assert_eq!(q.text.lines().count(), 3);
    }

    #[test]
    fn query_without_relevant_tool_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        tiny(tmp.path());
        write(tmp.path(), QRELS_FILE, "q1\tt1\t1\nq2\tt3\t0\n");
        let err = load_dataset(tmp.path(), DatasetFormat::Jsonl).unwrap_err();
        assert!(err.to_string().contains("q2"));
    }

    #[test]
    fn avg_tools_per_query_counts_relevant_pairs() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "a", 1);
        qrels.insert("q2", "a", 1);
        qrels.insert("q2", "b", 1);
        qrels.insert("q2", "c", 3);
        qrels.insert("q2", "d", 0);
        let ds = Dataset {
            name: "d".into(),
            tools: ["a", "b", "c", "d"]
                .iter()
                .map(|id| RawTool {
                    id: id.to_string(),
                    source_tag: "d".into(),
                    doc: json!("x"),
                })
                .collect(),
            queries: vec![Query::new("q1", "x"), Query::new("q2", "y")],
            qrels,
        };
        assert_eq!(avg_tools_per_query(&ds).unwrap(), 2.0);

        let empty = Dataset {
            queries: vec![],
            qrels: Qrels::new(),
            ..ds
        };
        assert!(matches!(
            avg_tools_per_query(&empty),
            Err(Error::EmptyQueries)
        ));
    }

    #[test]
    fn mixing_a_dataset_with_itself_under_two_tags() {
        let tmp = tempfile::tempdir().unwrap();
        tiny(tmp.path());
        let ds = load_dataset(tmp.path(), DatasetFormat::Jsonl).unwrap();
        let a = Dataset {
            name: "a".into(),
            ..ds.clone()
        };
        let b = Dataset {
            name: "b".into(),
            ..ds
        };
        let mixed = build_mixed(&[a, b]).unwrap();
        assert_eq!(mixed.tools.len(), 6);
        assert!(mixed.tool("a/t1").is_some() && mixed.tool("b/t1").is_some());
        assert!(mixed.qrels.is_relevant("b/q2", "b/t2"));
        assert!(build_mixed(std::slice::from_ref(&mixed)).is_err());
    }

    #[test]
    fn dedup_drops_exact_text_repeats() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "a", 1);
        qrels.insert("q2", "a", 1);
        let mut ds = Dataset {
            name: "d".into(),
            tools: vec![RawTool {
                id: "a".into(),
                source_tag: "d".into(),
                doc: json!("x"),
            }],
            queries: vec![Query::new("q1", "same"), Query::new("q2", "same")],
            qrels,
        };
        assert_eq!(dedup_queries(&mut ds), vec!["q2".to_string()]);
        assert!(!ds.qrels.contains_query("q2"));
        ds.validate().unwrap();
    }
}
