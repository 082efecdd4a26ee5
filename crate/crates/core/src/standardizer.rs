//! Raw tool documentation to the four-field standardized schema.
//!
//! Two routes produce a [`StandardizedTool`]: [`standardize`] asks a
//! chat-completion provider (with a content-addressed cache in front of it)
//! and [`mock_standardize`] extracts fields from recognizable JSON keys
//! without any network access. Both apply the same rule: a parameter is
//! required unless the raw documentation explicitly marks it optional.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::{content_key, ContentCache};
use crate::corpus::RawTool;
use crate::error::{Error, Result};
use crate::provider::{
    complete_structured, extract_json_object, ChatMessage, ChatProvider, LlmRequest,
};
use crate::retrieval::tokenize;

pub const TEMPLATE_VERSION: &str = "standardize-v1";
const TEMPLATE: &str = include_str!("../prompts/standardize_v1.txt");

pub const DEFAULT_PARALLELISM: usize = 4;

fn default_required() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type", default)]
    pub type_hint: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_required")]
    pub required: bool,
}

impl ParamSpec {
    pub fn new(
        name: impl Into<String>,
        type_hint: impl Into<String>,
        description: impl Into<String>,
        required: bool,
    ) -> Self {
        ParamSpec {
            name: name.into(),
            type_hint: type_hint.into(),
            description: description.into(),
            required,
        }
    }

    /// `name (type): description [required|optional]`
    pub fn render(&self) -> String {
        format!(
            "{} ({}): {} [{}]",
            self.name,
            self.type_hint,
            self.description,
            if self.required {
                "required"
            } else {
                "optional"
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardizedTool {
    pub tool_id: String,
    pub description: String,
    pub parameters: Vec<ParamSpec>,
    pub response: String,
    pub examples: Vec<String>,
}

impl StandardizedTool {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::SchemaValidation {
            id: self.tool_id.clone(),
            message,
        };
        if self.description.trim().is_empty() {
            return Err(fail("description is empty".into()));
        }
        let mut names = HashSet::new();
        for p in &self.parameters {
            if p.name.trim().is_empty() {
                return Err(fail("parameter with empty name".into()));
            }
            if !names.insert(p.name.as_str()) {
                return Err(fail(format!("duplicate parameter {:?}", p.name)));
            }
        }
        Ok(())
    }
}

/// The fields a model must return, without the tool id.
#[derive(Debug, Deserialize)]
struct ModelOutput {
    description: String,
    #[serde(default)]
    parameters: Vec<ModelParam>,
    #[serde(default)]
    response: Value,
    #[serde(default)]
    examples: Value,
}

#[derive(Debug, Deserialize)]
struct ModelParam {
    name: String,
    #[serde(rename = "type", alias = "type_hint", default)]
    type_hint: String,
    #[serde(default)]
    description: String,
    #[serde(default = "default_required")]
    required: bool,
}

fn value_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    }
}

fn value_list(v: &Value) -> Vec<String> {
    match v {
        Value::Null => Vec::new(),
        Value::Array(items) => items
            .iter()
            .map(value_text)
            .filter(|s| !s.is_empty())
            .collect(),
        other => {
            let s = value_text(other);
            if s.is_empty() {
                Vec::new()
            } else {
                vec![s]
            }
        }
    }
}

fn parse_model_output(tool_id: &str, text: &str) -> std::result::Result<StandardizedTool, String> {
    let json = extract_json_object(text).ok_or("no JSON object in reply")?;
    let out: ModelOutput = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let tool = StandardizedTool {
        tool_id: tool_id.to_string(),
        description: out.description.trim().to_string(),
        parameters: out
            .parameters
            .into_iter()
            .map(|p| ParamSpec {
                name: p.name.trim().to_string(),
                type_hint: p.type_hint.trim().to_string(),
                description: p.description.trim().to_string(),
                required: p.required,
            })
            .collect(),
        response: value_text(&out.response),
        examples: value_list(&out.examples),
    };
    Ok(tool)
}

/// Renders a raw doc as plain text: strings verbatim, objects as
/// `key: value` lines. Used for the single-text baseline.
pub fn raw_doc_text(doc: &Value) -> String {
    fn walk(v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Null => {}
            Value::String(s) => out.push(s.clone()),
            Value::Bool(b) => out.push(b.to_string()),
            Value::Number(n) => out.push(n.to_string()),
            Value::Array(items) => items.iter().for_each(|i| walk(i, out)),
            Value::Object(map) => {
                for (k, v) in map {
                    out.push(k.clone());
                    walk(v, out);
                }
            }
        }
    }
    let mut parts = Vec::new();
    walk(doc, &mut parts);
    parts.join("\n")
}

/// Names of parameters that the raw documentation explicitly marks optional:
/// `"optional": true`, `"required": false`, or absence from a JSON-schema
/// style `"required": [..]` list next to `"properties"`.
pub fn explicit_optional_names(doc: &Value) -> HashSet<String> {
    fn is_optional(obj: &serde_json::Map<String, Value>) -> bool {
        obj.get("optional") == Some(&Value::Bool(true))
            || obj.get("required") == Some(&Value::Bool(false))
    }
    fn walk(v: &Value, out: &mut HashSet<String>) {
        match v {
            Value::Array(items) => items.iter().for_each(|i| walk(i, out)),
            Value::Object(map) => {
                if let (Some(Value::String(name)), true) = (map.get("name"), is_optional(map)) {
                    out.insert(name.clone());
                }
                if let (Some(Value::Object(props)), Some(Value::Array(req))) =
                    (map.get("properties"), map.get("required"))
                {
                    let req: HashSet<&str> = req.iter().filter_map(Value::as_str).collect();
                    out.extend(props.keys().filter(|k| !req.contains(k.as_str())).cloned());
                }
                for (k, child) in map {
                    if let Value::Object(c) = child {
                        if !c.contains_key("name") && is_optional(c) {
                            out.insert(k.clone());
                        }
                    }
                    walk(child, out);
                }
            }
            _ => {}
        }
    }
    let mut out = HashSet::new();
    walk(doc, &mut out);
    out
}

/// Forces `required = true` unless the raw doc explicitly marks the
/// parameter optional. Free-text docs that use the word "optional" keep the
/// model's judgment, since the mark may be in prose.
fn apply_required_default(tool: &mut StandardizedTool, doc: &Value) {
    let explicit = explicit_optional_names(doc);
    let mentions_optional = tokenize(&raw_doc_text(doc)).iter().any(|t| t == "optional");
    for p in &mut tool.parameters {
        if explicit.contains(&p.name) {
            p.required = false;
        } else if !mentions_optional {
            p.required = true;
        }
    }
}

fn canonical_doc(doc: &Value) -> String {
    // serde_json maps are ordered, so this is stable for equal documents
    doc.to_string()
}

pub fn cache_key(raw: &RawTool) -> String {
    content_key([canonical_doc(&raw.doc).as_str(), TEMPLATE_VERSION])
}

pub fn build_request(raw: &RawTool) -> LlmRequest {
    let doc = match &raw.doc {
        Value::String(s) => s.clone(),
        other => serde_json::to_string_pretty(other).unwrap_or_else(|_| other.to_string()),
    };
    LlmRequest::new(vec![
        ChatMessage::system("You are a precise technical writer. You answer with JSON only."),
        ChatMessage::user(TEMPLATE.replace("{{DOC}}", &doc)),
    ])
}

fn finish(raw: &RawTool, mut tool: StandardizedTool) -> Result<StandardizedTool> {
    apply_required_default(&mut tool, &raw.doc);
    tool.validate()?;
    if tool.response.is_empty() {
        log::warn!(
            "tool {:?}: documentation has no response information",
            raw.id
        );
    }
    Ok(tool)
}

/// Standardizes one tool through the provider, serving repeats from `cache`.
pub fn standardize(
    raw: &RawTool,
    provider: &dyn ChatProvider,
    cache: &ContentCache,
) -> Result<StandardizedTool> {
    let key = cache_key(raw);
    if let Some(text) = cache.get(&key)? {
        match parse_model_output(&raw.id, &text) {
            Ok(tool) => return finish(raw, tool),
            Err(e) => log::warn!("ignoring unparseable cache entry {key}: {e}"),
        }
    }
    let outcome = complete_structured(provider, build_request(raw), |text| {
        parse_model_output(&raw.id, text)
    })?;
    let (tool, text) = outcome.map_err(|message| Error::Standardize {
        tool_id: raw.id.clone(),
        message,
    })?;
    let tool = finish(raw, tool)?;
    cache.put(&key, &text)?;
    Ok(tool)
}

const DESCRIPTION_KEYS: &[&str] = &["description", "desc"];
const PARAMETER_KEYS: &[&str] = &["parameters", "api_arguments", "arguments", "params"];
const RESPONSE_KEYS: &[&str] = &["response", "returns", "return", "output"];
const EXAMPLE_KEYS: &[&str] = &["examples", "example"];

fn first_key<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k))
}

fn mock_param(name: &str, spec: &Value, schema_required: Option<&HashSet<&str>>) -> ParamSpec {
    let (type_hint, description, explicit) = match spec {
        Value::Object(o) => {
            let t = o
                .get("type")
                .or_else(|| o.get("type_hint"))
                .map(value_text)
                .unwrap_or_default();
            let d = o
                .get("description")
                .or_else(|| o.get("desc"))
                .map(value_text)
                .unwrap_or_default();
            let explicit = o.get("optional") == Some(&Value::Bool(true))
                || o.get("required") == Some(&Value::Bool(false));
            (t, d, explicit)
        }
        Value::String(s) => (String::new(), s.clone(), false),
        _ => (String::new(), String::new(), false),
    };
    let optional = explicit || schema_required.is_some_and(|req| !req.contains(name));
    ParamSpec::new(name, type_hint, description, !optional)
}

fn mock_params(v: &Value) -> Vec<ParamSpec> {
    match v {
        Value::Array(items) => items
            .iter()
            .filter_map(|item| match item {
                Value::String(name) => Some(ParamSpec::new(name.as_str(), "", "", true)),
                Value::Object(o) => {
                    let name = o.get("name").map(value_text)?;
                    Some(mock_param(&name, item, None))
                }
                _ => None,
            })
            .collect(),
        Value::Object(o) => {
            if let Some(Value::Object(props)) = o.get("properties") {
                let req: Option<HashSet<&str>> = o
                    .get("required")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).collect());
                props
                    .iter()
                    .map(|(name, spec)| mock_param(name, spec, req.as_ref()))
                    .collect()
            } else {
                o.iter()
                    .map(|(name, spec)| mock_param(name, spec, None))
                    .collect()
            }
        }
        _ => Vec::new(),
    }
}

/// Rule-based standardization of structured JSON docs. Deterministic and
/// offline.
pub fn mock_standardize(raw: &RawTool) -> Result<StandardizedTool> {
    let missing = || Error::Standardize {
        tool_id: raw.id.clone(),
        message: "no description-like key (description/desc) in documentation".into(),
    };
    let Value::Object(obj) = &raw.doc else {
        return Err(missing());
    };
    let description = first_key(obj, DESCRIPTION_KEYS)
        .map(value_text)
        .filter(|d| !d.is_empty())
        .ok_or_else(missing)?;
    let tool = StandardizedTool {
        tool_id: raw.id.clone(),
        description,
        parameters: first_key(obj, PARAMETER_KEYS)
            .map(mock_params)
            .unwrap_or_default(),
        response: first_key(obj, RESPONSE_KEYS)
            .map(value_text)
            .unwrap_or_default(),
        examples: first_key(obj, EXAMPLE_KEYS)
            .map(value_list)
            .unwrap_or_default(),
    };
    finish(raw, tool)
}

/// Which route standardizes documentation.
#[derive(Clone, Copy)]
pub enum Standardizer<'a> {
    Mock,
    Llm {
        provider: &'a dyn ChatProvider,
        cache: &'a ContentCache,
    },
}

impl Standardizer<'_> {
    pub fn run(&self, raw: &RawTool) -> Result<StandardizedTool> {
        match self {
            Standardizer::Mock => mock_standardize(raw),
            Standardizer::Llm { provider, cache } => standardize(raw, *provider, cache),
        }
    }

    /// Standardizes every tool with at most `parallelism` in flight. Output
    /// order follows input order.
    pub fn run_all(&self, tools: &[RawTool], parallelism: usize) -> Result<Vec<StandardizedTool>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| tools.par_iter().map(|t| self.run(t)).collect())
    }
}

pub fn write_standardized(path: &std::path::Path, tools: &[StandardizedTool]) -> Result<()> {
    crate::corpus::write_jsonl(path, tools)
}

pub fn read_standardized(path: &std::path::Path) -> Result<Vec<StandardizedTool>> {
    let tools: Vec<StandardizedTool> = crate::corpus::read_jsonl(path)?;
    for t in &tools {
        t.validate()?;
    }
    Ok(tools)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::LlmResponse;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn raw(id: &str, doc: Value) -> RawTool {
        RawTool {
            id: id.into(),
            source_tag: "test".into(),
            doc,
        }
    }

    /// Replies with canned texts in order and counts calls.
    struct Scripted {
        replies: Mutex<Vec<String>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Scripted {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ChatProvider for Scripted {
        fn complete(&self, _request: &LlmRequest) -> Result<LlmResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let text = self
                .replies
                .lock()
                .unwrap()
                .pop()
                .expect("unexpected extra call");
            Ok(LlmResponse {
                text,
                finish_reason: Some("stop".into()),
            })
        }
    }

    const GOOD: &str = r#"```json
{"description":"Returns the weather for a city","parameters":[{"name":"city","type":"string","description":"city name","required":true},{"name":"units","type":"string","description":"unit system","required":false}],"response":"current conditions","examples":["what's the weather in Paris"]}
```"#;

    #[test]
    fn explicit_optional_flag_passes_through() {
        let doc = json!({"desc": "weather", "parameters": [
            {"name": "city", "type": "string"},
            {"name": "units", "type": "string", "optional": true}
        ]});
        let provider = Scripted::new(&[GOOD]);
        let tmp = tempfile::tempdir().unwrap();
        let cache = ContentCache::new(tmp.path(), "std").unwrap();
        let tool = standardize(&raw("w", doc), &provider, &cache).unwrap();
        assert!(tool.parameters[0].required);
        assert!(!tool.parameters[1].required);
    }

    #[test]
    fn parameters_without_optionality_info_become_required() {
        // the model claims `units` is optional, but nothing in the doc says so
        let doc = json!({"desc": "weather", "api_arguments": ["city", "units"]});
        let provider = Scripted::new(&[GOOD]);
        let tmp = tempfile::tempdir().unwrap();
        let cache = ContentCache::new(tmp.path(), "std").unwrap();
        let tool = standardize(&raw("w", doc), &provider, &cache).unwrap();
        assert!(tool.parameters.iter().all(|p| p.required));
    }

    #[test]
    fn repeat_is_served_from_cache_byte_identically() {
        let doc = json!({"desc": "weather"});
        let provider = Scripted::new(&[GOOD]);
        let tmp = tempfile::tempdir().unwrap();
        let cache = ContentCache::new(tmp.path(), "std").unwrap();
        let a = standardize(&raw("w", doc.clone()), &provider, &cache).unwrap();
        let b = standardize(&raw("w", doc), &provider, &cache).unwrap();
        assert_eq!(provider.calls.load(Ordering::SeqCst), 1);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn one_repair_round_then_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = ContentCache::new(tmp.path(), "std").unwrap();

        let provider = Scripted::new(&["not json", GOOD]);
        let tool = standardize(&raw("w", json!({"desc": "x"})), &provider, &cache).unwrap();
        assert_eq!(tool.description, "Returns the weather for a city");
        assert_eq!(provider.calls.load(Ordering::SeqCst), 2);

        let provider = Scripted::new(&["nope", "still nope"]);
        let err = standardize(&raw("bad", json!({"desc": "y"})), &provider, &cache).unwrap_err();
        assert!(matches!(err, Error::Standardize { ref tool_id, .. } if tool_id == "bad"));
        assert_eq!(provider.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn empty_description_fails_schema_validation() {
        let provider =
            Scripted::new(&[r#"{"description":"  ","parameters":[],"response":"","examples":[]}"#]);
        let tmp = tempfile::tempdir().unwrap();
        let cache = ContentCache::new(tmp.path(), "std").unwrap();
        let err = standardize(&raw("e", json!({"desc": "x"})), &provider, &cache).unwrap_err();
        assert!(matches!(err, Error::SchemaValidation { .. }), "{err}");
    }

    #[test]
    fn mock_extracts_aliased_keys() {
        let t = mock_standardize(&raw(
            "add",
            json!({"desc": "adds numbers", "api_arguments": [{"name": "a"}, {"name": "b"}]}),
        ))
        .unwrap();
        assert_eq!(t.description, "adds numbers");
        assert_eq!(t.parameters.len(), 2);
        assert!(t.parameters.iter().all(|p| p.required));

        let t = mock_standardize(&raw(
            "x",
            json!({"description": "x", "returns": "a JSON list"}),
        ))
        .unwrap();
        assert_eq!(t.response, "a JSON list");
        assert!(t.parameters.is_empty());
    }

    #[test]
    fn mock_reads_json_schema_parameters() {
        let t = mock_standardize(&raw(
            "s",
            json!({"description": "search", "parameters": {
                "type": "object",
                "properties": {"q": {"type": "string", "description": "query"}, "limit": {"type": "integer"}},
                "required": ["q"]
            }}),
        ))
        .unwrap();
        let by_name = |n: &str| t.parameters.iter().find(|p| p.name == n).unwrap();
        assert!(by_name("q").required);
        assert!(!by_name("limit").required);
        assert_eq!(by_name("limit").type_hint, "integer");
    }

    #[test]
    fn mock_is_deterministic_and_needs_a_description() {
        let r = raw("d", json!({"description": "a", "examples": "use it"}));
        assert_eq!(mock_standardize(&r).unwrap(), mock_standardize(&r).unwrap());
        assert_eq!(
            mock_standardize(&r).unwrap().examples,
            vec!["use it".to_string()]
        );
        assert!(mock_standardize(&raw("n", json!({"parameters": []}))).is_err());
        assert!(mock_standardize(&raw("p", json!("plain text"))).is_err());
    }

    #[test]
    fn standardized_json_has_exactly_the_schema_keys() {
        let t = mock_standardize(&raw("d", json!({"description": "a"}))).unwrap();
        let v = serde_json::to_value(&t).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            [
                "description",
                "examples",
                "parameters",
                "response",
                "tool_id"
            ]
        );
    }

    #[test]
    fn run_all_preserves_order() {
        let tools: Vec<RawTool> = (0..20)
            .map(|i| {
                raw(
                    &format!("t{i:02}"),
                    json!({"description": format!("tool {i}")}),
                )
            })
            .collect();
        let out = Standardizer::Mock.run_all(&tools, 4).unwrap();
        let ids: Vec<&str> = out.iter().map(|t| t.tool_id.as_str()).collect();
        let want: Vec<&str> = tools.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, want);
    }
}
