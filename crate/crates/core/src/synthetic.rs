//! Planted synthetic corpora for offline evaluation.
//!
//! Every query has exactly one relevant tool (its twin). The twin's signal
//! field holds a token pair that appears together in no other tool's
//! signal field, apart from decoys. A decoy copies its twin but turns one
//! of the twin's unmatched optional parameters into a required one.
//!
//! Vocabularies are disjoint by construction:
//! query noise appears only in queries and examples, description filler
//! only in descriptions, response words only in responses. Each tool's
//! examples are padded so that every single-text document has the same
//! token count.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Dataset, Qrels, Query, RawTool};
use crate::error::{Error, Result};
use crate::eval::masked_document;
use crate::retrieval::{tokenize, FieldId};
use crate::rewriter::{mock_rewrite, RewrittenQuery};
use crate::standardizer::{ParamSpec, StandardizedTool};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub corpus_size: usize,
    pub num_queries: usize,
    pub signal_field: FieldId,
    pub noise_vocab: usize,
    /// Fraction of queries whose twin gets a decoy.
    pub decoy_fraction: f64,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            corpus_size: 200,
            num_queries: 100,
            signal_field: FieldId::Description,
            noise_vocab: 40,
            decoy_fraction: 0.0,
            seed: 7,
        }
    }
}

const DESCRIPTION_LEN: usize = 12;
const RESPONSE_LEN: usize = 8;
const PARAM_DESC_LEN: usize = 3;
const EXAMPLE_COUNT: usize = 2;
const EXAMPLE_NOISE: usize = 8;
const QUERY_NOISE: usize = 8;
const ROLE_VOCAB: usize = 4;
const QUERY_ROLES: usize = 2;
const FILLER_PARAMS: (usize, usize) = (1, 3);
const FILLER_ROLE_RATE: f64 = 0.7;
const FILLER_REQUIRED_RATE: f64 = 0.3;
const TWIN_OPTIONAL: (usize, usize) = (1, 1);
const CONFUSER_RATE: f64 = 0.5;

impl PlantSpec {
    pub fn decoy_count(&self) -> usize {
        (self.decoy_fraction * self.num_queries as f64).round() as usize
    }

    fn signal_vocab(&self) -> usize {
        // smallest vocabulary with enough distinct pairs, with some slack
        let mut n = 6;
        while n * (n - 1) / 2 < self.num_queries * 2 {
            n += 1;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus_size < 10 {
            return Err(Error::Config(
                "synthetic corpus needs at least 10 tools".into(),
            ));
        }
        if self.num_queries == 0 {
            return Err(Error::Config(
                "synthetic set needs at least one query".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.decoy_fraction) {
            return Err(Error::Config("decoy fraction must lie in [0, 1]".into()));
        }
        if self.num_queries + self.decoy_count() > self.corpus_size {
            return Err(Error::Config(format!(
                "{} twins and {} decoys do not fit in {} tools",
                self.num_queries,
                self.decoy_count(),
                self.corpus_size
            )));
        }
        if self.noise_vocab < QUERY_NOISE {
            return Err(Error::Config(format!(
                "noise vocabulary must hold at least {QUERY_NOISE} words"
            )));
        }
        if self.signal_field == FieldId::Parameters {
            return Err(Error::Config(
                "the parameters field cannot carry a planted token pair".into(),
            ));
        }
        Ok(())
    }
}

/// Letters-only pseudo-words; the prefix keeps vocabularies disjoint.
fn vocab(prefix: &str, n: usize) -> Vec<String> {
    (0..n)
        .map(|mut i| {
            let mut s = String::from(prefix);
            let mut tail = Vec::new();
            loop {
                tail.push((b'a' + (i % 26) as u8) as char);
                i /= 26;
                if i == 0 {
                    break;
                }
            }
            tail.resize(tail.len().max(2), 'a');
            s.extend(tail.iter().rev());
            s
        })
        .collect()
}

struct Vocab {
    signal: Vec<String>,
    noise: Vec<String>,
    filler: Vec<String>,
    response: Vec<String>,
    roles: Vec<String>,
    extra_params: Vec<String>,
    param_desc: Vec<String>,
    padding: Vec<String>,
}

fn pick(rng: &mut ChaCha8Rng, words: &[String], n: usize) -> Vec<String> {
    (0..n)
        .map(|_| words.choose(rng).expect("non-empty vocabulary").clone())
        .collect()
}

fn pick_distinct(rng: &mut ChaCha8Rng, words: &[String], n: usize) -> Vec<String> {
    words.choose_multiple(rng, n).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoyPair {
    pub twin: String,
    pub decoy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Ground-truth standardized corpus, sorted by id.
    pub tools: Vec<StandardizedTool>,
    pub rewritten: Vec<RewrittenQuery>,
    /// Query id to its signal token pair.
    pub signals: BTreeMap<String, (String, String)>,
    pub decoys: BTreeMap<String, DecoyPair>,
}

struct Draft {
    description: Vec<String>,
    params: Vec<ParamSpec>,
    response: Vec<String>,
    examples: Vec<Vec<String>>,
}

impl Draft {
    fn place_signal(&mut self, field: FieldId, a: &str, b: &str, rng: &mut ChaCha8Rng) {
        let target = match field {
            FieldId::Description => &mut self.description,
            FieldId::Response => &mut self.response,
            FieldId::Examples => &mut self.examples[0],
            FieldId::Parameters => unreachable!("rejected by validate"),
        };
        let at = rng.random_range(0..=target.len().saturating_sub(2));
        target.splice(
            at..(at + 2).min(target.len()),
            [a.to_string(), b.to_string()],
        );
    }
}

fn param(rng: &mut ChaCha8Rng, v: &Vocab, name: &str, required: bool) -> ParamSpec {
    ParamSpec::new(
        name,
        "string",
        pick(rng, &v.param_desc, PARAM_DESC_LEN).join(" "),
        required,
    )
}

fn base_draft(rng: &mut ChaCha8Rng, v: &Vocab) -> Draft {
    let mut examples: Vec<Vec<String>> = (0..EXAMPLE_COUNT)
        .map(|_| pick(rng, &v.noise, EXAMPLE_NOISE))
        .collect();
    if rng.random_bool(CONFUSER_RATE) {
        let slot = rng.random_range(0..EXAMPLE_COUNT);
        let at = rng.random_range(0..=EXAMPLE_NOISE);
        examples[slot].insert(at, v.signal.choose(rng).expect("signal words").clone());
    }
    Draft {
        description: pick(rng, &v.filler, DESCRIPTION_LEN),
        params: Vec::new(),
        response: pick(rng, &v.response, RESPONSE_LEN),
        examples,
    }
}

fn finish(id: &str, d: Draft) -> StandardizedTool {
    StandardizedTool {
        tool_id: id.to_string(),
        description: d.description.join(" "),
        parameters: d.params,
        response: d.response.join(" "),
        examples: d.examples.into_iter().map(|e| e.join(" ")).collect(),
    }
}

fn raw_doc(t: &StandardizedTool) -> serde_json::Value {
    json!({
        "description": t.description,
        "parameters": t.parameters.iter().map(|p| json!({
            "name": p.name,
            "type": p.type_hint,
            "description": p.description,
            "required": p.required,
        })).collect::<Vec<_>>(),
        "response": t.response,
        "examples": t.examples,
    })
}

fn document_len(t: &StandardizedTool) -> usize {
    tokenize(&masked_document(t, &BTreeSet::new())).len()
}

pub fn generate(spec: &PlantSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v = Vocab {
        signal: vocab("zs", spec.signal_vocab()),
        noise: vocab("zn", spec.noise_vocab),
        filler: vocab("zd", 200),
        response: vocab("zr", 100),
        roles: vocab("zp", ROLE_VOCAB),
        extra_params: vocab("zx", 40),
        param_desc: vocab("zq", 60),
        padding: vocab("ze", 60),
    };

    let mut pairs = Vec::new();
    for i in 0..v.signal.len() {
        for j in i + 1..v.signal.len() {
            pairs.push((v.signal[i].clone(), v.signal[j].clone()));
        }
    }
    pairs.shuffle(&mut rng);

    let mut ids: Vec<String> = (0..spec.corpus_size).map(|i| format!("t{i:05}")).collect();
    ids.shuffle(&mut rng);
    let mut next_id = ids.into_iter();

    let decoy_count = spec.decoy_count();
    let mut decoy_queries: Vec<usize> = (0..spec.num_queries).collect();
    decoy_queries.shuffle(&mut rng);
    let decoy_queries: BTreeSet<usize> = decoy_queries.into_iter().take(decoy_count).collect();

    let mut tools: Vec<StandardizedTool> = Vec::with_capacity(spec.corpus_size);
    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut qrels = Qrels::new();
    let mut signals = BTreeMap::new();
    let mut decoys = BTreeMap::new();

    for (i, (a, b)) in pairs.iter().take(spec.num_queries).enumerate() {
        let qid = format!("q{i:04}");
        let roles = pick_distinct(&mut rng, &v.roles, QUERY_ROLES);
        let noise = pick(&mut rng, &v.noise, QUERY_NOISE);
        let split = rng.random_range(0..=QUERY_NOISE);
        let quoted: Vec<String> = roles.iter().map(|r| format!("\"{r}\"")).collect();
        let text = format!(
            "{} {a} {b} {} with {}",
            noise[..split].join(" "),
            noise[split..].join(" "),
            quoted.join(" ")
        );
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");

        let mut draft = base_draft(&mut rng, &v);
        draft.place_signal(spec.signal_field, a, b, &mut rng);
        for r in &roles {
            draft.params.push(param(&mut rng, &v, r, true));
        }
        let n_opt = rng.random_range(TWIN_OPTIONAL.0..=TWIN_OPTIONAL.1);
        for name in pick_distinct(&mut rng, &v.extra_params, n_opt) {
            draft.params.push(param(&mut rng, &v, &name, false));
        }
        draft.params.shuffle(&mut rng);
        let twin_id = next_id.next().expect("corpus size checked");
        let twin = finish(&twin_id, draft);

        if decoy_queries.contains(&i) {
            let mut decoy = twin.clone();
            decoy.tool_id = next_id.next().expect("corpus size checked");
            let flip = decoy
                .parameters
                .iter()
                .position(|p| !p.required)
                .expect("twins have an optional parameter");
            decoy.parameters[flip].required = true;
            decoys.insert(
                qid.clone(),
                DecoyPair {
                    twin: twin_id.clone(),
                    decoy: decoy.tool_id.clone(),
                },
            );
            tools.push(decoy);
        }
        tools.push(twin);
        qrels.insert(qid.clone(), twin_id, 1);
        signals.insert(qid.clone(), (a.clone(), b.clone()));
        queries.push(Query::new(qid, text));
    }

    for id in next_id {
        let mut draft = base_draft(&mut rng, &v);
        let lone = v.signal.choose(&mut rng).expect("signal words").clone();
        match spec.signal_field {
            FieldId::Description => draft.description[0] = lone,
            FieldId::Response => draft.response[0] = lone,
            _ => {}
        }
        draft.description.shuffle(&mut rng);
        let n = rng.random_range(FILLER_PARAMS.0..=FILLER_PARAMS.1);
        let mut names = BTreeSet::new();
        while names.len() < n {
            let pool = if rng.random_bool(FILLER_ROLE_RATE) {
                &v.roles
            } else {
                &v.extra_params
            };
            names.insert(pool.choose(&mut rng).expect("names").clone());
        }
        let mut names: Vec<String> = names.into_iter().collect();
        names.shuffle(&mut rng);
        for name in names {
            let required = rng.random_bool(FILLER_REQUIRED_RATE);
            draft.params.push(param(&mut rng, &v, &name, required));
        }
        tools.push(finish(&id, draft));
    }

    // equal single-text lengths: pad the examples with examples-only words
    let target = tools.iter().map(document_len).max().unwrap_or(0);
    for t in &mut tools {
        let missing = target - document_len(t);
        if missing > 0 {
            let pad: Vec<&str> = v
                .padding
                .iter()
                .cycle()
                .take(missing)
                .map(String::as_str)
                .collect();
            let pad = pad.join(" ");
            let last = t.examples.last_mut().expect("examples present");
            last.push(' ');
            last.push_str(&pad);
        }
    }

    tools.sort_by(|x, y| x.tool_id.cmp(&y.tool_id));
    let rewritten = queries.iter().map(mock_rewrite).collect();
    let dataset = Dataset {
        name: "synthetic".into(),
        tools: tools
            .iter()
            .map(|t| RawTool {
                id: t.tool_id.clone(),
                source_tag: "synthetic".into(),
                doc: raw_doc(t),
            })
            .collect(),
        queries,
        qrels,
    };
    dataset.validate()?;
    Ok(Synthetic {
        dataset,
        tools,
        rewritten,
        signals,
        decoys,
    })
}

impl Synthetic {
    /// Writes the dataset files plus `standardized.jsonl` and
    /// `rewritten.jsonl` next to them.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.dataset.save(dir)?;
        crate::standardizer::write_standardized(&dir.join("standardized.jsonl"), &self.tools)?;
        crate::rewriter::write_rewritten(&dir.join("rewritten.jsonl"), &self.rewritten)
    }

    pub fn tool(&self, id: &str) -> Option<&StandardizedTool> {
        self.tools
            .binary_search_by(|t| t.tool_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.tools[i])
    }
}
