//! Embedding store and cosine similarity.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize;
use crate::cache::content_key;
use crate::error::{Error, Result};
use crate::provider::EmbeddingProvider;

const NORM_TOLERANCE: f64 = 1e-6;
const EMBED_BATCH: usize = 64;

pub fn text_hash(text: &str) -> String {
    content_key([text])
}

/// Unit-normalized vectors keyed by the SHA-256 of their text, for a single
/// provider.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    provider_tag: String,
    dim: Option<usize>,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StoreLine {
    provider: String,
    hash: String,
    vector: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(provider_tag: impl Into<String>) -> Self {
        EmbeddingStore {
            provider_tag: provider_tag.into(),
            dim: None,
            vectors: BTreeMap::new(),
        }
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&[f64]> {
        self.vectors.get(&text_hash(text)).map(Vec::as_slice)
    }

    /// Normalizes and stores a vector. Zero vectors and dimension changes are
    /// configuration errors.
    pub fn insert(&mut self, text: &str, vector: Vec<f64>) -> Result<&[f64]> {
        let vector = normalize(vector)?;
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: vector.len(),
                })
            }
            _ => self.dim = Some(vector.len()),
        }
        let slot = self.vectors.entry(text_hash(text)).or_insert(vector);
        Ok(slot.as_slice())
    }

    /// Loads the entries of `path` that belong to `provider_tag`; a missing
    /// file yields an empty store.
    pub fn load(path: &Path, provider_tag: &str) -> Result<Self> {
        let mut store = EmbeddingStore::new(provider_tag);
        if !path.exists() {
            return Ok(store);
        }
        for line in crate::corpus::read_jsonl::<StoreLine>(path)? {
            if line.provider != provider_tag {
                continue;
            }
            let v = line.vector;
            if let Some(d) = store.dim {
                if d != v.len() {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: v.len(),
                    });
                }
            }
            store.dim = Some(v.len());
            store.vectors.insert(line.hash, v);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for (hash, vector) in &self.vectors {
            let line = serde_json::to_string(&StoreLine {
                provider: self.provider_tag.clone(),
                hash: hash.clone(),
                vector: vector.clone(),
            })?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Config(format!(
            "cannot normalize embedding with norm {norm}"
        )));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Embeds `texts`, serving cached vectors from `store` and asking the
/// provider only for the rest. Output order matches input order.
pub fn embed(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    store: &mut EmbeddingStore,
) -> Result<Vec<Vec<f64>>> {
    if provider.tag() != store.provider_tag() {
        return Err(Error::Config(format!(
            "embedding store belongs to {:?}, provider is {:?}",
            store.provider_tag(),
            provider.tag()
        )));
    }
    let mut missing: Vec<String> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for t in texts {
        if store.get(t).is_none() && queued.insert(t.as_str()) {
            missing.push(t.clone());
        }
    }
    for chunk in missing.chunks(EMBED_BATCH) {
        let vectors = provider.embed_batch(chunk)?;
        if vectors.len() != chunk.len() {
            return Err(Error::Provider(format!(
                "asked for {} embeddings, got {}",
                chunk.len(),
                vectors.len()
            )));
        }
        for (text, v) in chunk.iter().zip(vectors) {
            store.insert(text, v)?;
        }
    }
    Ok(texts
        .iter()
        .map(|t| store.get(t).expect("embedded above").to_vec())
        .collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (nu - 1.0).abs() <= NORM_TOLERANCE && (nv - 1.0).abs() <= NORM_TOLERANCE {
        Ok(dot.clamp(-1.0, 1.0))
    } else if nu == 0.0 || nv == 0.0 {
        Err(Error::Contract("cosine of a zero vector".into()))
    } else {
        Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
    }
}

/// Deterministic offline embedder: signed feature hashing of lowercase
/// tokens. Texts without tokens map to a fixed sentinel bucket.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    tag: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        HashingEmbedder {
            dim,
            tag: format!("hashing-{dim}"),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            v[(fnv1a(b"\0empty") % self.dim as u64) as usize] = 1.0;
            return v;
        }
        for t in &tokens {
            let h = fnv1a(t.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        if v.iter().all(|&x| x == 0.0) {
            // every token cancelled out; fall back to the first token's bucket
            v[(fnv1a(tokens[0].as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        inner: HashingEmbedder,
        calls: AtomicUsize,
        texts: AtomicUsize,
    }

    impl EmbeddingProvider for Counting {
        fn tag(&self) -> &str {
            self.inner.tag()
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.texts.fetch_add(texts.len(), Ordering::SeqCst);
            self.inner.embed_batch(texts)
        }
    }

    fn counting() -> Counting {
        Counting {
            inner: HashingEmbedder::new(32),
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
        }
    }

    #[test]
    fn second_embed_is_a_cache_hit() {
        let p = counting();
        let mut store = EmbeddingStore::new(p.tag());
        let a = embed(&p, &["weather today".into()], &mut store).unwrap();
        let b = embed(&p, &["weather today".into()], &mut store).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_string_is_embedded_and_cached() {
        let p = counting();
        let mut store = EmbeddingStore::new(p.tag());
        let v = embed(&p, &[String::new()], &mut store).unwrap();
        assert_eq!(v.len(), 1);
        assert!(store.get("").is_some());
        let norm: f64 = v[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_order_is_preserved() {
        let p = counting();
        let mut store = EmbeddingStore::new(p.tag());
        let texts: Vec<String> = ["alpha", "beta", "gamma"].map(String::from).to_vec();
        embed(&p, &texts[1..2], &mut store).unwrap();
        let out = embed(&p, &texts, &mut store).unwrap();
        for (t, v) in texts.iter().zip(&out) {
            assert_eq!(v.as_slice(), store.get(t).unwrap());
        }
        // beta was cached, so only alpha and gamma went to the provider
        assert_eq!(p.texts.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn dimension_mismatch_is_a_configuration_error() {
        let mut store = EmbeddingStore::new("x");
        store.insert("a", vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            store.insert("b", vec![1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn store_round_trips_through_jsonl() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("emb.jsonl");
        let p = HashingEmbedder::new(16);
        let mut store = EmbeddingStore::new(p.tag());
        embed(&p, &["one".into(), "two three".into()], &mut store).unwrap();
        store.save(&path).unwrap();
        assert_eq!(EmbeddingStore::load(&path, p.tag()).unwrap(), store);
        assert!(EmbeddingStore::load(&path, "other").unwrap().is_empty());
    }

    #[test]
    fn cosine_examples() {
        let u = [0.6, 0.8];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&u, &[1.0, 0.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(cosine(&u, &[1.0, 0.0, 0.0]).is_err());
    }
}
