//! Frozen embedding providers for task text, node prompts and serialised
//! workflows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph_qa::{longest_path_length, oracle_average_degree, oracle_key_nodes};
use crate::seeding::fnv1a;
use crate::textualize::{parse_serialized, SerializedWorkflow};

/// Sentence-level text encoder used for task instructions and node prompts.
pub trait TextEmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn base_dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Encoder that turns a serialised workflow into one vector.
pub trait SemanticEmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn base_dim(&self) -> usize;
    fn embed_workflow(&self, serialized: &SerializedWorkflow) -> Result<Vec<f64>>;
}

fn check_vector(provider: &str, subject: &str, v: Vec<f64>, dim: usize) -> Result<Vec<f64>> {
    if v.len() != dim {
        return Err(Error::Provider {
            provider: provider.into(),
            subject: subject.into(),
            message: format!("expected {dim} values, got {}", v.len()),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Provider {
            provider: provider.into(),
            subject: subject.into(),
            message: "non-finite entry".into(),
        });
    }
    Ok(v)
}

/// Signed feature hashing over lower-cased word unigrams and bigrams,
/// L2-normalised. Bigrams keep word order visible ("review then test" and
/// "test then review" map to different vectors).
#[derive(Clone, Debug)]
pub struct HashingTextEmbedder {
    dim: usize,
}

impl HashingTextEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(feature.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign * weight;
    }
}

impl TextEmbeddingProvider for HashingTextEmbedder {
    fn name(&self) -> &str {
        "hashing-ngrams"
    }

    fn base_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            self.add(&mut v, &format!("u:{t}"), 1.0);
        }
        for pair in tokens.windows(2) {
            self.add(&mut v, &format!("b:{} {}", pair[0], pair[1]), 1.0);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

pub const DEFAULT_KEYWORDS: [&str; 10] = [
    "plan", "generate", "review", "test", "merge", "debug", "verify", "refine", "summarize", "answer",
];

/// Deterministic structural features read back from the serialised text:
/// `[N, |E|, #sources, #sinks, longest path, average degree, keyword hits...]`,
/// zero-padded or truncated to `base_dim`.
#[derive(Clone, Debug)]
pub struct StructFeatureProvider {
    base_dim: usize,
    keywords: Vec<String>,
}

impl StructFeatureProvider {
    pub fn new(base_dim: usize) -> Self {
        Self::with_keywords(base_dim, DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect())
    }

    pub fn with_keywords(base_dim: usize, keywords: Vec<String>) -> Self {
        Self { base_dim, keywords }
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }
}

impl SemanticEmbeddingProvider for StructFeatureProvider {
    fn name(&self) -> &str {
        "struct-features"
    }

    fn base_dim(&self) -> usize {
        self.base_dim
    }

    fn embed_workflow(&self, serialized: &SerializedWorkflow) -> Result<Vec<f64>> {
        let w = parse_serialized(&serialized.text)?;
        let (sources, sinks) = oracle_key_nodes(&w);
        let mut f = vec![
            w.node_count() as f64,
            w.edge_count() as f64,
            sources.len() as f64,
            sinks.len() as f64,
            longest_path_length(&w) as f64,
            oracle_average_degree(&w),
        ];
        for k in &self.keywords {
            let k = k.to_lowercase();
            let hits = w.nodes.iter().filter(|n| n.prompt.to_lowercase().contains(&k)).count();
            f.push(hits as f64);
        }
        f.resize(self.base_dim, 0.0);
        Ok(f)
    }
}

/// Client for an external embedding / generation service.
///
/// `POST {base}/embed {"text": ..}` returns `{"vector": [..]}` and
/// `POST {base}/generate {"prompt": ..}` returns `{"text": ..}`.
#[derive(Clone, Debug)]
pub struct HttpEmbeddingProvider {
    name: String,
    base_url: String,
    base_dim: usize,
    timeout: Duration,
    retries: u32,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

impl HttpEmbeddingProvider {
    pub fn new(base_url: impl Into<String>, base_dim: usize) -> Self {
        let base_url: String = base_url.into();
        Self {
            name: format!("http:{}", base_url.trim_end_matches('/')),
            base_url: base_url.trim_end_matches('/').to_string(),
            base_dim,
            timeout: Duration::from_secs(60),
            retries: 2,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into()
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, path: &str, body: &Req, subject: &str) -> Result<Resp> {
        let url = format!("{}{path}", self.base_url);
        let agent = self.agent();
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match agent.post(&url).send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<Resp>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("bad response body: {e}"),
                },
                Err(e) => last = e.to_string(),
            }
            log::warn!("{url} attempt {} failed: {last}", attempt + 1);
        }
        Err(Error::Provider {
            provider: self.name.clone(),
            subject: subject.into(),
            message: last,
        })
    }

    pub fn generate(&self, prompt: &str) -> Result<String> {
        let r: GenerateResponse = self.post("/generate", &GenerateRequest { prompt }, "generate")?;
        Ok(r.text)
    }

    fn embed_text(&self, text: &str, subject: &str) -> Result<Vec<f64>> {
        let r: EmbedResponse = self.post("/embed", &EmbedRequest { text }, subject)?;
        check_vector(&self.name, subject, r.vector, self.base_dim)
    }
}

impl TextEmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn base_dim(&self) -> usize {
        self.base_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embed_text(text, "text")
    }
}

impl SemanticEmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn base_dim(&self) -> usize {
        self.base_dim
    }

    fn embed_workflow(&self, serialized: &SerializedWorkflow) -> Result<Vec<f64>> {
        self.embed_text(&serialized.text, &serialized.workflow_id)
    }
}

/// Content-addressed embedding store keyed by `(provider name, sha256(text))`.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, Vec<f64>>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or start) a cache persisted at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    pub fn key(provider: &str, text: &str) -> String {
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("{provider}/{hex}")
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_compute(&self, provider: &str, text: &str, f: impl FnOnce() -> Result<Vec<f64>>) -> Result<Vec<f64>> {
        let key = Self::key(provider, text);
        if let Some(v) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = f()?;
        self.entries.lock().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }

    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let entries = self.entries.lock().expect("cache lock");
        let text = serde_json::to_string(&*entries).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Provider wrapper that consults an [`EmbeddingCache`] first.
pub struct Cached<'a, P> {
    pub inner: P,
    pub cache: &'a EmbeddingCache,
}

impl<P: TextEmbeddingProvider> TextEmbeddingProvider for Cached<'_, P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn base_dim(&self) -> usize {
        self.inner.base_dim()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.cache.get_or_compute(self.inner.name(), text, || self.inner.embed(text))
    }
}

impl<P: SemanticEmbeddingProvider> SemanticEmbeddingProvider for Cached<'_, P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn base_dim(&self) -> usize {
        self.inner.base_dim()
    }

    fn embed_workflow(&self, serialized: &SerializedWorkflow) -> Result<Vec<f64>> {
        self.cache
            .get_or_compute(self.inner.name(), &serialized.text, || self.inner.embed_workflow(serialized))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textualize::serialize_workflow;
    use crate::workflow::AgentWorkflow;

    fn g0() -> AgentWorkflow {
        AgentWorkflow::from_parts(
            "G0",
            &[(0, "Generate code"), (1, "Review code"), (2, "Merge results")],
            &[(0, 1), (0, 2), (1, 2)],
        )
    }

    #[test]
    fn struct_features_of_g0() {
        let p = StructFeatureProvider::new(16);
        let f = p.embed_workflow(&serialize_workflow(&g0()).unwrap()).unwrap();
        assert_eq!(f.len(), 16);
        assert_eq!(&f[..6], &[3.0, 3.0, 1.0, 1.0, 2.0, 2.0]);
        // plan, generate, review, test, merge
        assert_eq!(&f[6..11], &[0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn struct_features_truncate() {
        let p = StructFeatureProvider::new(4);
        let f = p.embed_workflow(&serialize_workflow(&g0()).unwrap()).unwrap();
        assert_eq!(f, vec![3.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn hashing_embedder_is_order_aware_and_normalised() {
        let e = HashingTextEmbedder::new(64);
        let a = e.embed("send the review output to test").unwrap();
        let b = e.embed("send the test output to review").unwrap();
        assert_ne!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(e.embed("").unwrap(), vec![0.0; 64]);
        assert_eq!(e.embed("Same Text").unwrap(), e.embed("same text").unwrap());
    }

    #[test]
    fn cache_keys_on_provider_and_text() {
        let cache = EmbeddingCache::in_memory();
        let p = Cached {
            inner: HashingTextEmbedder::new(8),
            cache: &cache,
        };
        let a = p.embed("hello").unwrap();
        let b = p.embed("hello").unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(), 1);
        p.embed("world").unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn cache_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.get_or_compute("p", "t", || Ok(vec![1.5, 2.5])).unwrap();
            cache.save().unwrap();
        }
        let cache = EmbeddingCache::open(&path).unwrap();
        let v = cache
            .get_or_compute("p", "t", || panic!("should be cached"))
            .unwrap();
        assert_eq!(v, vec![1.5, 2.5]);
    }

    #[test]
    fn unreachable_service_surfaces_provider_error() {
        let p = HttpEmbeddingProvider::new("http://127.0.0.1:9", 4)
            .with_timeout(Duration::from_millis(200))
            .with_retries(0);
        match p.embed("x") {
            Err(Error::Provider { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
