//! Dense vectors for instances under three representation regimes, the
//! JSONL vector file format, and embedding providers.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DatasetSplit, REInstance};
use crate::llm::RetryPolicy;
use crate::prompt::PromptTemplates;

pub const VECTOR_FORMAT: &str = "rev1";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed vector record: {message}")]
    Malformed { line: usize, message: String },
    #[error("unsupported vector file format `{0}`")]
    Format(String),
    #[error("dimension mismatch for `{id}`: expected {expected}, got {got}")]
    DimMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("regime mismatch for `{id}`: store holds {expected}, record is {got}")]
    RegimeMismatch {
        id: String,
        expected: Regime,
        got: Regime,
    },
    #[error("zero vector for `{0}`")]
    ZeroVector(String),
    #[error("duplicate vector id `{0}`")]
    DuplicateId(String),
    #[error("vector id `{0}` does not belong to the split")]
    UnknownId(String),
    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },
    #[error("regime `{0}` cannot be computed by an embedding provider")]
    NotEmbeddable(Regime),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Sent,
    #[serde(rename = "entprompt")]
    EntPrompt,
    Ft,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Sent => "sent",
            Regime::EntPrompt => "entprompt",
            Regime::Ft => "ft",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sent" => Ok(Regime::Sent),
            "entprompt" => Ok(Regime::EntPrompt),
            "ft" => Ok(Regime::Ft),
            other => Err(format!("unknown regime `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    #[serde(rename = "id")]
    pub instance_id: String,
    pub regime: Regime,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub(crate) fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    dim: usize,
    regime: Regime,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    meta: serde_json::Map<String, serde_json::Value>,
}

/// Append-only collection of vectors sharing one regime and dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    regime: Regime,
    dim: usize,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<String, usize>,
    meta: serde_json::Map<String, serde_json::Value>,
}

impl EmbeddingStore {
    pub fn new(regime: Regime, dim: usize) -> Self {
        Self {
            regime,
            dim,
            records: Vec::new(),
            by_id: HashMap::new(),
            meta: serde_json::Map::new(),
        }
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Free-form provenance recorded in the file header, e.g. provider name
    /// or input truncation length.
    pub fn meta(&self) -> &serde_json::Map<String, serde_json::Value> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<(), EmbedError> {
        let record = EmbeddingRecord {
            instance_id: id.into(),
            regime: self.regime,
            dim: values.len(),
            values,
        };
        self.insert(record)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<(), EmbedError> {
        if record.regime != self.regime {
            return Err(EmbedError::RegimeMismatch {
                id: record.instance_id,
                expected: self.regime,
                got: record.regime,
            });
        }
        if record.dim != self.dim || record.values.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                id: record.instance_id,
                expected: self.dim,
                got: record.values.len(),
            });
        }
        if !record.norm().is_normal() || record.values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::ZeroVector(record.instance_id));
        }
        if self.by_id.contains_key(&record.instance_id) {
            return Err(EmbedError::DuplicateId(record.instance_id));
        }
        self.by_id
            .insert(record.instance_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = Header {
            format: VECTOR_FORMAT.to_string(),
            dim: self.dim,
            regime: self.regime,
            meta: self.meta.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for record in &self.records {
            writeln!(out, "{}", serde_json::to_string(record)?)?;
        }
        Ok(())
    }

    /// Writes the store through a temporary file so readers never observe a
    /// partially written store.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        let path = path.as_ref();
        let io = |source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut writer = std::io::BufWriter::new(File::create(&tmp).map_err(io)?);
            self.write_to(&mut writer).map_err(io)?;
            writer.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn read_from<R: std::io::Read>(reader: R) -> Result<Self, EmbedError> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let io = |source| EmbedError::Io {
            path: "<reader>".into(),
            source,
        };
        let header: Header = loop {
            match lines.next() {
                None => {
                    return Err(EmbedError::Malformed {
                        line: 1,
                        message: "missing header line".into(),
                    })
                }
                Some((i, line)) => {
                    let line = line.map_err(io)?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| EmbedError::Malformed {
                        line: i + 1,
                        message: format!("bad header: {e}"),
                    })?;
                }
            }
        };
        if header.format != VECTOR_FORMAT {
            return Err(EmbedError::Format(header.format));
        }
        let mut store = EmbeddingStore::new(header.regime, header.dim);
        store.meta = header.meta;
        for (i, line) in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let record: EmbeddingRecord =
                serde_json::from_str(&line).map_err(|e| EmbedError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            store.insert(record)?;
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(file)
    }
}

/// Text encoder used to build `sent` and `entprompt` stores. Identical input
/// must map to the identical vector.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Deterministic bag-of-words projection: every lowercased word hashes to a
/// pseudo-random dense vector, and the text vector is their sum.
#[derive(Debug, Clone)]
pub struct HashProjectionProvider {
    dim: usize,
    name: String,
}

impl HashProjectionProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            name: format!("hash-projection-{dim}"),
        }
    }

    fn word_vector(&self, word: &str, out: &mut [f32]) {
        let mut block = 0u32;
        let mut filled = 0;
        while filled < self.dim {
            let digest = Sha256::new()
                .chain_update(word.as_bytes())
                .chain_update(block.to_le_bytes())
                .finalize();
            for pair in digest.chunks_exact(2) {
                if filled == self.dim {
                    break;
                }
                let raw = u16::from_le_bytes([pair[0], pair[1]]);
                out[filled] += raw as f32 / 32767.5 - 1.0;
                filled += 1;
            }
            block += 1;
        }
    }
}

impl EmbeddingProvider for HashProjectionProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut v = vec![0f32; self.dim];
                for word in text.split_whitespace() {
                    let word: String = word
                        .chars()
                        .filter(|c| c.is_alphanumeric())
                        .flat_map(char::to_lowercase)
                        .collect();
                    if !word.is_empty() {
                        self.word_vector(&word, &mut v);
                    }
                }
                if v.iter().all(|&x| x == 0.0) {
                    // Texts without words still need a nonzero vector.
                    v[0] = 1.0;
                }
                v
            })
            .collect())
    }
}

/// Provider backed by a fixed text → vector table. Unknown texts fail.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEmbeddingProvider {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
    calls: std::sync::Arc<parking_lot::Mutex<Vec<String>>>,
}

impl ScriptedEmbeddingProvider {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn with(mut self, text: impl Into<String>, vector: Vec<f32>) -> Self {
        assert_eq!(vector.len(), self.dim);
        self.table.insert(text.into(), vector);
        self
    }

    /// Every text this provider has been asked to embed, in call order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().clone()
    }
}

impl EmbeddingProvider for ScriptedEmbeddingProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        self.calls.lock().extend(texts.iter().cloned());
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| EmbedError::Provider {
                        provider: "scripted".into(),
                        message: format!("no vector scripted for `{t}`"),
                    })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Embedding service reached over HTTP: `POST {"texts": [...]}` returning
/// `{"vectors": [[...]]}`. A bearer token is read from `token_env` when set.
pub struct HttpEmbeddingProvider {
    name: String,
    url: String,
    dim: usize,
    token: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpEmbeddingProvider {
    pub const URL_ENV: &'static str = "REICL_EMBED_URL";
    pub const TOKEN_ENV: &'static str = "REICL_EMBED_TOKEN";

    pub fn new(url: impl Into<String>, dim: usize, token: Option<String>) -> Self {
        let url = url.into();
        Self {
            name: format!("http:{url}"),
            url,
            dim,
            token,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client"),
            retry: RetryPolicy::default(),
        }
    }

    pub fn from_env(dim: usize) -> Result<Self, EmbedError> {
        let url = std::env::var(Self::URL_ENV).map_err(|_| EmbedError::Provider {
            provider: "http".into(),
            message: format!("{} is not set", Self::URL_ENV),
        })?;
        Ok(Self::new(url, dim, std::env::var(Self::TOKEN_ENV).ok()))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn post(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, (bool, String)> {
        let mut req = self.client.post(&self.url).json(&EmbedRequest { texts });
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let transient = status.as_u16() == 429 || status.is_server_error();
            return Err((transient, format!("status {status}")));
        }
        let body: EmbedResponse = resp.json().map_err(|e| (false, e.to_string()))?;
        Ok(body.vectors)
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let vectors =
            self.retry
                .run(|| self.post(texts))
                .map_err(|message| EmbedError::Provider {
                    provider: self.name.clone(),
                    message,
                })?;
        if vectors.len() != texts.len() {
            return Err(EmbedError::Provider {
                provider: self.name.clone(),
                message: format!("asked for {} vectors, got {}", texts.len(), vectors.len()),
            });
        }
        Ok(vectors)
    }
}

/// `The relation between '<subject>' and '<object>' in the context: <sentence>`
pub fn entity_prompt_text(instance: &REInstance) -> String {
    PromptTemplates::default().entity_prompt(instance)
}

/// Input text for an instance under a provider-computed regime.
pub fn regime_text(
    instance: &REInstance,
    regime: Regime,
    templates: &PromptTemplates,
) -> Result<String, EmbedError> {
    match regime {
        Regime::Sent => Ok(instance.sentence()),
        Regime::EntPrompt => Ok(templates.entity_prompt(instance)),
        Regime::Ft => Err(EmbedError::NotEmbeddable(Regime::Ft)),
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_in_flight: 4,
        }
    }
}

/// Embeds every instance of `split` that `store` does not already hold.
/// Returns the number of newly embedded instances.
pub fn embed_into(
    store: &mut EmbeddingStore,
    split: &DatasetSplit,
    provider: &dyn EmbeddingProvider,
    templates: &PromptTemplates,
    options: &EmbedOptions,
) -> Result<usize, EmbedError> {
    if provider.dim() != store.dim() {
        return Err(EmbedError::DimMismatch {
            id: format!("<provider {}>", provider.name()),
            expected: store.dim(),
            got: provider.dim(),
        });
    }
    let pending: Vec<&REInstance> = split
        .instances()
        .iter()
        .filter(|i| !store.contains(&i.id))
        .collect();
    if pending.is_empty() {
        return Ok(0);
    }
    let batches: Vec<Vec<&REInstance>> = pending
        .chunks(options.batch_size.max(1))
        .map(<[_]>::to_vec)
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.max_in_flight.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<Vec<Vec<f32>>, EmbedError>> = pool.install(|| {
        use rayon::prelude::*;
        batches
            .par_iter()
            .map(|batch| {
                let texts = batch
                    .iter()
                    .map(|inst| regime_text(inst, store.regime(), templates))
                    .collect::<Result<Vec<_>, _>>()?;
                provider.embed(&texts)
            })
            .collect()
    });
    let mut added = 0;
    for (batch, result) in batches.iter().zip(results) {
        let vectors = result?;
        for (inst, values) in batch.iter().zip(vectors) {
            store.push(inst.id.clone(), values)?;
            added += 1;
        }
    }
    store.set_meta("provider", provider.name().into());
    Ok(added)
}

/// Loads or creates the store at `path`, embeds missing instances and
/// persists it. Re-running over the same split leaves the file unchanged.
pub fn embed_split(
    split: &DatasetSplit,
    provider: &dyn EmbeddingProvider,
    regime: Regime,
    path: impl AsRef<Path>,
    templates: &PromptTemplates,
    options: &EmbedOptions,
) -> Result<EmbeddingStore, EmbedError> {
    let path = path.as_ref();
    if regime == Regime::Ft {
        return Err(EmbedError::NotEmbeddable(regime));
    }
    let mut store = if path.exists() {
        let store = EmbeddingStore::load(path)?;
        if store.regime() != regime {
            return Err(EmbedError::RegimeMismatch {
                id: path.display().to_string(),
                expected: store.regime(),
                got: regime,
            });
        }
        store
    } else {
        EmbeddingStore::new(regime, provider.dim())
    };
    let added = embed_into(&mut store, split, provider, templates, options)?;
    if added > 0 || !path.exists() {
        store.save(path)?;
    }
    tracing::info!(added, total = store.len(), %regime, "embedded split");
    Ok(store)
}

/// Reads fine-tuned relation vectors exported by the trainer and checks them
/// against `split`.
pub fn import_ft_vectors(
    path: impl AsRef<Path>,
    split: &DatasetSplit,
) -> Result<EmbeddingStore, EmbedError> {
    let store = EmbeddingStore::load(path)?;
    check_ft_store(&store, split)?;
    Ok(store)
}

pub fn check_ft_store(store: &EmbeddingStore, split: &DatasetSplit) -> Result<(), EmbedError> {
    if store.regime() != Regime::Ft {
        return Err(EmbedError::RegimeMismatch {
            id: "<header>".into(),
            expected: Regime::Ft,
            got: store.regime(),
        });
    }
    let ids = split.id_positions();
    for record in store.records() {
        if !ids.contains_key(record.instance_id.as_str()) {
            return Err(EmbedError::UnknownId(record.instance_id.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures;
    use crate::corpus::{EntityMention, RelationLabel, Role, SplitName};

    fn he_lisa() -> REInstance {
        let tokens: Vec<String> = "He has a sister Lisa"
            .split(' ')
            .map(String::from)
            .collect();
        REInstance {
            id: "ex".into(),
            tokens,
            subject: EntityMention {
                text: "He".into(),
                start: 0,
                end: 1,
                entity_type: Some("PER".into()),
                role: Role::Subject,
            },
            object: EntityMention {
                text: "Lisa".into(),
                start: 4,
                end: 5,
                entity_type: Some("PER".into()),
                role: Role::Object,
            },
            gold_label: RelationLabel::new("per:siblings", None),
        }
    }

    #[test]
    fn entity_prompt_worked_example() {
        assert_eq!(
            entity_prompt_text(&he_lisa()),
            "The relation between 'He' and 'Lisa' in the context: He has a sister Lisa"
        );
    }

    #[test]
    fn entity_prompt_keeps_apostrophes() {
        let mut inst = he_lisa();
        inst.tokens[0] = "O'Neil".into();
        inst.subject.text = "O'Neil".into();
        assert_eq!(
            entity_prompt_text(&inst),
            "The relation between 'O'Neil' and 'Lisa' in the context: O'Neil has a sister Lisa"
        );
    }

    fn three_split() -> DatasetSplit {
        let schema = fixtures::schema(&["A"]);
        let mut split = fixtures::split(&schema, &["A", "NULL", "A"]);
        split.name = SplitName::Train;
        split
    }

    #[test]
    fn embed_split_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sent.jsonl");
        let split = three_split();
        let provider = HashProjectionProvider::new(16);
        let templates = PromptTemplates::default();
        let opts = EmbedOptions::default();
        let store = embed_split(&split, &provider, Regime::Sent, &path, &templates, &opts).unwrap();
        assert_eq!(store.len(), 3);
        assert!(store.records().iter().all(|r| r.dim == 16));
        let first = std::fs::read(&path).unwrap();
        embed_split(&split, &provider, Regime::Sent, &path, &templates, &opts).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        // A different-dim provider is rejected against the existing store.
        let other = HashProjectionProvider::new(8);
        assert!(matches!(
            embed_split(&split, &other, Regime::Sent, &path, &templates, &opts),
            Err(EmbedError::DimMismatch { .. })
        ));
    }

    #[test]
    fn entprompt_regime_sends_template() {
        let inst = he_lisa();
        let schema = fixtures::schema(&["per:siblings"]);
        let split = DatasetSplit::new(SplitName::Train, schema, vec![inst]).unwrap();
        let text = "The relation between 'He' and 'Lisa' in the context: He has a sister Lisa";
        let provider = ScriptedEmbeddingProvider::new(2).with(text, vec![1.0, 0.0]);
        let mut store = EmbeddingStore::new(Regime::EntPrompt, 2);
        embed_into(
            &mut store,
            &split,
            &provider,
            &PromptTemplates::default(),
            &EmbedOptions::default(),
        )
        .unwrap();
        assert_eq!(provider.calls(), vec![text.to_string()]);
    }

    #[test]
    fn hash_provider_is_deterministic() {
        let p = HashProjectionProvider::new(32);
        let texts = vec!["a cat sat".to_string(), "a cat sat".to_string()];
        let out = p.embed(&texts).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0], p.embed(&texts[..1]).unwrap()[0]);
    }

    #[test]
    fn store_rejects_bad_records() {
        let mut store = EmbeddingStore::new(Regime::Ft, 3);
        assert!(matches!(
            store.push("z", vec![0.0; 3]),
            Err(EmbedError::ZeroVector(_))
        ));
        assert!(matches!(
            store.push("a", vec![1.0; 2]),
            Err(EmbedError::DimMismatch { .. })
        ));
        store.push("a", vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            store.push("a", vec![1.0; 3]),
            Err(EmbedError::DuplicateId(_))
        ));
        let wrong = EmbeddingRecord {
            instance_id: "b".into(),
            regime: Regime::Sent,
            dim: 3,
            values: vec![1.0; 3],
        };
        assert!(matches!(
            store.insert(wrong),
            Err(EmbedError::RegimeMismatch { .. })
        ));
    }

    #[test]
    fn vector_file_format() {
        let mut store = EmbeddingStore::new(Regime::Ft, 2);
        store.push("i0000", vec![0.1, -2.5]).unwrap();
        let mut out = Vec::new();
        store.write_to(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            r#"{"format":"rev1","dim":2,"regime":"ft"}"#
        );
        assert_eq!(
            lines.next().unwrap(),
            r#"{"id":"i0000","regime":"ft","dim":2,"values":[0.1,-2.5]}"#
        );
        let back = EmbeddingStore::read_from(text.as_bytes()).unwrap();
        assert_eq!(back.records(), store.records());
    }

    #[test]
    fn import_ft_checks_ids() {
        let split = fixtures::split(&fixtures::schema(&["A"]), &["A", "NULL"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ft.jsonl");
        let mut store = EmbeddingStore::new(Regime::Ft, 4);
        store.push("i0000", vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        store.push("i0001", vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        store.save(&path).unwrap();
        assert_eq!(import_ft_vectors(&path, &split).unwrap().len(), 2);

        store.push("ghost", vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        store.save(&path).unwrap();
        match import_ft_vectors(&path, &split) {
            Err(EmbedError::UnknownId(id)) => assert_eq!(id, "ghost"),
            other => panic!("unexpected {other:?}"),
        }

        std::fs::write(
            &path,
            "{\"format\":\"rev1\",\"dim\":2,\"regime\":\"ft\"}\n{\"id\":\"i0000\",\"regime\":\"ft\",\"dim\":2,\"values\":[0.0,0.0]}\n",
        )
        .unwrap();
        assert!(matches!(
            import_ft_vectors(&path, &split),
            Err(EmbedError::ZeroVector(_))
        ));
    }

    #[test]
    fn header_meta_round_trips() {
        let mut store = EmbeddingStore::new(Regime::Sent, 1);
        store.set_meta("truncation", 128.into());
        store.push("x", vec![1.0]).unwrap();
        let mut out = Vec::new();
        store.write_to(&mut out).unwrap();
        let back = EmbeddingStore::read_from(&out[..]).unwrap();
        assert_eq!(back.meta()["truncation"], 128);
    }
}
