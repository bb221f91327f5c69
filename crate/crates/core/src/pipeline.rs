//! End-to-end runs: selection, optional reasoning, prompt assembly,
//! completion, parsing and scoring, plus strategy × k sweeps.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{stable_key, CacheError, FileCache};
use crate::corpus::{
    load_dataset, CorpusError, DatasetSplit, REInstance, RelationSchema, SplitName,
};
use crate::embed::{
    embed_split, import_ft_vectors, EmbedError, EmbedOptions, EmbeddingProvider, EmbeddingStore,
    HashProjectionProvider, HttpEmbeddingProvider, Regime,
};
use crate::eval::{
    filter_null_setting, score, EvalError, EvalReport, PredictionPair, PredictionSet, Setting,
};
use crate::llm::{
    parse_prediction, provider_for, LlmClient, LlmConfig, LlmError, ParseStatus, Prediction,
};
use crate::prompt::{
    assemble_prompt, induce_reasoning, render_instructions, render_test_block,
    CharHeuristicEstimator, DemoOrder, Demonstration, ExactCharEstimator, PromptError, PromptParts,
    PromptTemplates, ReasoningStats, TokenEstimator,
};
use crate::retrieve::{
    check_shot_count, select_knn, select_random_balanced, BalanceOptions, DemonstrationSet,
    KnnIndex, Provenance, RetrieveError, SelectedDemo, SelectionAudit, SelectionRequest, Strategy,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("test instance `{id}`: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("sweep grid is empty")]
    EmptyGrid,
}

impl PipelineError {
    /// True when the root cause is a provider failure rather than bad input.
    pub fn is_provider_failure(&self) -> bool {
        match self {
            PipelineError::Llm(LlmError::Provider { .. } | LlmError::EmptyResponse) => true,
            PipelineError::Prompt(PromptError::Llm(LlmError::Provider { .. })) => true,
            PipelineError::Embed(EmbedError::Provider { .. }) => true,
            PipelineError::Instance { source, .. } => source.is_provider_failure(),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    CharHeuristic,
    ExactChars,
}

impl EstimatorKind {
    pub fn build(self) -> Box<dyn TokenEstimator> {
        match self {
            EstimatorKind::CharHeuristic => Box::new(CharHeuristicEstimator),
            EstimatorKind::ExactChars => Box::new(ExactCharEstimator),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingProviderKind {
    /// Local hashed bag-of-words projection; no network.
    #[default]
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProviderKind,
    pub dim: usize,
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderKind::Hash,
            dim: 256,
            batch_size: 32,
            max_in_flight: 4,
        }
    }
}

impl EmbeddingConfig {
    pub fn provider(&self) -> Result<Box<dyn EmbeddingProvider>, EmbedError> {
        Ok(match self.provider {
            EmbeddingProviderKind::Hash => Box::new(HashProjectionProvider::new(self.dim)),
            EmbeddingProviderKind::Http => Box::new(HttpEmbeddingProvider::from_env(self.dim)?),
        })
    }

    pub fn options(&self) -> EmbedOptions {
        EmbedOptions {
            batch_size: self.batch_size,
            max_in_flight: self.max_in_flight,
        }
    }
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from(".reicl-cache")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

fn default_chunk_size() -> usize {
    64
}

/// One experiment run, usually read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset name; selects the recommended shot range.
    pub dataset: String,
    pub schema: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub strategy: Strategy,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub setting: Setting,
    #[serde(default)]
    pub reasoning: bool,
    #[serde(default)]
    pub llm: LlmConfig,
    /// Model used to write demonstration reasoning; defaults to `llm`.
    #[serde(default)]
    pub reasoning_llm: Option<LlmConfig>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    /// Vector files. Sentence and entity-prompt vectors are computed into
    /// these paths when missing; fine-tuned vectors must already exist.
    #[serde(default)]
    pub train_vectors: Option<PathBuf>,
    #[serde(default)]
    pub test_vectors: Option<PathBuf>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub demo_order: DemoOrder,
    #[serde(default)]
    pub balance: BalanceOptions,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Predictions are flushed to disk after every chunk.
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative input paths relative to `base` (the config file's
    /// directory).
    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.schema);
        fix(&mut self.train);
        fix(&mut self.test);
        for p in [
            &mut self.train_vectors,
            &mut self.test_vectors,
            &mut self.templates,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::Config("k must be positive".into()));
        }
        if self.chunk_size == 0 {
            return Err(PipelineError::Config("chunk_size must be positive".into()));
        }
        if self.strategy == Strategy::KnnFt
            && (self.train_vectors.is_none() || self.test_vectors.is_none())
        {
            return Err(PipelineError::Config(
                "knn_ft needs train_vectors and test_vectors".into(),
            ));
        }
        Ok(())
    }

    fn vector_path(&self, split: SplitName, regime: Regime) -> PathBuf {
        let explicit = match split {
            SplitName::Train => &self.train_vectors,
            _ => &self.test_vectors,
        };
        explicit.clone().unwrap_or_else(|| {
            self.cache_dir
                .join("vectors")
                .join(format!("{}-{split}-{regime}.jsonl", self.dataset))
        })
    }

    /// Hash over the fields that change predictions.
    fn fingerprint(&self, templates: &PromptTemplates) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_dir = PathBuf::new();
        c.chunk_size = 0;
        let config = serde_json::to_string(&c).expect("config serializes");
        stable_key([config.as_str(), templates.version.as_str()])
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub test_id: String,
    pub gold: String,
    pub pred: String,
    pub parse_status: ParseStatus,
    pub raw_completion: String,
    pub demos_requested: usize,
    pub demos_kept: usize,
    pub prompt_tokens_est: usize,
}

/// Reads predictions back as gold/pred pairs.
pub fn read_predictions(
    path: impl AsRef<Path>,
    schema: &RelationSchema,
) -> Result<PredictionSet, PipelineError> {
    let path = path.as_ref();
    let records = read_prediction_records(path)?;
    let by_name: HashMap<String, _> = schema
        .all_labels()
        .into_iter()
        .map(|l| (l.verbalize(), l))
        .collect();
    let lookup = |id: &str, name: &str| {
        by_name
            .get(name)
            .cloned()
            .ok_or_else(|| EvalError::UnknownLabel {
                test_id: id.to_string(),
                label: name.to_string(),
            })
    };
    let pairs = records
        .iter()
        .map(|r| {
            Ok(PredictionPair {
                test_id: r.test_id.clone(),
                gold: lookup(&r.test_id, &r.gold)?,
                pred: lookup(&r.test_id, &r.pred)?,
                parse_status: r.parse_status,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(PredictionSet::new(pairs)?)
}

pub fn read_prediction_records(path: &Path) -> Result<Vec<PredictionRecord>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

fn write_atomic(path: &Path, body: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, body).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut body = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut body, row).expect("rows serialize");
        body.push(b'\n');
    }
    write_atomic(path, &body)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut body = serde_json::to_vec_pretty(value).expect("value serializes");
    body.push(b'\n');
    write_atomic(path, &body)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config_fingerprint: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
    pub setting: Setting,
    pub reasoning: bool,
    pub template_version: String,
    pub estimator: String,
    pub provider: String,
    pub model_name: String,
    pub input_budget_tokens: usize,
    pub n_test: usize,
    pub n_predicted: usize,
    /// Fewest demonstrations that survived the budget in any prompt.
    pub min_demos_kept: Option<usize>,
    pub status: RunStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub resumed: usize,
    pub provider_calls: usize,
    pub reasoning: ReasoningStats,
    pub truncated_prompts: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub records: Vec<PredictionRecord>,
    pub manifest: RunManifest,
    pub stats: RunStats,
}

/// Loaded inputs and clients for one run.
pub struct RunContext {
    pub config: RunConfig,
    pub schema: RelationSchema,
    pub templates: PromptTemplates,
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub llm: LlmClient,
    pub reasoning_llm: Option<LlmClient>,
    pub reasoning_cache: FileCache,
    index: Option<KnnIndex>,
    test_vectors: Option<EmbeddingStore>,
    instructions: String,
}

impl RunContext {
    /// Loads data and vectors and builds clients from `config`.
    pub fn prepare(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let schema = RelationSchema::load(&config.schema)?;
        let templates = match &config.templates {
            Some(path) => PromptTemplates::load(path)?,
            None => PromptTemplates::default(),
        };
        let mut train = load_dataset(&config.train, SplitName::Train, &schema)?;
        let mut test = load_dataset(&config.test, SplitName::Test, &schema)?;
        if config.setting == Setting::WithoutNull {
            train = filter_null_setting(&train)?;
            test = filter_null_setting(&test)?;
        }
        let llm = build_client(&config.llm, &config, &templates, &schema)?;
        let reasoning_llm = if config.reasoning {
            let rc = config.reasoning_llm.as_ref().unwrap_or(&config.llm);
            Some(build_client(rc, &config, &templates, &schema)?)
        } else {
            None
        };
        let reasoning_cache = FileCache::open(config.cache_dir.join("reasoning"))?;
        let mut ctx = Self::from_parts(config, schema, templates, train, test, llm)?;
        ctx.reasoning_llm = reasoning_llm;
        ctx.reasoning_cache = reasoning_cache;
        Ok(ctx)
    }

    /// Builds a context from already-loaded inputs. kNN strategies read or
    /// compute vectors according to `config`.
    pub fn from_parts(
        config: RunConfig,
        schema: RelationSchema,
        templates: PromptTemplates,
        train: DatasetSplit,
        test: DatasetSplit,
        llm: LlmClient,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        check_shot_count(&config.dataset, config.k);
        let (index, test_vectors) = match config.strategy.regime() {
            None => (None, None),
            Some(regime) => {
                let (train_store, test_store) =
                    load_vectors(&config, regime, &train, &test, &templates)?;
                let index = KnnIndex::build_filtered(&train_store, |id| train.get(id).is_some())?;
                (Some(index), Some(test_store))
            }
        };
        let instructions = render_instructions(&schema, &templates)?;
        let reasoning_cache = FileCache::open(config.cache_dir.join("reasoning"))?;
        Ok(Self {
            config,
            schema,
            templates,
            train,
            test,
            llm,
            reasoning_llm: None,
            reasoning_cache,
            index,
            test_vectors,
            instructions,
        })
    }

    pub fn with_reasoning_llm(mut self, llm: LlmClient) -> Self {
        self.reasoning_llm = Some(llm);
        self
    }

    /// Generates and caches reasoning for the first `limit` training
    /// instances (all when `None`). Later runs then hit the cache for any
    /// of them selected as a demonstration.
    pub fn warm_reasoning(&self, limit: Option<usize>) -> Result<ReasoningStats, PipelineError> {
        let llm = self
            .reasoning_llm
            .as_ref()
            .ok_or_else(|| PipelineError::Config("reasoning is disabled".into()))?;
        let n = limit.unwrap_or(usize::MAX).min(self.train.len());
        let set = DemonstrationSet {
            items: self.train.instances()[..n]
                .iter()
                .map(|inst| SelectedDemo {
                    demo: Demonstration::from_instance(inst.clone()),
                    provenance: Provenance::Random,
                })
                .collect(),
        };
        let (_, stats) = induce_reasoning(&set, llm, &self.reasoning_cache, &self.templates)?;
        Ok(stats)
    }

    fn predict_one(
        &self,
        inst: &REInstance,
    ) -> Result<(PredictionRecord, SelectionAudit, ReasoningStats), PipelineError> {
        let c = &self.config;
        let request = SelectionRequest {
            test_instance: inst,
            k: c.k,
            strategy: c.strategy,
            seed: instance_seed(c.seed, &inst.id),
        };
        let demos = match &self.index {
            None => select_random_balanced(&self.train, &request, c.balance)?,
            Some(index) => {
                let vector = self
                    .test_vectors
                    .as_ref()
                    .and_then(|s| s.get(&inst.id))
                    .map(|r| r.values.as_slice());
                select_knn(&self.train, index, &request, vector)?
            }
        };
        let audit = SelectionAudit::new(&inst.id, c.strategy, c.k, &demos);
        let (demos, stats) = match (&self.reasoning_llm, c.reasoning) {
            (Some(rllm), true) => {
                induce_reasoning(&demos, rllm, &self.reasoning_cache, &self.templates)?
            }
            _ => (demos, ReasoningStats::default()),
        };
        let parts = PromptParts {
            instructions: self.instructions.clone(),
            demonstrations: demos,
            test_text: render_test_block(inst, &self.templates),
            budget_tokens: self.llm.config().input_budget_tokens,
        };
        let prompt = assemble_prompt(&parts, self.llm.estimator(), &self.templates, c.demo_order)?;
        let completion = self.llm.complete(&prompt.text)?;
        let Prediction {
            label,
            raw_completion,
            parse_status,
            ..
        } = parse_prediction(&inst.id, &completion, &self.schema);
        Ok((
            PredictionRecord {
                test_id: inst.id.clone(),
                gold: inst.gold_label.verbalize(),
                pred: label.verbalize(),
                parse_status,
                raw_completion,
                demos_requested: parts.demonstrations.len(),
                demos_kept: prompt.kept,
                prompt_tokens_est: prompt.estimate,
            },
            audit,
            stats,
        ))
    }

    /// Runs every test instance, resuming from predictions already on disk
    /// for an identical configuration, and writes the run directory.
    pub fn run(&self) -> Result<RunOutcome, PipelineError> {
        let c = &self.config;
        let out = &c.output_dir;
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        let fingerprint = c.fingerprint(&self.templates);
        let pred_path = out.join("predictions.jsonl");
        let audit_path = out.join("selections.jsonl");

        let mut done: HashMap<String, (PredictionRecord, Option<SelectionAudit>)> = HashMap::new();
        if let Some(prev) = read_manifest(out) {
            if prev.config_fingerprint == fingerprint && pred_path.exists() {
                let audits: HashMap<String, SelectionAudit> = read_audits(&audit_path)
                    .into_iter()
                    .map(|a| (a.test_id.clone(), a))
                    .collect();
                for r in read_prediction_records(&pred_path)? {
                    if self.test.get(&r.test_id).is_some() {
                        let a = audits.get(&r.test_id).cloned();
                        done.insert(r.test_id.clone(), (r, a));
                    }
                }
            }
        }
        let mut stats = RunStats {
            resumed: done.len(),
            ..RunStats::default()
        };
        if stats.resumed > 0 {
            tracing::info!(resumed = stats.resumed, "resuming run");
        }

        let pending: Vec<&REInstance> = self
            .test
            .instances()
            .iter()
            .filter(|i| !done.contains_key(&i.id))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.llm.config().max_in_flight.max(1))
            .build()
            .expect("thread pool");
        let mut failure = None;
        for chunk in pending.chunks(c.chunk_size) {
            let results: Vec<_> = pool.install(|| {
                use rayon::prelude::*;
                chunk
                    .par_iter()
                    .map(|inst| {
                        self.predict_one(inst).map_err(|e| PipelineError::Instance {
                            id: inst.id.clone(),
                            source: Box::new(e),
                        })
                    })
                    .collect()
            });
            for result in results {
                match result {
                    Ok((record, audit, rstats)) => {
                        stats.reasoning.cache_hits += rstats.cache_hits;
                        stats.reasoning.generated += rstats.generated;
                        stats.reasoning.empty += rstats.empty;
                        done.insert(record.test_id.clone(), (record, Some(audit)));
                    }
                    Err(e) if failure.is_none() => failure = Some(e),
                    Err(_) => {}
                }
            }
            self.flush(&pred_path, &audit_path, &done)?;
            if failure.is_some() {
                break;
            }
        }
        self.flush(&pred_path, &audit_path, &done)?;

        let records: Vec<PredictionRecord> = self
            .test
            .instances()
            .iter()
            .filter_map(|i| done.get(&i.id).map(|(r, _)| r.clone()))
            .collect();
        stats.provider_calls = self.llm.provider_calls();
        stats.truncated_prompts = records
            .iter()
            .filter(|r| r.demos_kept < r.demos_requested)
            .count();
        let mut manifest = RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_fingerprint: fingerprint,
            dataset: c.dataset.clone(),
            strategy: c.strategy,
            k: c.k,
            seed: c.seed,
            setting: c.setting,
            reasoning: c.reasoning,
            template_version: self.templates.version.clone(),
            estimator: self.llm.estimator().name().to_string(),
            provider: self.llm.provider_name().to_string(),
            model_name: self.llm.config().model_name.clone(),
            input_budget_tokens: self.llm.config().input_budget_tokens,
            n_test: self.test.len(),
            n_predicted: records.len(),
            min_demos_kept: records.iter().map(|r| r.demos_kept).min(),
            status: RunStatus::Complete,
            error: None,
        };
        if let Some(e) = failure {
            manifest.status = if records.is_empty() {
                RunStatus::Failed
            } else {
                RunStatus::Partial
            };
            manifest.error = Some(e.to_string());
            write_json(&out.join("manifest.json"), &manifest)?;
            return Err(e);
        }

        let pairs = records
            .iter()
            .map(|r| {
                let inst = self
                    .test
                    .get(&r.test_id)
                    .expect("record ids come from the split");
                let pred = parse_prediction(&r.test_id, &r.raw_completion, &self.schema);
                PredictionPair {
                    test_id: r.test_id.clone(),
                    gold: inst.gold_label.clone(),
                    pred: pred.label,
                    parse_status: pred.parse_status,
                }
            })
            .collect();
        let report = score(&PredictionSet::new(pairs)?, &self.schema, c.setting)?;
        write_report(out, &report)?;
        write_json(&out.join("manifest.json"), &manifest)?;
        tracing::info!(
            f1 = report.micro.f1,
            n = records.len(),
            calls = stats.provider_calls,
            "run complete"
        );
        Ok(RunOutcome {
            report,
            records,
            manifest,
            stats,
        })
    }

    fn flush(
        &self,
        pred_path: &Path,
        audit_path: &Path,
        done: &HashMap<String, (PredictionRecord, Option<SelectionAudit>)>,
    ) -> Result<(), PipelineError> {
        let mut records = Vec::with_capacity(done.len());
        let mut audits = Vec::with_capacity(done.len());
        for inst in self.test.instances() {
            if let Some((r, a)) = done.get(&inst.id) {
                records.push(r);
                audits.extend(a);
            }
        }
        write_jsonl(pred_path, &records)?;
        write_jsonl(audit_path, &audits)
    }
}

fn build_client(
    llm: &LlmConfig,
    config: &RunConfig,
    templates: &PromptTemplates,
    schema: &RelationSchema,
) -> Result<LlmClient, PipelineError> {
    let provider = provider_for(llm, templates, schema)?;
    Ok(LlmClient::new(llm.clone(), provider)
        .with_cache(FileCache::open(config.cache_dir.join("completions"))?)
        .with_estimator(config.estimator.build()))
}

fn load_vectors(
    config: &RunConfig,
    regime: Regime,
    train: &DatasetSplit,
    test: &DatasetSplit,
    templates: &PromptTemplates,
) -> Result<(EmbeddingStore, EmbeddingStore), PipelineError> {
    let train_path = config.vector_path(SplitName::Train, regime);
    let test_path = config.vector_path(SplitName::Test, regime);
    if regime == Regime::Ft {
        return Ok((
            import_ft_vectors(&train_path, train)?,
            import_ft_vectors(&test_path, test)?,
        ));
    }
    for p in [&train_path, &test_path] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let provider = config.embedding.provider()?;
    let options = config.embedding.options();
    Ok((
        embed_split(
            train,
            provider.as_ref(),
            regime,
            &train_path,
            templates,
            &options,
        )?,
        embed_split(
            test,
            provider.as_ref(),
            regime,
            &test_path,
            templates,
            &options,
        )?,
    ))
}

/// Per-instance selection seed, so random selection differs across test
/// instances but is fixed for a given run seed.
pub fn instance_seed(seed: u64, test_id: &str) -> u64 {
    let key = stable_key([seed.to_le_bytes().as_slice(), test_id.as_bytes()]);
    u64::from_str_radix(&key[..16], 16).expect("hex digest")
}

fn read_manifest(dir: &Path) -> Option<RunManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn read_audits(path: &Path) -> Vec<SelectionAudit> {
    std::fs::read_to_string(path)
        .map(|t| {
            t.lines()
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect()
        })
        .unwrap_or_default()
}

/// Writes `report.json`, `report.txt`, `confusion.csv` and
/// `confusion_long.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), PipelineError> {
    write_json(&dir.join("report.json"), report)?;
    write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())?;
    let m = report.confusion_matrix();
    write_atomic(&dir.join("confusion.csv"), m.to_csv().as_bytes())?;
    write_atomic(
        &dir.join("confusion_long.csv"),
        m.to_heatmap_csv().as_bytes(),
    )
}

/// Loads everything from `config` and runs it.
pub fn cmd_run(config: RunConfig) -> Result<RunOutcome, PipelineError> {
    RunContext::prepare(config)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub strategies: Vec<Strategy>,
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub k: usize,
    pub micro_f1: Option<f64>,
    pub error: Option<String>,
}

/// Runs every (strategy, k) cell into `<output_dir>/<strategy>-k<k>`. A
/// failing cell is recorded and the sweep continues. Writes `curve.csv`
/// with the successful cells and `sweep.json` with all of them.
pub fn cmd_sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>, PipelineError> {
    if grid.strategies.is_empty() || grid.ks.is_empty() {
        return Err(PipelineError::EmptyGrid);
    }
    let root = &base.output_dir;
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    let mut cells = Vec::new();
    for &strategy in &grid.strategies {
        for &k in &grid.ks {
            let mut config = base.clone();
            config.strategy = strategy;
            config.k = k;
            config.output_dir = root.join(format!("{}-k{k}", strategy.as_str()));
            let cell = match cmd_run(config) {
                Ok(outcome) => SweepCell {
                    strategy,
                    k,
                    micro_f1: Some(outcome.report.micro.f1),
                    error: None,
                },
                Err(e) => {
                    tracing::warn!(%strategy, k, error = %e, "sweep cell failed");
                    SweepCell {
                        strategy,
                        k,
                        micro_f1: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    let mut curve = String::from("strategy,k,micro_f1\n");
    for c in &cells {
        if let Some(f1) = c.micro_f1 {
            curve.push_str(&format!("{},{},{f1:.6}\n", c.strategy.as_str(), c.k));
        }
    }
    write_atomic(&root.join("curve.csv"), curve.as_bytes())?;
    write_json(&root.join("sweep.json"), &cells)?;
    Ok(cells)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}
