//! Builds a `RunConfig` from an optional TOML file plus command-line
//! overrides. File paths are relative to the file; flag paths to the
//! working directory.

use std::path::{Path, PathBuf};

use clap::Args;
use reicl_core::pipeline::RunConfig;
use toml::{Table, Value};

use crate::CliError;

const STRATEGIES: [&str; 4] = ["random_balanced", "knn_sent", "knn_entprompt", "knn_ft"];

#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Dataset name (selects the usual shot range for warnings)
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_parser = STRATEGIES)]
    pub strategy: Option<String>,
    /// Demonstrations per prompt
    #[arg(short, long)]
    pub k: Option<i64>,
    #[arg(long, value_parser = ["with_null", "without_null"])]
    pub setting: Option<String>,
    /// Add generated reasoning to every demonstration
    #[arg(long)]
    pub reasoning: bool,
    #[arg(long, value_parser = ["nearest_last", "nearest_first"])]
    pub demo_order: Option<String>,
    #[arg(long, value_parser = ["char_heuristic", "exact_chars"])]
    pub estimator: Option<String>,
    #[arg(long)]
    pub train_vectors: Option<PathBuf>,
    #[arg(long)]
    pub test_vectors: Option<PathBuf>,
    /// Prompt template file (TOML)
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, value_parser = ["hash", "http"])]
    pub embedding_provider: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<i64>,
    /// Leave NULL out of the label-balanced round-robin
    #[arg(long)]
    pub balance_without_null: bool,
    #[arg(long)]
    pub chunk_size: Option<i64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct LlmFlags {
    #[arg(long, value_parser = ["mock_oracle", "mock_echo", "http"])]
    pub provider: Option<String>,
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_output_tokens: Option<i64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub frequency_penalty: Option<f64>,
    #[arg(long)]
    pub presence_penalty: Option<f64>,
    #[arg(long)]
    pub input_budget_tokens: Option<i64>,
    /// 0 disables rate limiting
    #[arg(long)]
    pub requests_per_minute: Option<i64>,
    #[arg(long)]
    pub max_in_flight: Option<i64>,
    #[arg(long)]
    pub max_retries: Option<i64>,
}

pub struct Globals<'a> {
    pub config: Option<&'a Path>,
    pub cache_dir: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
}

const INPUT_PATHS: [&str; 6] = [
    "schema",
    "train",
    "test",
    "train_vectors",
    "test_vectors",
    "templates",
];

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn set(table: &mut Table, key: &str, value: Option<Value>) {
    if let Some(v) = value {
        table.insert(key.to_string(), v);
    }
}

fn sub<'t>(table: &'t mut Table, key: &str) -> Result<&'t mut Table, CliError> {
    table
        .entry(key.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| CliError::Usage(format!("config key `{key}` must be a table")))
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for key in INPUT_PATHS {
        if let Some(Value::String(s)) = table.get(key) {
            let p = Path::new(s);
            if p.is_relative() {
                let joined = base.join(p);
                table.insert(key.into(), path_value(&joined));
            }
        }
    }
    Ok(table)
}

pub fn build(g: &Globals<'_>, run: &RunFlags, llm: &LlmFlags) -> Result<RunConfig, CliError> {
    let mut t = match g.config {
        Some(path) => read_table(path)?,
        None => Table::new(),
    };
    let s = |v: &Option<String>| v.clone().map(Value::String);
    let p = |v: &Option<PathBuf>| v.as_deref().map(path_value);
    let i = |v: Option<i64>| v.map(Value::Integer);
    set(&mut t, "cache_dir", g.cache_dir.map(path_value));
    set(&mut t, "output_dir", g.out.map(path_value));
    if let Some(seed) = g.seed {
        let seed =
            i64::try_from(seed).map_err(|_| CliError::Usage("seed must fit in i64".into()))?;
        t.insert("seed".into(), Value::Integer(seed));
    }
    set(&mut t, "dataset", s(&run.dataset));
    set(&mut t, "schema", p(&run.schema));
    set(&mut t, "train", p(&run.train));
    set(&mut t, "test", p(&run.test));
    set(&mut t, "strategy", s(&run.strategy));
    set(&mut t, "k", i(run.k));
    set(&mut t, "setting", s(&run.setting));
    if run.reasoning {
        t.insert("reasoning".into(), Value::Boolean(true));
    }
    set(&mut t, "demo_order", s(&run.demo_order));
    set(&mut t, "estimator", s(&run.estimator));
    set(&mut t, "train_vectors", p(&run.train_vectors));
    set(&mut t, "test_vectors", p(&run.test_vectors));
    set(&mut t, "templates", p(&run.templates));
    set(&mut t, "chunk_size", i(run.chunk_size));
    if run.balance_without_null {
        sub(&mut t, "balance")?.insert("include_null".into(), Value::Boolean(false));
    }
    if run.embedding_provider.is_some() || run.embedding_dim.is_some() {
        let e = sub(&mut t, "embedding")?;
        set(e, "provider", s(&run.embedding_provider));
        set(e, "dim", i(run.embedding_dim));
    }
    let l = sub(&mut t, "llm")?;
    set(l, "provider", s(&llm.provider));
    set(l, "model_name", s(&llm.model_name));
    set(l, "temperature", llm.temperature.map(Value::Float));
    set(l, "max_output_tokens", i(llm.max_output_tokens));
    set(l, "top_p", llm.top_p.map(Value::Float));
    set(
        l,
        "frequency_penalty",
        llm.frequency_penalty.map(Value::Float),
    );
    set(
        l,
        "presence_penalty",
        llm.presence_penalty.map(Value::Float),
    );
    set(l, "input_budget_tokens", i(llm.input_budget_tokens));
    set(l, "requests_per_minute", i(llm.requests_per_minute));
    set(l, "max_in_flight", i(llm.max_in_flight));
    set(l, "max_retries", i(llm.max_retries));
    let config: RunConfig = Value::Table(t).try_into().map_err(|e: toml::de::Error| {
        CliError::Usage(format!("run configuration: {}", e.message()))
    })?;
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(
            &cfg,
            "dataset = \"semeval\"\nschema = \"s.json\"\ntrain = \"/abs/train.jsonl\"\ntest = \"test.jsonl\"\nstrategy = \"knn_sent\"\nk = 5\n[llm]\nmodel_name = \"m\"\n",
        )
        .unwrap();
        let g = Globals {
            config: Some(&cfg),
            cache_dir: Some(Path::new("c")),
            out: None,
            seed: Some(9),
        };
        let run = RunFlags {
            k: Some(12),
            ..RunFlags::default()
        };
        let llm = LlmFlags {
            temperature: Some(0.5),
            ..LlmFlags::default()
        };
        let c = build(&g, &run, &llm).unwrap();
        assert_eq!(c.k, 12);
        assert_eq!(c.seed, 9);
        assert_eq!(c.schema, dir.path().join("s.json"));
        assert_eq!(c.train, PathBuf::from("/abs/train.jsonl"));
        assert_eq!(c.cache_dir, PathBuf::from("c"));
        assert_eq!(c.llm.model_name, "m");
        assert_eq!(c.llm.temperature, 0.5);
    }

    #[test]
    fn missing_required_fields_are_usage_errors() {
        let g = Globals {
            config: None,
            cache_dir: None,
            out: None,
            seed: None,
        };
        let err = build(&g, &RunFlags::default(), &LlmFlags::default()).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }
}
