//! Prompt rendering under a token budget, and gold-label-induced reasoning
//! for demonstrations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{now_rfc3339, stable_key, CacheEntry, CacheError, FileCache};
use crate::corpus::{REInstance, RelationLabel, RelationSchema};
use crate::llm::{LlmClient, LlmError};
use crate::retrieve::DemonstrationSet;

const DEFAULT_TEMPLATES: &str = include_str!("../templates/prompt_v1.toml");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("schema has no relation labels")]
    EmptySchema,
    #[error(
        "prompt budget of {budget} tokens cannot hold instructions and test input ({needed} tokens)"
    )]
    BudgetInfeasible { needed: usize, budget: usize },
    #[error("invalid template file: {0}")]
    Template(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// A demonstration: an instance, its label and optional reasoning text.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub instance: REInstance,
    pub label: RelationLabel,
    pub reasoning: Option<String>,
}

impl Demonstration {
    pub fn from_instance(instance: REInstance) -> Self {
        let label = instance.gold_label.clone();
        Self {
            instance,
            label,
            reasoning: None,
        }
    }
}

/// Versioned prompt templates. Placeholders are `{name}`; `{{` and `}}`
/// produce literal braces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub version: String,
    pub instructions: String,
    pub context_line: String,
    pub relation_line: String,
    pub reasoning_line: String,
    pub entity_prompt: String,
    pub reasoning_query: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

/// Substitutes `{name}` placeholders in one left-to-right pass, so values
/// containing braces are never re-expanded.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(end) = tail.find('}') {
                let name = &tail[1..end];
                if let Some((_, value)) = vars.iter().find(|(k, _)| *k == name) {
                    out.push_str(value);
                    rest = &tail[end + 1..];
                    continue;
                }
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn placeholders(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            rest = after;
            continue;
        }
        match tail.find('}') {
            Some(end) => {
                names.push(tail[1..end].to_string());
                rest = &tail[end + 1..];
            }
            None => break,
        }
    }
    names
}

/// Literal text before the first placeholder.
fn static_prefix(template: &str) -> &str {
    template.split('{').next().unwrap_or("")
}

/// Literal text after the last placeholder.
fn static_suffix(template: &str) -> &str {
    template.rsplit('}').next().unwrap_or("")
}

impl PromptTemplates {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let t: PromptTemplates =
            toml::from_str(text).map_err(|e| PromptError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PromptError::Template(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let checks: [(&str, &str, &[&str]); 6] = [
            ("instructions", &self.instructions, &["labels", "null"]),
            ("context_line", &self.context_line, &["context"]),
            ("relation_line", &self.relation_line, &["subject", "object"]),
            ("reasoning_line", &self.reasoning_line, &["reasoning"]),
            (
                "entity_prompt",
                &self.entity_prompt,
                &["subject", "object", "context"],
            ),
            (
                "reasoning_query",
                &self.reasoning_query,
                &["subject", "object", "relation", "context"],
            ),
        ];
        for (field, template, allowed) in checks {
            let found = placeholders(template);
            for name in &found {
                if !allowed.contains(&name.as_str()) {
                    return Err(PromptError::Template(format!(
                        "{field}: unknown placeholder {{{name}}}"
                    )));
                }
            }
            if field != "instructions" && field != "reasoning_query" {
                for name in allowed {
                    if !found.iter().any(|f| f == name) {
                        return Err(PromptError::Template(format!(
                            "{field}: missing placeholder {{{name}}}"
                        )));
                    }
                }
            }
        }
        if self.relation_line.contains('\n') || self.context_line.contains('\n') {
            return Err(PromptError::Template(
                "context_line and relation_line must be single lines".into(),
            ));
        }
        if static_prefix(&self.relation_line).trim().is_empty()
            || static_prefix(&self.context_line).trim().is_empty()
        {
            return Err(PromptError::Template(
                "context_line and relation_line need a literal prefix".into(),
            ));
        }
        Ok(())
    }

    pub fn entity_prompt(&self, instance: &REInstance) -> String {
        fill(
            &self.entity_prompt,
            &[
                ("subject", &instance.subject.text),
                ("object", &instance.object.text),
                ("context", &instance.sentence()),
            ],
        )
    }

    /// The cue that ends the test block and precedes a label.
    pub fn relation_cue(&self, instance: &REInstance) -> String {
        fill(
            &self.relation_line,
            &[
                ("subject", &instance.subject.text),
                ("object", &instance.object.text),
            ],
        )
    }

    /// Strings that delimit prompt sections; reasoning text must not contain
    /// them.
    pub fn delimiters(&self) -> Vec<String> {
        let mut out: Vec<String> = [
            &self.context_line,
            &self.relation_line,
            &self.reasoning_line,
        ]
        .iter()
        .map(|t| static_prefix(t).trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
        out.dedup();
        out
    }

    /// Extracts the label from a rendered demonstration label line.
    pub fn parse_label_line<'a>(&self, line: &'a str) -> Option<&'a str> {
        let prefix = static_prefix(&self.relation_line);
        let tail = format!("{} ", static_suffix(&self.relation_line));
        if !line.starts_with(prefix) || !line.ends_with('.') {
            return None;
        }
        let at = line.rfind(&tail)?;
        let start = at + tail.len();
        let end = line.len() - 1;
        (start <= end).then(|| &line[start..end])
    }

    /// Whether `line` is a bare relation cue (a test block ending).
    pub fn is_cue_line(&self, line: &str) -> bool {
        line.starts_with(static_prefix(&self.relation_line))
            && line.ends_with(static_suffix(&self.relation_line))
    }
}

/// Task description listing every relation (with directions) and the NULL
/// fallback.
pub fn render_instructions(
    schema: &RelationSchema,
    templates: &PromptTemplates,
) -> Result<String, PromptError> {
    let labels = schema.relation_labels();
    if labels.is_empty() {
        return Err(PromptError::EmptySchema);
    }
    let list = labels
        .iter()
        .map(RelationLabel::verbalize)
        .collect::<Vec<_>>()
        .join(", ");
    Ok(fill(
        &templates.instructions,
        &[("labels", &list), ("null", schema.null_name())],
    ))
}

pub fn render_demonstration(demo: &Demonstration, templates: &PromptTemplates) -> String {
    let mut out = fill(
        &templates.context_line,
        &[("context", &demo.instance.sentence())],
    );
    out.push('\n');
    out.push_str(&templates.relation_cue(&demo.instance));
    out.push(' ');
    out.push_str(&demo.label.verbalize());
    out.push('.');
    if let Some(reasoning) = &demo.reasoning {
        out.push('\n');
        out.push_str(&fill(
            &templates.reasoning_line,
            &[("reasoning", reasoning)],
        ));
    }
    out
}

pub fn render_test_block(instance: &REInstance, templates: &PromptTemplates) -> String {
    let mut out = fill(
        &templates.context_line,
        &[("context", &instance.sentence())],
    );
    out.push('\n');
    out.push_str(&templates.relation_cue(instance));
    out
}

/// Query asking the model to explain why `label` holds for `instance`.
/// For NULL the sentinel itself fills the relation slot.
pub fn reasoning_query(
    instance: &REInstance,
    label: &RelationLabel,
    templates: &PromptTemplates,
) -> String {
    fill(
        &templates.reasoning_query,
        &[
            ("subject", &instance.subject.text),
            ("object", &instance.object.text),
            ("relation", &label.verbalize()),
            ("context", &instance.sentence()),
        ],
    )
}

/// Removes section delimiters and collapses whitespace so generated text
/// stays on one line inside its demonstration.
pub fn sanitize_reasoning(text: &str, templates: &PromptTemplates) -> String {
    let mut s = text.to_string();
    for delim in templates.delimiters() {
        while s.contains(&delim) {
            s = s.replace(&delim, " ");
        }
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token count estimate. Must be monotone under concatenation.
pub trait TokenEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(ceil(chars / 4) * 1.10)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharHeuristicEstimator;

impl TokenEstimator for CharHeuristicEstimator {
    fn name(&self) -> &str {
        "chars/4*1.10"
    }

    fn estimate(&self, text: &str) -> usize {
        let base = text.chars().count().div_ceil(4);
        (base * 11).div_ceil(10)
    }
}

/// One token per character.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactCharEstimator;

impl TokenEstimator for ExactCharEstimator {
    fn name(&self) -> &str {
        "chars"
    }

    fn estimate(&self, text: &str) -> usize {
        text.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Ascending similarity: the most similar demonstration sits directly
    /// above the test block.
    #[default]
    NearestLast,
    NearestFirst,
}

#[derive(Debug, Clone)]
pub struct PromptParts {
    pub instructions: String,
    pub demonstrations: DemonstrationSet,
    pub test_text: String,
    pub budget_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub text: String,
    /// Demonstrations kept; these are the first `kept` items of the set.
    pub kept: usize,
    pub estimate: usize,
}

const SECTION_BREAK: &str = "\n\n";

fn join_prompt(instructions: &str, blocks: &[String], test_text: &str) -> String {
    let mut out = String::from(instructions);
    for block in blocks {
        out.push_str(SECTION_BREAK);
        out.push_str(block);
    }
    out.push_str(SECTION_BREAK);
    out.push_str(test_text);
    out
}

/// Renders instructions, demonstrations and the test block, dropping the
/// lowest-priority demonstrations until the estimate fits the budget.
pub fn assemble_prompt(
    parts: &PromptParts,
    estimator: &dyn TokenEstimator,
    templates: &PromptTemplates,
    order: DemoOrder,
) -> Result<AssembledPrompt, PromptError> {
    let rendered: Vec<String> = parts
        .demonstrations
        .demos()
        .map(|d| render_demonstration(d, templates))
        .collect();
    for kept in (0..=rendered.len()).rev() {
        let mut blocks = rendered[..kept].to_vec();
        if order == DemoOrder::NearestLast {
            blocks.reverse();
        }
        let text = join_prompt(&parts.instructions, &blocks, &parts.test_text);
        let estimate = estimator.estimate(&text);
        if estimate <= parts.budget_tokens {
            if kept < rendered.len() {
                tracing::debug!(
                    kept,
                    requested = rendered.len(),
                    "dropped demonstrations to fit budget"
                );
            }
            return Ok(AssembledPrompt {
                text,
                kept,
                estimate,
            });
        }
        if kept == 0 {
            return Err(PromptError::BudgetInfeasible {
                needed: estimate,
                budget: parts.budget_tokens,
            });
        }
    }
    unreachable!("loop returns at kept == 0")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReasoningStats {
    pub cache_hits: usize,
    pub generated: usize,
    pub empty: usize,
}

/// Cache key for one demonstration's reasoning.
pub fn reasoning_key(
    templates: &PromptTemplates,
    instance_id: &str,
    label: &RelationLabel,
    provider: &str,
) -> String {
    stable_key([
        templates.version.as_str(),
        instance_id,
        label.verbalize().as_str(),
        provider,
    ])
}

/// Attaches generated reasoning to every demonstration. Only the `reasoning`
/// field changes; an empty completion leaves the demonstration unenriched.
pub fn induce_reasoning(
    demos: &DemonstrationSet,
    llm: &LlmClient,
    cache: &FileCache,
    templates: &PromptTemplates,
) -> Result<(DemonstrationSet, ReasoningStats), PromptError> {
    let mut stats = ReasoningStats::default();
    let mut out = demos.clone();
    for item in &mut out.items {
        let demo = &mut item.demo;
        let key = reasoning_key(
            templates,
            &demo.instance.id,
            &demo.label,
            llm.provider_name(),
        );
        let lock = cache.key_lock(&key);
        let _guard = lock.lock();
        let completion = match cache.get(&key)? {
            Some(entry) => {
                stats.cache_hits += 1;
                entry.completion
            }
            None => {
                let query = reasoning_query(&demo.instance, &demo.label, templates);
                let completion = match llm.complete(&query) {
                    Ok(text) => text,
                    Err(LlmError::EmptyResponse) => String::new(),
                    Err(e) => return Err(e.into()),
                };
                let completion = completion.trim().to_string();
                if !completion.is_empty() {
                    cache.put(&CacheEntry {
                        key,
                        query,
                        completion: completion.clone(),
                        provider: llm.provider_name().to_string(),
                        created_at: now_rfc3339(),
                    })?;
                    stats.generated += 1;
                }
                completion
            }
        };
        let reasoning = sanitize_reasoning(&completion, templates);
        if reasoning.is_empty() {
            tracing::warn!(id = %demo.instance.id, "empty reasoning; demonstration left unenriched");
            stats.empty += 1;
            demo.reasoning = None;
        } else {
            demo.reasoning = Some(reasoning);
        }
    }
    Ok((out, stats))
}
