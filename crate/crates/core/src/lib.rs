//! Relation extraction by in-context learning: task-aware demonstration
//! retrieval, gold-label-induced reasoning, budgeted prompt assembly and
//! NULL-aware scoring.

pub mod cache;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod llm;
pub mod markers;
pub mod pipeline;
pub mod prompt;
pub mod retrieve;

pub use corpus::{
    load_dataset, sample_stratified_subset, DatasetSplit, Direction, EntityMention, REInstance,
    RelationLabel, RelationSchema, Role, SplitName,
};
pub use embed::{EmbeddingProvider, EmbeddingRecord, EmbeddingStore, Regime};
pub use eval::{score, EvalReport, PredictionPair, PredictionSet, Setting};
pub use llm::{LlmClient, LlmConfig, LlmProvider, ParseStatus, Prediction, ProviderKind};
pub use markers::{mark_entities, MarkedSequence};
pub use pipeline::{cmd_run, cmd_sweep, RunConfig, RunOutcome, SweepGrid};
pub use prompt::{
    assemble_prompt, AssembledPrompt, DemoOrder, Demonstration, PromptParts, PromptTemplates,
    TokenEstimator,
};
pub use retrieve::{DemonstrationSet, KnnIndex, Neighbor, SelectionRequest, Strategy};
