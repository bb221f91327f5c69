//! Relation extraction instances, the relation schema, JSONL ingestion and
//! stratified test-subset sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_NULL_NAME: &str = "NULL";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: {role} span [{start}, {end}) out of bounds for {len} tokens")]
    SpanOutOfBounds {
        line: usize,
        role: Role,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("line {line}: {role} text `{text}` does not match tokens `{expected}`")]
    TextMismatch {
        line: usize,
        role: Role,
        text: String,
        expected: String,
    },
    #[error("line {line}: subject and object spans overlap")]
    OverlappingSpans { line: usize },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {message}")]
    Direction { line: usize, message: String },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid subset size {n} for split of {available} instances")]
    SubsetSize { n: usize, available: usize },
    #[error("split `{0}` is empty after filtering")]
    EmptyAfterFilter(SplitName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Object,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Subject => f.write_str("subject"),
            Role::Object => f.write_str("object"),
        }
    }
}

/// A gold entity mention. The span is half-open and 0-based over the owning
/// instance's tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub entity_type: Option<String>,
    pub role: Role,
}

impl EntityMention {
    fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "sub_obj")]
    SubObj,
    #[serde(rename = "obj_sub")]
    ObjSub,
}

/// A relation label. Direction is only set for direction-bearing schemas.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationLabel {
    pub name: String,
    pub is_null: bool,
    pub direction: Option<Direction>,
}

impl RelationLabel {
    pub fn new(name: impl Into<String>, direction: Option<Direction>) -> Self {
        Self {
            name: name.into(),
            is_null: false,
            direction,
        }
    }

    pub fn null(null_name: impl Into<String>) -> Self {
        Self {
            name: null_name.into(),
            is_null: true,
            direction: None,
        }
    }

    /// Surface form used in prompts, predictions and reports. Directional
    /// labels carry an `(e1,e2)` or `(e2,e1)` suffix, with e1 the subject.
    pub fn verbalize(&self) -> String {
        match self.direction {
            Some(Direction::SubObj) => format!("{}(e1,e2)", self.name),
            Some(Direction::ObjSub) => format!("{}(e2,e1)", self.name),
            None => self.name.clone(),
        }
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.verbalize())
    }
}

/// The pre-defined relation set plus the NULL sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct RelationSchema {
    labels: Vec<String>,
    null_name: String,
    directional: bool,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    labels: Vec<String>,
    #[serde(default = "default_null_name")]
    null_name: String,
    #[serde(default)]
    directional: bool,
}

fn default_null_name() -> String {
    DEFAULT_NULL_NAME.to_string()
}

impl TryFrom<SchemaFile> for RelationSchema {
    type Error = CorpusError;

    fn try_from(file: SchemaFile) -> Result<Self, Self::Error> {
        RelationSchema::new(file.labels, file.null_name, file.directional)
    }
}

impl From<RelationSchema> for SchemaFile {
    fn from(schema: RelationSchema) -> Self {
        SchemaFile {
            labels: schema.labels,
            null_name: schema.null_name,
            directional: schema.directional,
        }
    }
}

impl RelationSchema {
    pub fn new(
        labels: Vec<String>,
        null_name: impl Into<String>,
        directional: bool,
    ) -> Result<Self, CorpusError> {
        let null_name = null_name.into();
        if null_name.trim().is_empty() {
            return Err(CorpusError::Schema("empty NULL sentinel".into()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(CorpusError::Schema("empty label name".into()));
            }
            if *label == null_name {
                return Err(CorpusError::Schema(format!(
                    "label list contains the NULL sentinel `{null_name}`"
                )));
            }
            if !seen.insert(label.as_str()) {
                return Err(CorpusError::Schema(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self {
            labels,
            null_name,
            directional,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Schema(e.to_string()))
    }

    pub fn label_names(&self) -> &[String] {
        &self.labels
    }

    pub fn null_name(&self) -> &str {
        &self.null_name
    }

    pub fn is_directional(&self) -> bool {
        self.directional
    }

    pub fn null_label(&self) -> RelationLabel {
        RelationLabel::null(&self.null_name)
    }

    /// Every non-NULL label a prediction may take, in schema order. For
    /// directional schemas each name appears in both directions.
    pub fn relation_labels(&self) -> Vec<RelationLabel> {
        let mut out = Vec::new();
        for name in &self.labels {
            if self.directional {
                out.push(RelationLabel::new(name, Some(Direction::SubObj)));
                out.push(RelationLabel::new(name, Some(Direction::ObjSub)));
            } else {
                out.push(RelationLabel::new(name, None));
            }
        }
        out
    }

    /// `relation_labels` followed by the NULL label.
    pub fn all_labels(&self) -> Vec<RelationLabel> {
        let mut out = self.relation_labels();
        out.push(self.null_label());
        out
    }

    /// Index of `label` within `all_labels`.
    pub fn label_index(&self, label: &RelationLabel) -> Option<usize> {
        if label.is_null {
            return (label.name == self.null_name).then_some(self.all_labels().len() - 1);
        }
        let base = self.labels.iter().position(|l| *l == label.name)?;
        match (self.directional, label.direction) {
            (false, None) => Some(base),
            (true, Some(Direction::SubObj)) => Some(2 * base),
            (true, Some(Direction::ObjSub)) => Some(2 * base + 1),
            _ => None,
        }
    }

    pub fn contains(&self, label: &RelationLabel) -> bool {
        self.label_index(label).is_some()
    }

    /// Resolves a raw `(label, direction)` pair from a record.
    pub fn resolve(
        &self,
        name: &str,
        direction: Option<Direction>,
    ) -> Result<RelationLabel, LabelError> {
        if name == self.null_name {
            return Ok(self.null_label());
        }
        if !self.labels.iter().any(|l| l == name) {
            return Err(LabelError::Unknown(name.to_string()));
        }
        match (self.directional, direction) {
            (true, None) => Err(LabelError::Direction(format!(
                "label `{name}` needs a direction in a directional schema"
            ))),
            (false, Some(_)) => Err(LabelError::Direction(format!(
                "label `{name}` carries a direction but the schema is not directional"
            ))),
            _ => Ok(RelationLabel::new(name, direction)),
        }
    }
}

#[derive(Debug)]
pub enum LabelError {
    Unknown(String),
    Direction(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct REInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub subject: EntityMention,
    pub object: EntityMention,
    pub gold_label: RelationLabel,
}

impl REInstance {
    pub fn sentence(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MentionRecord {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    entity_type: Option<String>,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    tokens: Vec<String>,
    subj: MentionRecord,
    obj: MentionRecord,
    label: String,
    #[serde(default)]
    direction: Option<Direction>,
}

impl InstanceRecord {
    fn from_instance(instance: &REInstance) -> Self {
        let mention = |m: &EntityMention| MentionRecord {
            start: m.start,
            end: m.end,
            entity_type: m.entity_type.clone(),
            text: m.text.clone(),
        };
        InstanceRecord {
            id: instance.id.clone(),
            tokens: instance.tokens.clone(),
            subj: mention(&instance.subject),
            obj: mention(&instance.object),
            label: instance.gold_label.name.clone(),
            direction: instance.gold_label.direction,
        }
    }

    fn into_instance(
        self,
        line: usize,
        schema: &RelationSchema,
    ) -> Result<REInstance, CorpusError> {
        let len = self.tokens.len();
        let mention = |m: MentionRecord, role: Role| -> Result<EntityMention, CorpusError> {
            if m.start >= m.end || m.end > len {
                return Err(CorpusError::SpanOutOfBounds {
                    line,
                    role,
                    start: m.start,
                    end: m.end,
                    len,
                });
            }
            let expected = self.tokens[m.start..m.end].join(" ");
            if expected != m.text {
                return Err(CorpusError::TextMismatch {
                    line,
                    role,
                    text: m.text,
                    expected,
                });
            }
            Ok(EntityMention {
                text: m.text,
                start: m.start,
                end: m.end,
                entity_type: m.entity_type,
                role,
            })
        };
        let subject = mention(self.subj.clone(), Role::Subject)?;
        let object = mention(self.obj.clone(), Role::Object)?;
        if subject.overlaps(&object) {
            return Err(CorpusError::OverlappingSpans { line });
        }
        let gold_label = schema
            .resolve(&self.label, self.direction)
            .map_err(|e| match e {
                LabelError::Unknown(label) => CorpusError::UnknownLabel { line, label },
                LabelError::Direction(message) => CorpusError::Direction { line, message },
            })?;
        Ok(REInstance {
            id: self.id,
            tokens: self.tokens,
            subject,
            object,
            gold_label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// An immutable, validated dataset split.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub schema: RelationSchema,
    instances: Vec<REInstance>,
}

impl DatasetSplit {
    /// Builds a split from already-constructed instances, enforcing id
    /// uniqueness and schema membership.
    pub fn new(
        name: SplitName,
        schema: RelationSchema,
        instances: Vec<REInstance>,
    ) -> Result<Self, CorpusError> {
        let mut ids = HashSet::new();
        for (i, inst) in instances.iter().enumerate() {
            if !ids.insert(inst.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: inst.id.clone(),
                });
            }
            if !schema.contains(&inst.gold_label) {
                return Err(CorpusError::UnknownLabel {
                    line: i + 1,
                    label: inst.gold_label.verbalize(),
                });
            }
        }
        Ok(Self {
            name,
            schema,
            instances,
        })
    }

    pub fn instances(&self) -> &[REInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&REInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Map from id to position, for repeated lookups.
    pub fn id_positions(&self) -> std::collections::HashMap<&str, usize> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.id.as_str(), i))
            .collect()
    }

    pub fn with_instances(&self, instances: Vec<REInstance>) -> Self {
        Self {
            name: self.name,
            schema: self.schema.clone(),
            instances,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for inst in &self.instances {
            let line = serde_json::to_string(&InstanceRecord::from_instance(inst))
                .expect("instance records always serialize");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let io = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io)?;
        let mut writer = std::io::BufWriter::new(file);
        self.write_jsonl(&mut writer).map_err(io)?;
        writer.flush().map_err(io)
    }
}

/// Loads a JSONL split. Blank lines are skipped; line numbers in errors are
/// 1-based physical lines.
pub fn load_dataset(
    path: impl AsRef<Path>,
    name: SplitName,
    schema: &RelationSchema,
) -> Result<DatasetSplit, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let split = read_dataset(file, name, schema).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })?;
    let hist = label_histogram(&split);
    tracing::info!(
        path = %path.display(),
        split = %name,
        instances = split.len(),
        null_percent = format!("{:.2}", 100.0 * null_fraction(&split)),
        labels = hist.len(),
        "loaded dataset split"
    );
    Ok(split)
}

pub fn read_dataset<R: Read>(
    reader: R,
    name: SplitName,
    schema: &RelationSchema,
) -> Result<DatasetSplit, CorpusError> {
    let reader = BufReader::new(reader);
    let mut instances = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if !ids.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        instances.push(record.into_instance(line_no, schema)?);
    }
    Ok(DatasetSplit {
        name,
        schema: schema.clone(),
        instances,
    })
}

pub fn label_histogram(split: &DatasetSplit) -> BTreeMap<RelationLabel, usize> {
    let mut hist = BTreeMap::new();
    for inst in split.instances() {
        *hist.entry(inst.gold_label.clone()).or_insert(0) += 1;
    }
    hist
}

/// Fraction of gold-NULL instances; 0 for an empty split.
pub fn null_fraction(split: &DatasetSplit) -> f64 {
    if split.is_empty() {
        return 0.0;
    }
    let nulls = split
        .instances()
        .iter()
        .filter(|i| i.gold_label.is_null)
        .count();
    nulls as f64 / split.len() as f64
}

/// Largest-remainder apportionment of `n` seats over `counts`.
///
/// Seats left after flooring go first to labels whose quota is at least 0.5
/// but floored to zero, then by descending remainder, then by position.
pub fn apportion(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    // Exact integer arithmetic: quota_i = n * c_i / total.
    let mut seats: Vec<usize> = counts.iter().map(|&c| n * c / total).collect();
    let remainders: Vec<usize> = counts.iter().map(|&c| n * c % total).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
    order.sort_by(|&a, &b| {
        let starved = |i: usize| seats[i] == 0 && 2 * remainders[i] >= total;
        starved(b)
            .cmp(&starved(a))
            .then(remainders[b].cmp(&remainders[a]))
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        seats[i] += 1;
    }
    seats
}

/// Samples `n` instances preserving the per-label proportions of `split`.
/// Instances keep their original relative order.
pub fn sample_stratified_subset(
    split: &DatasetSplit,
    n: usize,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    if n == 0 || n > split.len() {
        return Err(CorpusError::SubsetSize {
            n,
            available: split.len(),
        });
    }
    let labels = split.schema.all_labels();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    for (pos, inst) in split.instances().iter().enumerate() {
        let idx = split
            .schema
            .label_index(&inst.gold_label)
            .expect("split labels validated at load");
        pools[idx].push(pos);
    }
    let counts: Vec<usize> = pools.iter().map(Vec::len).collect();
    let seats = apportion(&counts, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (pool, &take) in pools.iter().zip(&seats) {
        chosen.extend(pool.choose_multiple(&mut rng, take).copied());
    }
    chosen.sort_unstable();
    let instances = chosen
        .into_iter()
        .map(|pos| split.instances()[pos].clone())
        .collect();
    Ok(split.with_instances(instances))
}
