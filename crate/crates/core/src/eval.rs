//! Micro and per-label scoring, confusion matrices and NULL-overprediction
//! accounting in the extraction (with NULL) and classification (without
//! NULL) settings.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, DatasetSplit, RelationLabel, RelationSchema};
use crate::llm::{ParseStatus, Prediction};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction set is empty")]
    Empty,
    #[error("duplicate test id `{0}`")]
    DuplicateId(String),
    #[error("label `{label}` for `{test_id}` is outside the schema")]
    UnknownLabel { test_id: String, label: String },
    #[error("gold NULL pair `{0}` in the without_null setting; filter NULL instances first")]
    GoldNullInClassification(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    WithNull,
    WithoutNull,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::WithNull => "with_null",
            Setting::WithoutNull => "without_null",
        })
    }
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "with_null" => Ok(Setting::WithNull),
            "without_null" => Ok(Setting::WithoutNull),
            other => Err(format!("unknown setting `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub test_id: String,
    pub gold: RelationLabel,
    pub pred: RelationLabel,
    pub parse_status: ParseStatus,
}

/// Gold/predicted label pairs with unique test ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pairs: Vec<PredictionPair>,
}

impl PredictionSet {
    pub fn new(pairs: Vec<PredictionPair>) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        for p in &pairs {
            if !seen.insert(p.test_id.as_str()) {
                return Err(EvalError::DuplicateId(p.test_id.clone()));
            }
        }
        Ok(Self { pairs })
    }

    /// Pairs each prediction with its instance's gold label.
    pub fn from_predictions(test: &DatasetSplit, preds: &[Prediction]) -> Result<Self, EvalError> {
        let positions = test.id_positions();
        let pairs = preds
            .iter()
            .map(|p| {
                let pos =
                    positions
                        .get(p.test_id.as_str())
                        .ok_or_else(|| EvalError::UnknownLabel {
                            test_id: p.test_id.clone(),
                            label: "<no gold instance>".into(),
                        })?;
                Ok(PredictionPair {
                    test_id: p.test_id.clone(),
                    gold: test.instances()[*pos].gold_label.clone(),
                    pred: p.label.clone(),
                    parse_status: p.parse_status,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[PredictionPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn validate(&self, schema: &RelationSchema) -> Result<(), EvalError> {
        if self.pairs.is_empty() {
            return Err(EvalError::Empty);
        }
        for p in &self.pairs {
            for label in [&p.gold, &p.pred] {
                if !schema.contains(label) {
                    return Err(EvalError::UnknownLabel {
                        test_id: p.test_id.clone(),
                        label: label.verbalize(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    /// Set when precision or recall had a zero denominator and was reported
    /// as 0.
    pub degenerate: bool,
}

impl Prf {
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (0.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (p, dp) = ratio(c.tp, c.tp + c.fp);
        let (r, dr) = ratio(c.tp, c.tp + c.fn_);
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        Prf {
            p,
            r,
            f1,
            degenerate: dp || dr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub micro: Prf,
    pub counts: Counts,
    pub per_label: BTreeMap<String, LabelScore>,
    /// Row = gold, column = prediction, both indexed by `labels`.
    pub confusion: Vec<Vec<usize>>,
    pub labels: Vec<String>,
    pub null_overprediction: Option<f64>,
    pub parse_fallback_count: usize,
}

/// Confusion counts over `labels` (schema relations, then NULL).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub cells: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.cells.iter().flatten().sum()
    }

    pub fn get(&self, gold: &str, pred: &str) -> usize {
        let g = self.labels.iter().position(|l| l == gold);
        let p = self.labels.iter().position(|l| l == pred);
        match (g, p) {
            (Some(g), Some(p)) => self.cells[g][p],
            _ => 0,
        }
    }

    /// Header row and column of label names; gold labels down the side.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.cells) {
            out.push_str(&csv_field(l));
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    /// Long-form `gold,pred,count` rows for heat-map plotting.
    pub fn to_heatmap_csv(&self) -> String {
        let mut out = String::from("gold,pred,count\n");
        for (g, row) in self.labels.iter().zip(&self.cells) {
            for (p, c) in self.labels.iter().zip(row) {
                let _ = writeln!(out, "{},{},{c}", csv_field(g), csv_field(p));
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn confusion_matrix(
    preds: &PredictionSet,
    schema: &RelationSchema,
) -> Result<ConfusionMatrix, EvalError> {
    preds.validate(schema)?;
    let all = schema.all_labels();
    let mut cells = vec![vec![0usize; all.len()]; all.len()];
    for p in preds.pairs() {
        let g = schema.label_index(&p.gold).expect("validated");
        let q = schema.label_index(&p.pred).expect("validated");
        cells[g][q] += 1;
    }
    Ok(ConfusionMatrix {
        labels: all.iter().map(RelationLabel::verbalize).collect(),
        cells,
    })
}

/// Share of gold-NULL pairs predicted as some relation. `None` when there
/// are no gold-NULL pairs.
pub fn null_overprediction_rate(preds: &PredictionSet) -> Option<f64> {
    let (mut nulls, mut wrong) = (0usize, 0usize);
    for p in preds.pairs() {
        if p.gold.is_null {
            nulls += 1;
            if !p.pred.is_null {
                wrong += 1;
            }
        }
    }
    (nulls > 0).then(|| wrong as f64 / nulls as f64)
}

fn micro_counts(preds: &PredictionSet, setting: Setting) -> Counts {
    let mut c = Counts::default();
    for p in preds.pairs() {
        let correct = p.pred == p.gold;
        match setting {
            Setting::WithNull => {
                if correct && !p.gold.is_null {
                    c.tp += 1;
                }
                if !p.pred.is_null && !correct {
                    c.fp += 1;
                }
                if !p.gold.is_null && !correct {
                    c.fn_ += 1;
                }
            }
            Setting::WithoutNull => {
                if correct {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                    c.fn_ += 1;
                }
            }
        }
    }
    c
}

pub fn score(
    preds: &PredictionSet,
    schema: &RelationSchema,
    setting: Setting,
) -> Result<EvalReport, EvalError> {
    preds.validate(schema)?;
    if setting == Setting::WithoutNull {
        if let Some(p) = preds.pairs().iter().find(|p| p.gold.is_null) {
            return Err(EvalError::GoldNullInClassification(p.test_id.clone()));
        }
    }
    let counts = micro_counts(preds, setting);
    let confusion = confusion_matrix(preds, schema)?;
    let n = confusion.labels.len();
    let mut per_label = BTreeMap::new();
    for i in 0..n {
        let tp = confusion.cells[i][i];
        let support: usize = confusion.cells[i].iter().sum();
        let predicted: usize = (0..n).map(|g| confusion.cells[g][i]).sum();
        let prf = Prf::from_counts(Counts {
            tp,
            fp: predicted - tp,
            fn_: support - tp,
        });
        per_label.insert(
            confusion.labels[i].clone(),
            LabelScore {
                p: prf.p,
                r: prf.r,
                f1: prf.f1,
                support,
            },
        );
    }
    Ok(EvalReport {
        setting,
        micro: Prf::from_counts(counts),
        counts,
        per_label,
        confusion: confusion.cells,
        labels: confusion.labels,
        null_overprediction: null_overprediction_rate(preds),
        parse_fallback_count: preds
            .pairs()
            .iter()
            .filter(|p| p.parse_status == ParseStatus::FallbackNull)
            .count(),
    })
}

/// Removes every gold-NULL instance from `split`.
pub fn filter_null_setting(split: &DatasetSplit) -> Result<DatasetSplit, CorpusError> {
    let kept: Vec<_> = split
        .instances()
        .iter()
        .filter(|i| !i.gold_label.is_null)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptyAfterFilter(split.name));
    }
    Ok(split.with_instances(kept))
}

impl EvalReport {
    pub fn confusion_matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            labels: self.labels.clone(),
            cells: self.confusion.clone(),
        }
    }

    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(out, "setting: {}", self.setting);
        let _ = writeln!(
            out,
            "micro    P {:.4}  R {:.4}  F1 {:.4}{}",
            self.micro.p,
            self.micro.r,
            self.micro.f1,
            if self.micro.degenerate {
                "  (degenerate)"
            } else {
                ""
            }
        );
        let _ = writeln!(
            out,
            "TP {}  FP {}  FN {}",
            self.counts.tp, self.counts.fp, self.counts.fn_
        );
        match self.null_overprediction {
            Some(rate) => {
                let _ = writeln!(out, "NULL overprediction: {rate:.4}");
            }
            None => {
                let _ = writeln!(out, "NULL overprediction: n/a");
            }
        }
        let _ = writeln!(out, "parse fallbacks: {}", self.parse_fallback_count);
        let _ = writeln!(
            out,
            "\n{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}",
            "label", "P", "R", "F1", "support"
        );
        for label in &self.labels {
            let s = &self.per_label[label];
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7}",
                label, s.p, s.r, s.f1, s.support
            );
        }
        out
    }
}
