//! Exact cosine kNN over embedding stores and demonstration selection.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, REInstance, RelationLabel};
use crate::embed::{l2_norm, EmbeddingRecord, EmbeddingStore, Regime};
use crate::prompt::Demonstration;

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error("cannot build an index from an empty store")]
    EmptyStore,
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("record `{id}` has dimension {got}, expected {expected}")]
    MixedDim {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("zero-norm vector for `{0}`")]
    ZeroVector(String),
    #[error("strategy {strategy} needs a {expected} index, got {got}")]
    RegimeMismatch {
        strategy: Strategy,
        expected: Regime,
        got: Regime,
    },
    #[error("strategy {0} is not a kNN strategy")]
    NotKnn(Strategy),
    #[error("missing test vector for `{0}`")]
    MissingTestVector(String),
    #[error("index id `{0}` is not in the training split")]
    UnknownTrainId(String),
    #[error("k = {k} exceeds the {available} available training instances")]
    TooManyShots { k: usize, available: usize },
    #[error("k must be positive")]
    ZeroShots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RandomBalanced,
    KnnSent,
    KnnEntprompt,
    KnnFt,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::RandomBalanced,
        Strategy::KnnSent,
        Strategy::KnnEntprompt,
        Strategy::KnnFt,
    ];

    /// Embedding regime a kNN strategy searches in.
    pub fn regime(self) -> Option<Regime> {
        match self {
            Strategy::RandomBalanced => None,
            Strategy::KnnSent => Some(Regime::Sent),
            Strategy::KnnEntprompt => Some(Regime::EntPrompt),
            Strategy::KnnFt => Some(Regime::Ft),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::RandomBalanced => "random_balanced",
            Strategy::KnnSent => "knn_sent",
            Strategy::KnnEntprompt => "knn_entprompt",
            Strategy::KnnFt => "knn_ft",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotRange {
    pub lower: usize,
    pub upper: usize,
}

impl ShotRange {
    /// Default k search ranges for the benchmark datasets.
    pub fn for_dataset(name: &str) -> Option<ShotRange> {
        let (lower, upper) = match name.to_ascii_lowercase().as_str() {
            "semeval" => (5, 30),
            "tacred" => (5, 15),
            "scierc" => (5, 30),
            "ace05" => (5, 25),
            _ => return None,
        };
        Some(ShotRange { lower, upper })
    }

    pub fn contains(&self, k: usize) -> bool {
        (self.lower..=self.upper).contains(&k)
    }
}

/// Logs a warning when `k` falls outside the dataset's configured range.
/// Returns whether `k` is inside it (datasets without a range always pass).
pub fn check_shot_count(dataset: &str, k: usize) -> bool {
    match ShotRange::for_dataset(dataset) {
        Some(range) if !range.contains(k) => {
            tracing::warn!(
                dataset,
                k,
                lower = range.lower,
                upper = range.upper,
                "k outside the usual shot range"
            );
            false
        }
        _ => true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

/// Cosine similarity of two raw vectors given their precomputed norms.
#[inline]
fn cosine(a: &[f32], a_norm: f64, b: &[f32], b_norm: f64) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    dot / (a_norm * b_norm)
}

/// Read-only exact search index.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    regime: Regime,
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
    norms: Vec<f64>,
}

impl KnnIndex {
    pub fn build(store: &EmbeddingStore) -> Result<Self, RetrieveError> {
        Self::from_records(store.regime(), store.records().iter())
    }

    /// Index over the subset of `store` whose ids satisfy `keep`.
    pub fn build_filtered(
        store: &EmbeddingStore,
        keep: impl Fn(&str) -> bool,
    ) -> Result<Self, RetrieveError> {
        Self::from_records(
            store.regime(),
            store.records().iter().filter(|r| keep(&r.instance_id)),
        )
    }

    pub fn from_records<'a>(
        regime: Regime,
        records: impl Iterator<Item = &'a EmbeddingRecord>,
    ) -> Result<Self, RetrieveError> {
        let mut index = KnnIndex {
            regime,
            dim: 0,
            ids: Vec::new(),
            values: Vec::new(),
            norms: Vec::new(),
        };
        for record in records {
            if index.ids.is_empty() {
                index.dim = record.values.len();
            } else if record.values.len() != index.dim {
                return Err(RetrieveError::MixedDim {
                    id: record.instance_id.clone(),
                    expected: index.dim,
                    got: record.values.len(),
                });
            }
            let norm = l2_norm(&record.values);
            if !norm.is_normal() {
                return Err(RetrieveError::ZeroVector(record.instance_id.clone()));
            }
            index.ids.push(record.instance_id.clone());
            index.values.extend_from_slice(&record.values);
            index.norms.push(norm);
        }
        if index.ids.is_empty() {
            return Err(RetrieveError::EmptyStore);
        }
        Ok(index)
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// The `k` most similar entries not in `exclude`, best first.
    pub fn query(
        &self,
        query: &[f32],
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<Neighbor>, RetrieveError> {
        if query.len() != self.dim {
            return Err(RetrieveError::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(RetrieveError::ZeroShots);
        }
        let q_norm = l2_norm(query);
        if !q_norm.is_normal() {
            return Err(RetrieveError::ZeroVector("<query>".into()));
        }
        let mut scored: Vec<(f64, usize)> = self
            .values
            .chunks_exact(self.dim)
            .zip(&self.norms)
            .enumerate()
            .filter(|(i, _)| !exclude.contains(&self.ids[*i]))
            .map(|(i, (v, &n))| (cosine(query, q_norm, v, n), i))
            .collect();
        // Score descending, then id ascending.
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(scored
            .into_iter()
            .map(|(score, i)| Neighbor {
                id: self.ids[i].clone(),
                score,
            })
            .collect())
    }
}

/// Free-function form of [`KnnIndex::query`].
pub fn knn_query(
    index: &KnnIndex,
    query: &[f32],
    k: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<Neighbor>, RetrieveError> {
    index.query(query, k, exclude)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Similarity(f64),
    Random,
}

impl Provenance {
    pub fn score(&self) -> Option<f64> {
        match self {
            Provenance::Similarity(s) => Some(*s),
            Provenance::Random => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedDemo {
    pub demo: Demonstration,
    pub provenance: Provenance,
}

/// Demonstrations in priority order: index 0 is the most relevant and the
/// last item is dropped first under budget pressure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemonstrationSet {
    pub items: Vec<SelectedDemo>,
}

impl DemonstrationSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items
            .iter()
            .map(|d| d.demo.instance.id.as_str())
            .collect()
    }

    pub fn demos(&self) -> impl Iterator<Item = &Demonstration> {
        self.items.iter().map(|d| &d.demo)
    }
}

#[derive(Debug, Clone)]
pub struct SelectionRequest<'a> {
    pub test_instance: &'a REInstance,
    pub k: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceOptions {
    /// Whether NULL takes a turn in the round-robin when train has NULL.
    pub include_null: bool,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self { include_null: true }
    }
}

/// Label-balanced random selection. Labels take turns in a seed-shuffled
/// order; each turn draws the next instance of that label's shuffled pool,
/// and labels with exhausted pools are skipped.
pub fn select_random_balanced(
    train: &DatasetSplit,
    request: &SelectionRequest<'_>,
    options: BalanceOptions,
) -> Result<DemonstrationSet, RetrieveError> {
    if request.k == 0 {
        return Err(RetrieveError::ZeroShots);
    }
    let mut pools: Vec<(RelationLabel, Vec<&REInstance>)> = Vec::new();
    let mut slot: HashMap<&RelationLabel, usize> = HashMap::new();
    for inst in train.instances() {
        if inst.id == request.test_instance.id {
            continue;
        }
        if inst.gold_label.is_null && !options.include_null {
            continue;
        }
        let idx = *slot.entry(&inst.gold_label).or_insert_with(|| {
            pools.push((inst.gold_label.clone(), Vec::new()));
            pools.len() - 1
        });
        pools[idx].1.push(inst);
    }
    let available: usize = pools.iter().map(|(_, p)| p.len()).sum();
    if request.k > available {
        return Err(RetrieveError::TooManyShots {
            k: request.k,
            available,
        });
    }
    // Canonical label order before shuffling so the result does not depend
    // on the order labels first appear in the file.
    pools.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    pools.shuffle(&mut rng);
    for (_, pool) in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; pools.len()];
    let mut items = Vec::with_capacity(request.k);
    'outer: loop {
        for (turn, (_, pool)) in pools.iter().enumerate() {
            if items.len() == request.k {
                break 'outer;
            }
            if let Some(inst) = pool.get(cursors[turn]) {
                cursors[turn] += 1;
                items.push(SelectedDemo {
                    demo: Demonstration::from_instance((*inst).clone()),
                    provenance: Provenance::Random,
                });
            }
        }
    }
    Ok(DemonstrationSet { items })
}

/// Top-k training instances by cosine similarity to `test_vector`, most
/// similar first. The test instance itself is never returned.
pub fn select_knn(
    train: &DatasetSplit,
    index: &KnnIndex,
    request: &SelectionRequest<'_>,
    test_vector: Option<&[f32]>,
) -> Result<DemonstrationSet, RetrieveError> {
    let expected = request
        .strategy
        .regime()
        .ok_or(RetrieveError::NotKnn(request.strategy))?;
    if index.regime() != expected {
        return Err(RetrieveError::RegimeMismatch {
            strategy: request.strategy,
            expected,
            got: index.regime(),
        });
    }
    let vector = test_vector
        .ok_or_else(|| RetrieveError::MissingTestVector(request.test_instance.id.clone()))?;
    let exclude: HashSet<String> = [request.test_instance.id.clone()].into();
    let neighbors = index.query(vector, request.k, &exclude)?;
    let positions = train.id_positions();
    let items = neighbors
        .into_iter()
        .map(|n| {
            let pos = positions
                .get(n.id.as_str())
                .ok_or_else(|| RetrieveError::UnknownTrainId(n.id.clone()))?;
            Ok(SelectedDemo {
                demo: Demonstration::from_instance(train.instances()[*pos].clone()),
                provenance: Provenance::Similarity(n.score),
            })
        })
        .collect::<Result<Vec<_>, RetrieveError>>()?;
    Ok(DemonstrationSet { items })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAuditItem {
    pub id: String,
    pub score: Option<f64>,
}

/// One line of the selection audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAudit {
    pub test_id: String,
    pub strategy: Strategy,
    pub k: usize,
    pub items: Vec<SelectionAuditItem>,
}

impl SelectionAudit {
    pub fn new(test_id: &str, strategy: Strategy, k: usize, set: &DemonstrationSet) -> Self {
        Self {
            test_id: test_id.to_string(),
            strategy,
            k,
            items: set
                .items
                .iter()
                .map(|d| SelectionAuditItem {
                    id: d.demo.instance.id.clone(),
                    score: d.provenance.score(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::corpus::fixtures;
    use proptest::prelude::*;

    fn store(regime: Regime, rows: &[(&str, Vec<f32>)]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(regime, rows[0].1.len());
        for (id, v) in rows {
            s.push(*id, v.clone()).unwrap();
        }
        s
    }

    fn lcg_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    /// Brute force: score everything, full sort, filter, take k.
    fn oracle(
        rows: &[(String, Vec<f32>)],
        q: &[f32],
        k: usize,
        exclude: &HashSet<String>,
    ) -> Vec<(String, f64)> {
        let qn = q
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        let mut all: Vec<(String, f64)> = rows
            .iter()
            .map(|(id, v)| {
                let vn = v
                    .iter()
                    .map(|&x| f64::from(x) * f64::from(x))
                    .sum::<f64>()
                    .sqrt();
                let mut dot = 0f64;
                for i in 0..v.len() {
                    dot += f64::from(q[i]) * f64::from(v[i]);
                }
                (id.clone(), dot / (qn * vn))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.into_iter()
            .filter(|(id, _)| !exclude.contains(id))
            .take(k)
            .collect()
    }

    #[test]
    fn single_record_and_self_similarity() {
        let s = store(Regime::Ft, &[("a", vec![0.3, 0.4])]);
        let index = KnnIndex::build(&s).unwrap();
        assert_eq!(index.len(), 1);
        let hits = index.query(&[0.3, 0.4], 5, &HashSet::new()).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_and_mixed_dims_rejected() {
        let s = EmbeddingStore::new(Regime::Sent, 3);
        assert!(matches!(
            KnnIndex::build(&s),
            Err(RetrieveError::EmptyStore)
        ));
        let a = EmbeddingRecord {
            instance_id: "a".into(),
            regime: Regime::Sent,
            dim: 2,
            values: vec![1.0, 0.0],
        };
        let b = EmbeddingRecord {
            instance_id: "b".into(),
            regime: Regime::Sent,
            dim: 3,
            values: vec![1.0, 0.0, 0.0],
        };
        assert!(matches!(
            KnnIndex::from_records(Regime::Sent, [a, b].iter()),
            Err(RetrieveError::MixedDim { .. })
        ));
    }

    #[test]
    fn ties_break_by_id_and_exclusion_holds() {
        let s = store(
            Regime::Sent,
            &[
                ("b", vec![1.0, 0.0]),
                ("a", vec![2.0, 0.0]),
                ("c", vec![0.0, 1.0]),
            ],
        );
        let index = KnnIndex::build(&s).unwrap();
        let hits = index.query(&[1.0, 0.0], 3, &HashSet::new()).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let hits = index
            .query(&[1.0, 0.0], 3, &["a".to_string()].into())
            .unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert!(matches!(
            index.query(&[1.0], 1, &HashSet::new()),
            Err(RetrieveError::DimMismatch { .. })
        ));
    }

    #[test]
    fn matches_brute_force_small() {
        let vecs = lcg_vectors(300, 16, 11);
        let rows: Vec<(String, Vec<f32>)> = vecs
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("r{i}"), v))
            .collect();
        let mut s = EmbeddingStore::new(Regime::Sent, 16);
        for (id, v) in &rows {
            s.push(id.clone(), v.clone()).unwrap();
        }
        let index = KnnIndex::build(&s).unwrap();
        for (qi, q) in lcg_vectors(20, 16, 12).iter().enumerate() {
            let exclude: HashSet<String> = [format!("r{qi}")].into();
            let got: Vec<(String, f64)> = index
                .query(q, 10, &exclude)
                .unwrap()
                .into_iter()
                .map(|n| (n.id, n.score))
                .collect();
            assert_eq!(got, oracle(&rows, q, 10, &exclude));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn knn_equals_oracle(n in 1usize..300, dim in 1usize..32, seed in any::<u64>(), k in 1usize..15) {
            let rows: Vec<(String, Vec<f32>)> = lcg_vectors(n, dim, seed)
                .into_iter()
                .enumerate()
                .filter(|(_, v)| l2_norm(v) > 0.0)
                .map(|(i, v)| (format!("{:04}", i), v))
                .collect();
            prop_assume!(!rows.is_empty());
            let mut s = EmbeddingStore::new(Regime::Sent, dim);
            for (id, v) in &rows { s.push(id.clone(), v.clone()).unwrap(); }
            let index = KnnIndex::build(&s).unwrap();
            let q = &lcg_vectors(1, dim, seed ^ 0x5eed)[0];
            prop_assume!(l2_norm(q) > 0.0);
            let got: Vec<(String, f64)> = index.query(q, k, &HashSet::new()).unwrap().into_iter().map(|n| (n.id, n.score)).collect();
            prop_assert_eq!(got, oracle(&rows, q, k, &HashSet::new()));
        }

        #[test]
        fn ranking_is_scale_invariant(seed in any::<u64>(), exp in -6i32..6, scale in 0.01f32..100.0) {
            let vecs = lcg_vectors(200, 8, seed);
            let q = &lcg_vectors(1, 8, !seed)[0];
            for factor in [2f32.powi(exp), scale] {
                let mut a = EmbeddingStore::new(Regime::Ft, 8);
                let mut b = EmbeddingStore::new(Regime::Ft, 8);
                for (i, v) in vecs.iter().enumerate() {
                    a.push(format!("{i:03}"), v.clone()).unwrap();
                    b.push(format!("{i:03}"), v.iter().map(|x| x * factor).collect()).unwrap();
                }
                let ia = KnnIndex::build(&a).unwrap();
                let ib = KnnIndex::build(&b).unwrap();
                let ids = |ix: &KnnIndex| ix.query(q, 200, &HashSet::new()).unwrap().into_iter().map(|n| n.id).collect::<Vec<_>>();
                prop_assert_eq!(ids(&ia), ids(&ib));
            }
        }
    }

    fn labelled_train(per_label: &[(&str, usize)]) -> DatasetSplit {
        let names: Vec<&str> = per_label
            .iter()
            .map(|(l, _)| *l)
            .filter(|l| *l != "NULL")
            .collect();
        let schema = fixtures::schema(&names);
        let mut labels = Vec::new();
        for (l, n) in per_label {
            labels.extend(std::iter::repeat_n(*l, *n));
        }
        fixtures::split(&schema, &labels)
    }

    fn counts(set: &DemonstrationSet) -> HashMap<String, usize> {
        let mut out = HashMap::new();
        for d in set.demos() {
            *out.entry(d.label.verbalize()).or_insert(0) += 1;
        }
        out
    }

    #[test]
    fn balanced_nine_labels_thirty_shots() {
        let spec: Vec<(String, usize)> = (0..9).map(|i| (format!("L{i}"), 4 + i % 3)).collect();
        let spec_refs: Vec<(&str, usize)> = spec.iter().map(|(l, n)| (l.as_str(), *n)).collect();
        let train = labelled_train(&spec_refs);
        let outsider = fixtures::instance("test", &RelationLabel::new("L0", None));
        for seed in 0..50 {
            let req = SelectionRequest {
                test_instance: &outsider,
                k: 30,
                strategy: Strategy::RandomBalanced,
                seed,
            };
            let set = select_random_balanced(&train, &req, BalanceOptions::default()).unwrap();
            let c = counts(&set);
            assert_eq!(c.len(), 9);
            assert!(c.values().all(|&n| n == 3 || n == 4));
            assert_eq!(c.values().filter(|&&n| n == 4).count(), 3);
            let again = select_random_balanced(&train, &req, BalanceOptions::default()).unwrap();
            assert_eq!(set.ids(), again.ids());
        }
    }

    #[test]
    fn balanced_k1_and_exhaustion() {
        let train = labelled_train(&[("A", 1), ("B", 5), ("NULL", 2)]);
        let outsider = fixtures::instance("test", &RelationLabel::new("A", None));
        let req = SelectionRequest {
            test_instance: &outsider,
            k: 1,
            strategy: Strategy::RandomBalanced,
            seed: 9,
        };
        let one = select_random_balanced(&train, &req, BalanceOptions::default()).unwrap();
        assert_eq!(one.len(), 1);
        // The single pick comes from the first label in shuffled order.
        let mut labels = [
            RelationLabel::new("A", None),
            RelationLabel::new("B", None),
            train.schema.null_label(),
        ];
        labels.sort();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(one.items[0].demo.label, labels[0]);

        let req = SelectionRequest { k: 8, ..req };
        let all = select_random_balanced(&train, &req, BalanceOptions::default()).unwrap();
        let c = counts(&all);
        assert_eq!((c["A"], c["B"], c["NULL"]), (1, 5, 2));

        let req = SelectionRequest { k: 9, ..req };
        assert!(matches!(
            select_random_balanced(&train, &req, BalanceOptions::default()),
            Err(RetrieveError::TooManyShots { k: 9, available: 8 })
        ));
        let req = SelectionRequest { k: 6, ..req };
        let no_null = select_random_balanced(
            &train,
            &req,
            BalanceOptions {
                include_null: false,
            },
        )
        .unwrap();
        assert!(no_null.demos().all(|d| !d.label.is_null));
    }

    #[test]
    fn balanced_excludes_test_instance() {
        let train = labelled_train(&[("A", 3)]);
        let me = train.instances()[0].clone();
        let req = SelectionRequest {
            test_instance: &me,
            k: 2,
            strategy: Strategy::RandomBalanced,
            seed: 1,
        };
        let set = select_random_balanced(&train, &req, BalanceOptions::default()).unwrap();
        assert!(!set.ids().contains(&me.id.as_str()));
    }

    #[test]
    fn knn_selection_one_hot() {
        let train = labelled_train(&[("A", 4), ("B", 4)]);
        let mut s = EmbeddingStore::new(Regime::Ft, 2);
        for inst in train.instances() {
            let v = if inst.gold_label.name == "A" {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            };
            s.push(inst.id.clone(), v).unwrap();
        }
        let index = KnnIndex::build(&s).unwrap();
        let test = train.instances()[0].clone();
        let req = SelectionRequest {
            test_instance: &test,
            k: 3,
            strategy: Strategy::KnnFt,
            seed: 0,
        };
        let set = select_knn(&train, &index, &req, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(set.len(), 3);
        assert!(set.demos().all(|d| d.label.name == "A"));
        assert!(!set.ids().contains(&test.id.as_str()));
        assert!(set
            .items
            .iter()
            .all(|d| d.provenance == Provenance::Similarity(1.0)));

        let wrong = SelectionRequest {
            strategy: Strategy::KnnSent,
            ..req.clone()
        };
        assert!(matches!(
            select_knn(&train, &index, &wrong, Some(&[1.0, 0.0])),
            Err(RetrieveError::RegimeMismatch { .. })
        ));
        assert!(matches!(
            select_knn(&train, &index, &req, None),
            Err(RetrieveError::MissingTestVector(_))
        ));
    }

    #[test]
    fn knn_availability_cap() {
        let train = labelled_train(&[("A", 1)]);
        let s = store(Regime::Sent, &[("i0000", vec![1.0, 1.0])]);
        let index = KnnIndex::build(&s).unwrap();
        let test = fixtures::instance("t", &RelationLabel::new("A", None));
        let req = SelectionRequest {
            test_instance: &test,
            k: 5,
            strategy: Strategy::KnnSent,
            seed: 0,
        };
        assert_eq!(
            select_knn(&train, &index, &req, Some(&[1.0, 0.5]))
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn audit_line_shape() {
        let train = labelled_train(&[("A", 2)]);
        let test = fixtures::instance("t", &RelationLabel::new("A", None));
        let req = SelectionRequest {
            test_instance: &test,
            k: 1,
            strategy: Strategy::RandomBalanced,
            seed: 0,
        };
        let set = select_random_balanced(&train, &req, BalanceOptions::default()).unwrap();
        let line =
            serde_json::to_value(SelectionAudit::new("t", Strategy::RandomBalanced, 1, &set))
                .unwrap();
        assert_eq!(line["strategy"], "random_balanced");
        assert_eq!(line["items"][0]["score"], serde_json::Value::Null);
    }

    #[test]
    fn shot_ranges() {
        assert_eq!(
            ShotRange::for_dataset("TACRED"),
            Some(ShotRange {
                lower: 5,
                upper: 15
            })
        );
        assert!(check_shot_count("semeval", 30));
        assert!(!check_shot_count("ace05", 30));
        assert!(check_shot_count("custom", 300));
    }
}
