//! Named tensors keyed by (name, round, origin, tags), a concurrent store
//! for them, and the weighted consensus rule.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::RwLock;

/// Origin label used for tensors produced by the aggregator.
pub const AGGREGATOR_ORIGIN: &str = "aggregator";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("tensor {0} is already stored")]
    DuplicateKey(TensorKey),
    #[error("tensor `{0}` contains a non-finite value")]
    NonFiniteValue(String),
    #[error("tensor `{name}`: shape {shape:?} needs {expected} values, got {actual}")]
    LengthMismatch {
        name: String,
        shape: Vec<u32>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{0}` has a zero-sized dimension")]
    ZeroDimension(String),
    #[error("tensor `{0}` has no tags")]
    NoTags(String),
    #[error("tensor `{name}` shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<u32>,
        right: Vec<u32>,
    },
    #[error("contribution from `{origin}` is missing tensor `{name}`")]
    MissingTensor { origin: String, name: String },
    #[error("contribution from `{0}` has a non-positive weight")]
    InvalidWeight(String),
    #[error("nothing to aggregate")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Model,
    Trained,
    Metric,
}

impl Tag {
    pub fn bit(self) -> u8 {
        match self {
            Tag::Model => 1,
            Tag::Trained => 2,
            Tag::Metric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Model => "model",
            Tag::Trained => "trained",
            Tag::Metric => "metric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorKey {
    pub name: String,
    pub round: u32,
    pub origin: String,
    pub tags: BTreeSet<Tag>,
}

impl TensorKey {
    pub fn new(
        name: impl Into<String>,
        round: u32,
        origin: impl Into<String>,
        tags: impl IntoIterator<Item = Tag>,
    ) -> Self {
        TensorKey {
            name: name.into(),
            round,
            origin: origin.into(),
            tags: tags.into_iter().collect(),
        }
    }

    /// Key of a global model tensor served by the aggregator.
    pub fn global(name: impl Into<String>, round: u32) -> Self {
        TensorKey::new(name, round, AGGREGATOR_ORIGIN, [Tag::Model])
    }

    pub fn has(&self, tag: Tag) -> bool {
        self.tags.contains(&tag)
    }
}

impl fmt::Display for TensorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<&str> = self.tags.iter().map(|t| t.as_str()).collect();
        write!(
            f,
            "({}, round {}, {}, {{{}}})",
            self.name,
            self.round,
            self.origin,
            tags.join(",")
        )
    }
}

/// A model tensor without federation bookkeeping: what a task runner and a
/// model file deal in.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTensor {
    pub name: String,
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

impl ModelTensor {
    pub fn new(name: impl Into<String>, shape: Vec<u32>, data: Vec<f32>) -> Self {
        ModelTensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<u32>) -> Self {
        let len = element_count(&shape);
        ModelTensor::new(name, shape, vec![0.0; len])
    }

    pub fn check(&self) -> Result<(), TensorError> {
        check_payload(&self.name, &self.shape, &self.data)
    }

    pub fn with_key(self, round: u32, origin: &str, tags: impl IntoIterator<Item = Tag>) -> NamedTensor {
        NamedTensor {
            key: TensorKey::new(self.name, round, origin, tags),
            shape: self.shape,
            data: self.data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub key: TensorKey,
    /// Empty for a scalar.
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    /// Validates shape/length, finiteness and tags.
    pub fn new(key: TensorKey, shape: Vec<u32>, data: Vec<f32>) -> Result<Self, TensorError> {
        let t = NamedTensor { key, shape, data };
        t.check()?;
        Ok(t)
    }

    pub fn scalar(key: TensorKey, value: f32) -> Result<Self, TensorError> {
        NamedTensor::new(key, Vec::new(), vec![value])
    }

    pub fn check(&self) -> Result<(), TensorError> {
        if self.key.tags.is_empty() {
            return Err(TensorError::NoTags(self.key.name.clone()));
        }
        check_payload(&self.key.name, &self.shape, &self.data)
    }

    pub fn to_model(&self) -> ModelTensor {
        ModelTensor::new(self.key.name.clone(), self.shape.clone(), self.data.clone())
    }

    pub fn into_model(self) -> ModelTensor {
        ModelTensor::new(self.key.name, self.shape, self.data)
    }
}

pub fn element_count(shape: &[u32]) -> usize {
    shape.iter().map(|&d| d as usize).product()
}

fn check_payload(name: &str, shape: &[u32], data: &[f32]) -> Result<(), TensorError> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroDimension(name.to_string()));
    }
    let expected = element_count(shape);
    if data.len() != expected {
        return Err(TensorError::LengthMismatch {
            name: name.to_string(),
            shape: shape.to_vec(),
            expected,
            actual: data.len(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFiniteValue(name.to_string()));
    }
    Ok(())
}

/// One collaborator's share of a round: its tensors and the weight (local
/// dataset size) they carry in the consensus.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedContribution {
    pub origin: String,
    pub weight: f64,
    pub tensors: Vec<NamedTensor>,
}

/// Dataset-size weighted mean of every tensor name present in the
/// contributions.
///
/// Contributions are summed in origin order, each weight normalized to
/// `w_i / sum(w)` in f64 before accumulation, and the f64 accumulator is
/// rounded to f32 once at the end. Outputs are keyed for `round + 1` under
/// the aggregator origin, tagged `{metric}` when the inputs were metrics and
/// `{model}` otherwise, and returned sorted by name.
pub fn aggregate_weighted_mean(
    contributions: &[WeightedContribution],
    round: u32,
) -> Result<Vec<NamedTensor>, TensorError> {
    if contributions.is_empty() {
        return Err(TensorError::EmptyInput);
    }
    let mut ordered: Vec<&WeightedContribution> = contributions.iter().collect();
    ordered.sort_by(|a, b| a.origin.cmp(&b.origin));

    for c in &ordered {
        if !(c.weight > 0.0 && c.weight.is_finite()) {
            return Err(TensorError::InvalidWeight(c.origin.clone()));
        }
    }
    let total: f64 = ordered.iter().map(|c| c.weight).sum();
    let normalized: Vec<f64> = ordered.iter().map(|c| c.weight / total).collect();

    let indexed: Vec<BTreeMap<&str, &NamedTensor>> = ordered
        .iter()
        .map(|c| c.tensors.iter().map(|t| (t.key.name.as_str(), t)).collect())
        .collect();
    let reference = &indexed[0];
    for (c, tensors) in ordered.iter().zip(&indexed).skip(1) {
        if let Some(name) = reference.keys().find(|n| !tensors.contains_key(*n)) {
            return Err(TensorError::MissingTensor {
                origin: c.origin.clone(),
                name: name.to_string(),
            });
        }
        if let Some(name) = tensors.keys().find(|n| !reference.contains_key(*n)) {
            return Err(TensorError::MissingTensor {
                origin: ordered[0].origin.clone(),
                name: name.to_string(),
            });
        }
    }

    let mut out = Vec::with_capacity(reference.len());
    for (name, first) in reference {
        let mut acc = vec![0.0f64; first.data.len()];
        for (tensors, w) in indexed.iter().zip(&normalized) {
            let t = tensors[name];
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    name: name.to_string(),
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            for (a, &x) in acc.iter_mut().zip(&t.data) {
                *a += w * f64::from(x);
            }
        }
        let tag = if first.key.has(Tag::Metric) {
            Tag::Metric
        } else {
            Tag::Model
        };
        out.push(NamedTensor {
            key: TensorKey::new(*name, round + 1, AGGREGATOR_ORIGIN, [tag]),
            shape: first.shape.clone(),
            data: acc.into_iter().map(|a| a as f32).collect(),
        });
    }
    Ok(out)
}

/// Thread-safe map from [`TensorKey`] to [`NamedTensor`]. Keys are
/// write-once.
#[derive(Debug, Default)]
pub struct TensorStore {
    inner: RwLock<HashMap<TensorKey, NamedTensor>>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, tensor: NamedTensor) -> Result<(), TensorError> {
        tensor.check()?;
        let mut map = self.inner.write().expect("tensor store lock poisoned");
        if map.contains_key(&tensor.key) {
            return Err(TensorError::DuplicateKey(tensor.key));
        }
        map.insert(tensor.key.clone(), tensor);
        Ok(())
    }

    pub fn get(&self, key: &TensorKey) -> Option<NamedTensor> {
        self.inner
            .read()
            .expect("tensor store lock poisoned")
            .get(key)
            .cloned()
    }

    pub fn contains(&self, key: &TensorKey) -> bool {
        self.inner
            .read()
            .expect("tensor store lock poisoned")
            .contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("tensor store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All tensors of one round and origin, sorted by key.
    pub fn select(&self, round: u32, origin: &str) -> Vec<NamedTensor> {
        let map = self.inner.read().expect("tensor store lock poisoned");
        let mut out: Vec<NamedTensor> = map
            .values()
            .filter(|t| t.key.round == round && t.key.origin == origin)
            .cloned()
            .collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(name: &str, round: u32, origin: &str, data: Vec<f32>) -> NamedTensor {
        let shape = vec![data.len() as u32];
        NamedTensor::new(
            TensorKey::new(name, round, origin, [Tag::Model, Tag::Trained]),
            shape,
            data,
        )
        .unwrap()
    }

    fn contribution(origin: &str, weight: f64, data: Vec<f32>) -> WeightedContribution {
        WeightedContribution {
            origin: origin.into(),
            weight,
            tensors: vec![model("w", 3, origin, data)],
        }
    }

    #[test]
    fn put_then_get_round_trips() {
        let store = TensorStore::new();
        let t = model("w0", 0, "one", vec![1.0, -2.5, 3.25]);
        store.put(t.clone()).unwrap();
        let back = store.get(&t.key).unwrap();
        assert_eq!(
            back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(store.put(t), Err(TensorError::DuplicateKey(_))));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn nan_is_rejected() {
        let key = TensorKey::new("w0", 0, "one", [Tag::Model]);
        let t = NamedTensor { key, shape: vec![2], data: vec![1.0, f32::NAN] };
        let store = TensorStore::new();
        assert!(matches!(store.put(t), Err(TensorError::NonFiniteValue(_))));
        assert!(store.is_empty());
    }

    #[test]
    fn shape_and_tag_checks() {
        let key = TensorKey::new("w0", 0, "one", [Tag::Model]);
        assert!(matches!(
            NamedTensor::new(key.clone(), vec![2, 2], vec![0.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(NamedTensor::scalar(key, 1.0).is_ok());
        let untagged = TensorKey::new("w0", 0, "one", []);
        assert!(matches!(NamedTensor::scalar(untagged, 1.0), Err(TensorError::NoTags(_))));
    }

    #[test]
    fn single_contribution_is_identity() {
        let data = vec![0.1f32, -7.25, 1e-30, 3.0e7];
        let out = aggregate_weighted_mean(&[contribution("one", 17.0, data.clone())], 3).unwrap();
        assert_eq!(out[0].data, data);
        assert_eq!(out[0].key, TensorKey::global("w", 4));
    }

    #[test]
    fn hand_evaluated_weighted_mean() {
        // (2*1 + 4*3)/4 = 3.5, (4*1 + 8*3)/4 = 7.0
        let out = aggregate_weighted_mean(
            &[contribution("one", 1.0, vec![2.0, 4.0]), contribution("two", 3.0, vec![4.0, 8.0])],
            0,
        )
        .unwrap();
        assert_eq!(out[0].data, vec![3.5, 7.0]);
    }

    #[test]
    fn metrics_keep_metric_tag() {
        let metric = |origin: &str, v: f32| WeightedContribution {
            origin: origin.into(),
            weight: if origin == "one" { 100.0 } else { 300.0 },
            tensors: vec![NamedTensor::scalar(
                TensorKey::new("validate/accuracy", 0, origin, [Tag::Metric]),
                v,
            )
            .unwrap()],
        };
        let out = aggregate_weighted_mean(&[metric("one", 0.5), metric("two", 1.0)], 0).unwrap();
        assert_eq!(out[0].data, vec![0.875]);
        assert!(out[0].key.has(Tag::Metric));
        assert!(!out[0].key.has(Tag::Model));
    }

    #[test]
    fn mismatches_are_reported() {
        let a = contribution("one", 1.0, vec![1.0, 2.0]);
        let b = contribution("two", 1.0, vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            aggregate_weighted_mean(&[a.clone(), b], 0),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let mut c = contribution("two", 1.0, vec![1.0, 2.0]);
        c.tensors[0].key.name = "other".into();
        assert!(matches!(
            aggregate_weighted_mean(&[a.clone(), c], 0),
            Err(TensorError::MissingTensor { .. })
        ));
        assert!(matches!(aggregate_weighted_mean(&[], 0), Err(TensorError::EmptyInput)));
        let zero = contribution("two", 0.0, vec![1.0, 2.0]);
        assert!(matches!(
            aggregate_weighted_mean(&[a, zero], 0),
            Err(TensorError::InvalidWeight(_))
        ));
    }

    #[test]
    fn input_order_does_not_matter() {
        let a = contribution("one", 2.0, vec![0.3, 0.7]);
        let b = contribution("two", 5.0, vec![0.11, -0.9]);
        let c = contribution("three", 1.5, vec![10.0, 1e-3]);
        let x = aggregate_weighted_mean(&[a.clone(), b.clone(), c.clone()], 0).unwrap();
        let y = aggregate_weighted_mean(&[c, a, b], 0).unwrap();
        assert_eq!(x, y);
    }

    fn contributions_strategy() -> impl Strategy<Value = Vec<(f64, Vec<f32>)>> {
        (1usize..6, 1usize..16).prop_flat_map(|(n, len)| {
            prop::collection::vec(
                (0.01f64..1000.0, prop::collection::vec(-1e3f32..1e3, len)),
                n,
            )
        })
    }

    fn build(raw: &[(f64, Vec<f32>)], scale: f64) -> Vec<WeightedContribution> {
        raw.iter()
            .enumerate()
            .map(|(i, (w, d))| contribution(&format!("c{i}"), w * scale, d.clone()))
            .collect()
    }

    proptest! {
        #[test]
        fn output_is_convex(raw in contributions_strategy()) {
            let out = aggregate_weighted_mean(&build(&raw, 1.0), 0).unwrap();
            for (j, v) in out[0].data.iter().enumerate() {
                let lo = raw.iter().map(|(_, d)| d[j]).fold(f32::INFINITY, f32::min);
                let hi = raw.iter().map(|(_, d)| d[j]).fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(*v >= lo && *v <= hi, "{} not in [{}, {}]", v, lo, hi);
            }
        }

        #[test]
        fn equal_weights_give_arithmetic_mean(raw in contributions_strategy()) {
            let equal: Vec<(f64, Vec<f32>)> = raw.iter().map(|(_, d)| (1.0, d.clone())).collect();
            let out = aggregate_weighted_mean(&build(&equal, 1.0), 0).unwrap();
            for (j, v) in out[0].data.iter().enumerate() {
                let mean = equal.iter().map(|(_, d)| f64::from(d[j])).sum::<f64>() / equal.len() as f64;
                let tol = 1e-7 * mean.abs() + 1e-12;
                prop_assert!((f64::from(*v) - mean).abs() <= tol, "{} vs {}", v, mean);
            }
        }

        #[test]
        fn weight_scale_does_not_change_bits(raw in contributions_strategy(), scale in prop::sample::select(vec![0.5, 2.0, 4.0, 1024.0])) {
            let a = aggregate_weighted_mean(&build(&raw, 1.0), 0).unwrap();
            let b = aggregate_weighted_mean(&build(&raw, scale), 0).unwrap();
            let bits = |t: &Vec<NamedTensor>| t[0].data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
        }
    }
}
