//! Shared domain types and the elementary vector operations used throughout
//! the crate: simplex normalization, Shannon entropy and argmax.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};

/// Absolute tolerance on the sum-to-one constraint of a distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Index of a place class within a [`PlaceClassSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered set of opaque place descriptors. Position in the list is the
/// [`ClassId`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaceClassSet {
    labels: Vec<String>,
}

impl PlaceClassSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Construction(format!(
                "a place class set needs at least 2 classes, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::with_capacity(labels.len());
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::Construction(format!("duplicate class label `{label}`")));
            }
        }
        Ok(Self { labels })
    }

    /// Classes labelled `"0"`, `"1"`, ... `"n-1"`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: ClassId) -> Option<&str> {
        self.labels.get(id.0).map(String::as_str)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.0 < self.labels.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.labels.len()).map(ClassId)
    }
}

/// An embedding vector. Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("feature vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "feature entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A class posterior `P(y | x)`: non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution(Vec<f64>);

impl PredictionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs)?;
        Ok(Self(probs))
    }

    /// One-hot distribution on `class` over `num_classes` entries.
    pub fn one_hot(class: ClassId, num_classes: usize) -> Result<Self> {
        if class.0 >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut probs = vec![0.0; num_classes];
        probs[class.0] = 1.0;
        Ok(Self(probs))
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Empty("distribution"));
        }
        Ok(Self(vec![1.0 / num_classes as f64; num_classes]))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.0)
    }

    pub fn top1(&self) -> ClassId {
        top1(self)
    }
}

impl AsRef<[f64]> for PredictionDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn validate_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("no entries".into()));
    }
    if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "entry {i} = {} is negative or not finite",
            probs[i]
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// A hard-labelled training example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub x: FeatureVector,
    pub y: ClassId,
}

/// A reconstructed example: an input paired with the response it elicited.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSample {
    pub x: FeatureVector,
    pub soft: PredictionDistribution,
}

impl PseudoSample {
    /// Lift a hard label to a one-hot soft target.
    pub fn from_labeled(sample: &LabeledSample, num_classes: usize) -> Result<Self> {
        Ok(Self {
            x: sample.x.clone(),
            soft: PredictionDistribution::one_hot(sample.y, num_classes)?,
        })
    }
}

/// Hard-labelled samples over a class set, indexed by class.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    class_set: PlaceClassSet,
    per_class_index: BTreeMap<ClassId, Vec<usize>>,
}

impl Dataset {
    pub fn new(class_set: PlaceClassSet, samples: Vec<LabeledSample>) -> Result<Self> {
        let mut per_class_index: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        let dim = samples.first().map(|s| s.x.dim());
        for (i, s) in samples.iter().enumerate() {
            if !class_set.contains(s.y) {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has class {} outside a set of {} classes",
                    s.y,
                    class_set.len()
                )));
            }
            if Some(s.x.dim()) != dim {
                return Err(Error::dim(dim.unwrap_or(0), s.x.dim(), "dataset sample"));
            }
            per_class_index.entry(s.y).or_default().push(i);
        }
        Ok(Self {
            samples,
            class_set,
            per_class_index,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn class_set(&self) -> &PlaceClassSet {
        &self.class_set
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature dimension, or `None` for an empty dataset.
    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.dim())
    }

    /// Sample indices of `class`, in dataset order.
    pub fn indices_of(&self, class: ClassId) -> &[usize] {
        self.per_class_index
            .get(&class)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Classes with at least one sample, ascending.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.per_class_index.keys().copied()
    }

    pub fn per_class_index(&self) -> &BTreeMap<ClassId, Vec<usize>> {
        &self.per_class_index
    }

    /// Samples whose class is in `keep`, order preserved.
    pub fn restrict_to(&self, keep: &BTreeSet<ClassId>) -> Dataset {
        let samples = self
            .samples
            .iter()
            .filter(|s| keep.contains(&s.y))
            .cloned()
            .collect();
        Dataset::new(self.class_set.clone(), samples).expect("subset of a valid dataset")
    }

    /// The first `per_class` samples of every class, grouped by ascending class.
    pub fn head_per_class(&self, per_class: usize) -> Vec<&LabeledSample> {
        self.per_class_index
            .values()
            .flat_map(|idx| idx.iter().take(per_class).map(|&i| &self.samples[i]))
            .collect()
    }

    /// Concatenate two datasets over the same class set.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.class_set != other.class_set {
            return Err(Error::InvalidArgument(
                "cannot concatenate datasets over different class sets".into(),
            ));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Dataset::new(self.class_set.clone(), samples)
    }
}

/// Communication counters for one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostLedger {
    pub pseudo_samples_sent: u64,
    pub bytes_sent: u64,
    pub queries_issued: u64,
}

impl CostLedger {
    pub fn record_query(&mut self) {
        self.queries_issued += 1;
    }

    pub fn record_pseudo_samples(&mut self, count: u64, bytes: u64) {
        self.pseudo_samples_sent += count;
        self.bytes_sent += bytes;
    }

    /// Counter growth since `earlier`. Panics in debug builds if any counter
    /// went backwards.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        debug_assert!(self.pseudo_samples_sent >= earlier.pseudo_samples_sent);
        debug_assert!(self.bytes_sent >= earlier.bytes_sent);
        debug_assert!(self.queries_issued >= earlier.queries_issued);
        CostLedger {
            pseudo_samples_sent: self.pseudo_samples_sent - earlier.pseudo_samples_sent,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            queries_issued: self.queries_issued - earlier.queries_issued,
        }
    }
}

impl Add for CostLedger {
    type Output = CostLedger;

    fn add(self, rhs: CostLedger) -> CostLedger {
        CostLedger {
            pseudo_samples_sent: self.pseudo_samples_sent + rhs.pseudo_samples_sent,
            bytes_sent: self.bytes_sent + rhs.bytes_sent,
            queries_issued: self.queries_issued + rhs.queries_issued,
        }
    }
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, rhs: CostLedger) {
        *self = *self + rhs;
    }
}

/// Scale a non-negative vector so its entries sum to one.
pub fn l1_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Normalization("empty vector".into()));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Normalization(format!(
            "entry {i} = {} is negative or not finite",
            v[i]
        )));
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Normalization("all entries are zero".into()));
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| -q * q.ln())
        .sum();
    h.max(0.0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn top1(p: &PredictionDistribution) -> ClassId {
    ClassId(argmax(p.as_slice()))
}

/// Argmax with lowest-index tie-breaking. Returns 0 for an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
