//! Synthetic multi-session worlds and CSV ingestion of precomputed features.
//!
//! Each place class owns an L1-normalized prototype shaped like a reciprocal
//! rank profile over a random permutation of the feature dimensions, which is
//! the geometry of a classifier's class-probability map. A session perturbs
//! every prototype with its own drift vector; samples are Dirichlet draws
//! around the drifted prototype.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::sampler::rrf;
use crate::seed::rng_for;
use crate::types::{l1_normalize, ClassId, Dataset, FeatureVector, LabeledSample, PlaceClassSet};

const STREAM_PROTOTYPE: u64 = 1;
const STREAM_DRIFT: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

/// Dirichlet shape of the session drift direction.
const DRIFT_SHAPE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub class_set: PlaceClassSet,
    pub feature_dim: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub concentration: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionSpec {
    pub session_id: u64,
    pub visited_classes: BTreeSet<ClassId>,
    pub drift_magnitude: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SessionSpec {
    /// A session visiting every class of `world`.
    pub fn all_classes(
        world: &WorldModel,
        session_id: u64,
        drift_magnitude: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Self {
        Self {
            session_id,
            visited_classes: world.class_set.ids().collect(),
            drift_magnitude,
            samples_per_class,
            seed,
        }
    }
}

pub fn build_world(
    num_classes: usize,
    feature_dim: usize,
    concentration: f64,
    seed: u64,
) -> Result<WorldModel> {
    build_world_with_classes(PlaceClassSet::numbered(num_classes)?, feature_dim, concentration, seed)
}

/// Like [`build_world`] but over an existing class set, e.g. one produced by
/// a partition.
pub fn build_world_with_classes(
    class_set: PlaceClassSet,
    feature_dim: usize,
    concentration: f64,
    seed: u64,
) -> Result<WorldModel> {
    if feature_dim < 2 {
        return Err(Error::Construction(format!(
            "feature dimension must be at least 2, got {feature_dim}"
        )));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::Construction(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(class_set.len());
    for c in 0..class_set.len() {
        let mut attempt = 0u64;
        let proto = loop {
            let mut rng = rng_for(seed, &[STREAM_PROTOTYPE, c as u64, attempt]);
            let u: Vec<f64> = (0..feature_dim).map(|_| rng.random::<f64>()).collect();
            let candidate = l1_normalize(&rrf(&u))?;
            if !prototypes.contains(&candidate) {
                break candidate;
            }
            attempt += 1;
        };
        prototypes.push(proto);
    }
    Ok(WorldModel {
        class_set,
        feature_dim,
        prototypes,
        concentration,
        seed,
    })
}

impl WorldModel {
    pub fn num_classes(&self) -> usize {
        self.class_set.len()
    }

    /// Class mean in session `session_id` under drift of the given magnitude.
    pub fn session_prototype(&self, class: ClassId, session_id: u64, drift_magnitude: f64) -> Result<Vec<f64>> {
        let proto = self
            .prototypes
            .get(class.0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {class}")))?;
        if drift_magnitude == 0.0 {
            return Ok(proto.clone());
        }
        let mut rng = rng_for(self.seed, &[STREAM_DRIFT, session_id, class.0 as u64]);
        let direction = dirichlet(&mut rng, &vec![DRIFT_SHAPE; self.feature_dim])?;
        let shifted: Vec<f64> = proto
            .iter()
            .zip(&direction)
            .map(|(p, d)| p + drift_magnitude * d)
            .collect();
        l1_normalize(&shifted)
    }
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Result<Vec<f64>> {
    let gammas: Vec<Gamma<f64>> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::Numeric(format!("gamma shape {a}: {e}"))))
        .collect::<Result<_>>()?;
    for _ in 0..64 {
        let draw: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        if draw.iter().any(|v| *v > 0.0) {
            return l1_normalize(&draw);
        }
    }
    Err(Error::Numeric("dirichlet draw underflowed repeatedly".into()))
}

pub fn generate_session(world: &WorldModel, spec: &SessionSpec) -> Result<Dataset> {
    if spec.visited_classes.is_empty() {
        return Err(Error::Empty("visited classes"));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::InvalidArgument("samples_per_class must be positive".into()));
    }
    if !(spec.drift_magnitude >= 0.0 && spec.drift_magnitude.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "drift magnitude must be non-negative, got {}",
            spec.drift_magnitude
        )));
    }
    let mut samples = Vec::with_capacity(spec.visited_classes.len() * spec.samples_per_class);
    for &class in &spec.visited_classes {
        if !world.class_set.contains(class) {
            return Err(Error::InvalidArgument(format!(
                "visited class {class} is not in the world"
            )));
        }
        let mean = world.session_prototype(class, spec.session_id, spec.drift_magnitude)?;
        let alpha: Vec<f64> = mean.iter().map(|m| (m * world.concentration).max(1e-3)).collect();
        let mut rng = rng_for(
            world.seed,
            &[STREAM_SAMPLE, spec.seed, spec.session_id, class.0 as u64],
        );
        for _ in 0..spec.samples_per_class {
            samples.push(LabeledSample {
                x: FeatureVector::new(dirichlet(&mut rng, &alpha)?)?,
                y: class,
            });
        }
    }
    Dataset::new(world.class_set.clone(), samples)
}

/// Write `data` as CSV: a `label` column holding class labels, then
/// `f0..f{D-1}`.
pub fn write_csv_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let dim = data.feature_dim().unwrap_or(0);
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    writer.write_record(&header).map_err(|e| csv_io(path, e))?;
    for s in data.samples() {
        let mut record = Vec::with_capacity(dim + 1);
        record.push(data.class_set().label(s.y).unwrap_or_default().to_string());
        record.extend(s.x.as_slice().iter().map(|v| v.to_string()));
        writer.write_record(&record).map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Ingestion {
            path: path.to_path_buf(),
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Load a CSV of precomputed features. Class labels are mapped to dense ids
/// in first-observation order. An empty `feature_columns` selects every
/// column other than `class_column`.
pub fn load_csv_dataset(path: &Path, class_column: &str, feature_columns: &[String]) -> Result<Dataset> {
    let (labels, features) = read_csv_rows(path, class_column, feature_columns)?;
    let mut ids: HashMap<String, ClassId> = HashMap::new();
    let mut names = Vec::new();
    let mut ys = Vec::with_capacity(labels.len());
    for label in labels {
        let next = ClassId(names.len());
        let id = *ids.entry(label.clone()).or_insert_with(|| {
            names.push(label);
            next
        });
        ys.push(id);
    }
    let class_set = PlaceClassSet::new(names).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    })?;
    assemble(class_set, ys, features)
}

/// Load a CSV whose labels must belong to a known class set, so that ids
/// agree across files.
pub fn load_csv_dataset_with_classes(
    path: &Path,
    class_set: &PlaceClassSet,
    class_column: &str,
    feature_columns: &[String],
) -> Result<Dataset> {
    let (labels, features) = read_csv_rows(path, class_column, feature_columns)?;
    let ids: HashMap<&str, ClassId> = class_set
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), ClassId(i)))
        .collect();
    let ys = labels
        .iter()
        .enumerate()
        .map(|(row, l)| {
            ids.get(l.as_str()).copied().ok_or_else(|| Error::Ingestion {
                path: path.to_path_buf(),
                row: row + 2,
                message: format!("unknown class label `{l}`"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(class_set.clone(), ys, features)
}

fn assemble(class_set: PlaceClassSet, ys: Vec<ClassId>, features: Vec<FeatureVector>) -> Result<Dataset> {
    let samples = ys
        .into_iter()
        .zip(features)
        .map(|(y, x)| LabeledSample { x, y })
        .collect();
    Dataset::new(class_set, samples)
}

/// Row numbers in errors count the header as row 1.
fn read_csv_rows(
    path: &Path,
    class_column: &str,
    feature_columns: &[String],
) -> Result<(Vec<String>, Vec<FeatureVector>)> {
    let ingest = |row: usize, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header = reader.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingest(1, format!("unknown column `{name}`")))
    };
    let class_idx = position(class_column)?;
    let feature_idx: Vec<usize> = if feature_columns.is_empty() {
        (0..header.len()).filter(|&i| i != class_idx).collect()
    } else {
        feature_columns.iter().map(|c| position(c)).collect::<Result<_>>()?
    };
    if feature_idx.is_empty() {
        return Err(ingest(1, "no feature columns".into()));
    }

    let mut labels = Vec::new();
    let mut features = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| ingest(row, e.to_string()))?;
        if record.len() != header.len() {
            return Err(ingest(
                row,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        labels.push(record[class_idx].to_string());
        let values = feature_idx
            .iter()
            .map(|&j| {
                record[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| ingest(row, format!("non-numeric feature `{}` in column `{}`", &record[j], &header[j])))
            })
            .collect::<Result<Vec<_>>>()?;
        features.push(FeatureVector::new(values).map_err(|e| ingest(row, e.to_string()))?);
    }
    if labels.is_empty() {
        return Err(ingest(1, "no data rows".into()));
    }
    Ok((labels, features))
}
