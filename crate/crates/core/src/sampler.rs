//! Black-box dataset reconstruction.
//!
//! A student rebuilds a pseudo-training set `{(x, P(y|x))}` from a teacher it
//! can only query. Strategies differ in where the query inputs come from:
//!
//! * `US`: uniform vectors, L1-normalized.
//! * `RR`: uniform vectors mapped to reciprocal-rank features.
//! * `Entropy`: an oversampled RR pool, keeping the lowest-entropy responses.
//! * `Replay`: inputs retained alongside the teacher.
//! * `Prior`: the student's own retained inputs.
//! * `Mixup`: `R` replayed inputs per class plus `N − R` from RR or Entropy.
//!
//! RR-family inputs can be sparsified to their `k` best ranks, which admits a
//! fixed-width index encoding.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::BlackBoxHandle;
use crate::seed::rng_for;
use crate::types::{l1_normalize, CostLedger, Dataset, FeatureVector, PredictionDistribution, PseudoSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Uniform,
    ReciprocalRank,
    Entropy,
    Replay,
    Prior,
    Mixup,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Uniform,
        Strategy::ReciprocalRank,
        Strategy::Entropy,
        Strategy::Replay,
        Strategy::Prior,
        Strategy::Mixup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "US",
            Strategy::ReciprocalRank => "RR",
            Strategy::Entropy => "Entropy",
            Strategy::Replay => "Replay",
            Strategy::Prior => "Prior",
            Strategy::Mixup => "Mixup",
        }
    }

    /// Whether models keep their training set after training under this
    /// strategy. Purely black-box strategies discard it.
    pub fn retains_training_data(self) -> bool {
        matches!(self, Strategy::Replay | Strategy::Prior | Strategy::Mixup)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Source of the non-replayed part of a Mixup set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseStrategy {
    ReciprocalRank,
    Entropy,
}

impl FromStr for BaseStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Strategy::from_str(s)? {
            Strategy::ReciprocalRank => Ok(BaseStrategy::ReciprocalRank),
            Strategy::Entropy => Ok(BaseStrategy::Entropy),
            other => Err(Error::Config(format!("`{other}` cannot be a Mixup base strategy"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Pseudo-samples per place class (`N`).
    pub n_per_class: usize,
    pub strategy: Strategy,
    /// Entropy pool size as a multiple of the requested count.
    pub oversample_factor: f64,
    /// Replayed samples per class in Mixup (`R`).
    pub replay_count: usize,
    /// Sparsify RR-family inputs to their `k` best ranks.
    pub khot_k: Option<usize>,
    pub base_strategy: BaseStrategy,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_per_class: 10,
            strategy: Strategy::ReciprocalRank,
            oversample_factor: 10.0,
            replay_count: 1,
            khot_k: None,
            base_strategy: BaseStrategy::ReciprocalRank,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if !(self.oversample_factor >= 1.0 && self.oversample_factor.is_finite()) {
            return Err(Error::Config(format!(
                "oversample factor must be >= 1, got {}",
                self.oversample_factor
            )));
        }
        if self.strategy == Strategy::Mixup
            && (self.replay_count == 0 || self.replay_count > self.n_per_class)
        {
            return Err(Error::Config(format!(
                "Mixup needs 1 <= R <= N, got R = {} and N = {}",
                self.replay_count, self.n_per_class
            )));
        }
        if let Some(k) = self.khot_k {
            if k == 0 || k > dim {
                return Err(Error::Config(format!("k-hot k = {k} must be in 1..={dim}")));
            }
        }
        Ok(())
    }
}

/// Uniform draws on `[0, 1)^dim`, each L1-normalized.
pub fn sample_us(n: usize, dim: usize, seed: u64) -> Result<Vec<FeatureVector>> {
    if n == 0 || dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "uniform sampling needs n >= 1 and dim >= 2 (n = {n}, dim = {dim})"
        )));
    }
    let mut rng = rng_for(seed, &[0x05]);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        if let Ok(v) = l1_normalize(&u) {
            out.push(FeatureVector::new(v)?);
        }
    }
    Ok(out)
}

/// Rank order of `x`: indices sorted by descending value, ties to the lower
/// index.
fn rank_order(x: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    order
}

/// Reciprocal-rank feature: entry `i` becomes `1 / rank(x_i)`, the largest
/// entry having rank 1.
pub fn rrf(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, i) in rank_order(x).into_iter().enumerate() {
        out[i] = 1.0 / (r + 1) as f64;
    }
    out
}

/// [`sample_us`] mapped through [`rrf`].
pub fn sample_rr(n: usize, dim: usize, seed: u64) -> Result<Vec<FeatureVector>> {
    sample_us(n, dim, seed)?
        .into_iter()
        .map(|v| FeatureVector::new(rrf(v.as_slice())))
        .collect()
}

/// The `k` best-ranked dimensions of an RRF vector, best first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KHotRrf {
    indices: Vec<usize>,
}

impl KHotRrf {
    pub fn new(indices: Vec<usize>, dim: usize) -> Result<Self> {
        let mut seen = vec![false; dim];
        for &i in &indices {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::InvalidArgument(format!("duplicate k-hot index {i}"))),
                None => return Err(Error::InvalidArgument(format!("k-hot index {i} >= {dim}"))),
            }
        }
        if indices.is_empty() {
            return Err(Error::Empty("k-hot indices"));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

pub fn khot_sparsify(rrf_vec: &[f64], k: usize) -> Result<KHotRrf> {
    if k == 0 || k > rrf_vec.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            rrf_vec.len()
        )));
    }
    let mut order = rank_order(rrf_vec);
    order.truncate(k);
    KHotRrf::new(order, rrf_vec.len())
}

/// Values `1, 1/2, ..., 1/k` at the k-hot indices, zeros elsewhere,
/// L1-normalized.
pub fn khot_densify(khot: &KHotRrf, dim: usize) -> Result<FeatureVector> {
    if khot.indices.iter().any(|&i| i >= dim) {
        return Err(Error::InvalidArgument(format!("k-hot index out of range for dim {dim}")));
    }
    let mut v = vec![0.0; dim];
    for (r, &i) in khot.indices.iter().enumerate() {
        v[i] = 1.0 / (r + 1) as f64;
    }
    FeatureVector::new(l1_normalize(&v)?)
}

/// Bits per index: `ceil(log2 dim)`.
pub fn index_width(dim: usize) -> u32 {
    if dim <= 1 {
        0
    } else {
        usize::BITS - (dim - 1).leading_zeros()
    }
}

/// A packed bit string, most significant bit first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

impl BitString {
    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::decode("length", format!("{} bytes cannot hold exactly {len} bits", bytes.len())));
        }
        Ok(Self { bytes, len })
    }

    pub fn len_bits(&self) -> usize {
        self.len
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn push(&mut self, value: u64, width: u32) {
        for b in (0..width).rev() {
            if self.len % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                let byte = self.len / 8;
                self.bytes[byte] |= 0x80 >> (self.len % 8);
            }
            self.len += 1;
        }
    }

    fn read(&self, offset: usize, width: u32) -> u64 {
        (0..width as usize).fold(0u64, |acc, j| {
            let bit = offset + j;
            let set = self.bytes[bit / 8] & (0x80 >> (bit % 8)) != 0;
            (acc << 1) | set as u64
        })
    }
}

/// Concatenate the k indices at `ceil(log2 dim)` bits each.
pub fn encode_khot(khot: &KHotRrf, dim: usize) -> Result<BitString> {
    if dim < 2 {
        return Err(Error::InvalidArgument("k-hot encoding needs dim >= 2".into()));
    }
    let width = index_width(dim);
    let mut bits = BitString {
        bytes: Vec::new(),
        len: 0,
    };
    for &i in &khot.indices {
        if i >= dim {
            return Err(Error::InvalidArgument(format!("index {i} >= {dim}")));
        }
        bits.push(i as u64, width);
    }
    Ok(bits)
}

pub fn decode_khot(bits: &BitString, k: usize, dim: usize) -> Result<KHotRrf> {
    let width = index_width(dim);
    if dim < 2 || bits.len != k * width as usize {
        return Err(Error::decode(
            "length",
            format!("expected {} bits for k = {k}, dim = {dim}; got {}", k * width as usize, bits.len),
        ));
    }
    let indices = (0..k).map(|j| bits.read(j * width as usize, width) as usize).collect();
    KHotRrf::new(indices, dim).map_err(|e| Error::decode("indices", e.to_string()))
}

/// Encoded size of one k-hot input in whole bytes.
pub fn khot_bytes(k: usize, dim: usize) -> u64 {
    (k * index_width(dim) as usize).div_ceil(8) as u64
}

/// Query the teacher on every candidate and keep the `n` with the lowest
/// response entropy. Returns the chosen candidate indices (in candidate
/// order) with their responses.
fn select_low_entropy(
    teacher: &mut BlackBoxHandle<'_>,
    candidates: &[FeatureVector],
    n: usize,
) -> Result<Vec<(usize, PredictionDistribution)>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, x) in candidates.iter().enumerate() {
        let response = teacher.query(x)?;
        scored.push((response.entropy(), i, response));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(n);
    scored.sort_by_key(|s| s.1);
    Ok(scored.into_iter().map(|(_, i, r)| (i, r)).collect())
}

fn pool_size(n: usize, oversample_factor: f64) -> usize {
    ((n as f64 * oversample_factor).ceil() as usize).max(n)
}

/// Entropy strategy over plain RR candidates.
pub fn sample_entropy(
    teacher: &mut BlackBoxHandle<'_>,
    n: usize,
    dim: usize,
    oversample_factor: f64,
    seed: u64,
) -> Result<Vec<PseudoSample>> {
    if !(oversample_factor >= 1.0) {
        return Err(Error::InvalidArgument("oversample factor must be >= 1".into()));
    }
    let candidates = sample_rr(pool_size(n, oversample_factor), dim, seed)?;
    let chosen = select_low_entropy(teacher, &candidates, n)?;
    Ok(chosen
        .into_iter()
        .map(|(i, soft)| PseudoSample {
            x: candidates[i].clone(),
            soft,
        })
        .collect())
}

/// Query the teacher on the first `min(n, count)` retained inputs of every
/// class, classes ascending.
pub fn sample_replay(retained: &Dataset, teacher: &mut BlackBoxHandle<'_>, n: usize) -> Result<Vec<PseudoSample>> {
    if retained.is_empty() {
        return Err(Error::Config("replay needs a non-empty retained set".into()));
    }
    retained
        .head_per_class(n)
        .into_iter()
        .map(|s| {
            Ok(PseudoSample {
                x: s.x.clone(),
                soft: teacher.query(&s.x)?,
            })
        })
        .collect()
}

/// Replay over the student's retained inputs.
pub fn sample_prior(
    student_retained: &Dataset,
    teacher: &mut BlackBoxHandle<'_>,
    n: usize,
) -> Result<Vec<PseudoSample>> {
    sample_replay(student_retained, teacher, n)
}

/// RR-family query inputs, optionally sparsified.
fn rr_inputs(count: usize, dim: usize, khot: Option<usize>, seed: u64) -> Result<Vec<(FeatureVector, Option<KHotRrf>)>> {
    sample_rr(count, dim, seed)?
        .into_iter()
        .map(|v| match khot {
            Some(k) => {
                let code = khot_sparsify(v.as_slice(), k)?;
                Ok((khot_densify(&code, dim)?, Some(code)))
            }
            None => Ok((v, None)),
        })
        .collect()
}

/// Pseudo-samples with the k-hot code of their input, when there is one.
type Coded = Vec<(PseudoSample, Option<KHotRrf>)>;

fn base_samples(
    teacher: &mut BlackBoxHandle<'_>,
    base: BaseStrategy,
    count: usize,
    oversample_factor: f64,
    khot: Option<usize>,
    seed: u64,
) -> Result<Coded> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let dim = teacher.input_dim();
    let pool = match base {
        BaseStrategy::ReciprocalRank => count,
        BaseStrategy::Entropy => pool_size(count, oversample_factor),
    };
    let candidates = rr_inputs(pool, dim, khot, seed)?;
    match base {
        BaseStrategy::ReciprocalRank => candidates
            .into_iter()
            .map(|(x, code)| {
                let soft = teacher.query(&x)?;
                Ok((PseudoSample { x, soft }, code))
            })
            .collect(),
        BaseStrategy::Entropy => {
            let xs: Vec<FeatureVector> = candidates.iter().map(|c| c.0.clone()).collect();
            let chosen = select_low_entropy(teacher, &xs, count)?;
            Ok(chosen
                .into_iter()
                .map(|(i, soft)| {
                    let (x, code) = candidates[i].clone();
                    (PseudoSample { x, soft }, code)
                })
                .collect())
        }
    }
}

fn mixup_coded(
    retained: &Dataset,
    teacher: &mut BlackBoxHandle<'_>,
    n: usize,
    replay_count: usize,
    base: BaseStrategy,
    oversample_factor: f64,
    khot: Option<usize>,
    seed: u64,
) -> Result<Coded> {
    if replay_count == 0 || replay_count > n {
        return Err(Error::Config(format!("Mixup needs 1 <= R <= N (R = {replay_count}, N = {n})")));
    }
    if retained.is_empty() {
        return Err(Error::Config("Mixup needs a non-empty retained set".into()));
    }
    for (class, idx) in retained.per_class_index() {
        if idx.len() < replay_count {
            return Err(Error::Config(format!(
                "class {class} has {} retained samples, Mixup needs {replay_count}",
                idx.len()
            )));
        }
    }
    let covered = retained.per_class_index().len();
    let mut out: Coded = sample_replay(retained, teacher, replay_count)?
        .into_iter()
        .map(|s| (s, None))
        .collect();
    out.extend(base_samples(
        teacher,
        base,
        (n - replay_count) * covered,
        oversample_factor,
        khot,
        seed,
    )?);
    Ok(out)
}

/// Mixup: `R` replayed pseudo-samples per covered class followed by
/// `(N − R)` per covered class from the base strategy.
pub fn sample_mixup(
    retained: &Dataset,
    teacher: &mut BlackBoxHandle<'_>,
    n: usize,
    replay_count: usize,
    base: BaseStrategy,
    seed: u64,
) -> Result<Vec<PseudoSample>> {
    Ok(mixup_coded(retained, teacher, n, replay_count, base, 10.0, None, seed)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// Inputs a strategy may need besides the teacher.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReconstructionContext<'a> {
    /// Training samples bundled with the queried model (Replay, Mixup).
    pub teacher_retained: Option<&'a Dataset>,
    /// The student's own retained samples (Prior).
    pub student_retained: Option<&'a Dataset>,
    /// Number of classes the queried model covers; sizes US/RR/Entropy sets.
    pub classes_covered: usize,
}

/// A reconstructed pseudo-training set with its cost.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSet {
    pub strategy: Strategy,
    pub seed: u64,
    pub input_dim: usize,
    pub khot_k: Option<usize>,
    pub samples: Vec<PseudoSample>,
    /// Per-sample k-hot code, `None` for densely transmitted inputs.
    pub codes: Vec<Option<KHotRrf>>,
    pub ledger_delta: CostLedger,
}

impl PseudoSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Wire size of one pseudo-sample: the input (k-hot code or dense `f64`s)
/// plus the response as `f64`s.
pub fn pseudo_sample_bytes(code: Option<&KHotRrf>, input_dim: usize, num_classes: usize) -> u64 {
    let input = match code {
        Some(c) => khot_bytes(c.k(), input_dim),
        None => 8 * input_dim as u64,
    };
    input + 8 * num_classes as u64
}

/// Reconstruct a pseudo-set from `teacher` with the configured strategy and
/// charge the teacher's ledger for every pseudo-sample returned.
pub fn reconstruct_pseudo_set(
    teacher: &mut BlackBoxHandle<'_>,
    config: &SamplerConfig,
    context: &ReconstructionContext<'_>,
) -> Result<PseudoSet> {
    let dim = teacher.input_dim();
    config.validate(dim)?;
    let start = teacher.ledger();
    let n = config.n_per_class;
    fn require<'d>(set: Option<&'d Dataset>, strategy: Strategy, what: &str) -> Result<&'d Dataset> {
        set.filter(|d| !d.is_empty())
            .ok_or_else(|| Error::Config(format!("{strategy} strategy needs {what}")))
    }
    let total = n * context.classes_covered;

    let coded: Coded = match config.strategy {
        Strategy::Uniform => {
            if total == 0 {
                Vec::new()
            } else {
                sample_us(total, dim, config.seed)?
                    .into_iter()
                    .map(|x| {
                        let soft = teacher.query(&x)?;
                        Ok((PseudoSample { x, soft }, None))
                    })
                    .collect::<Result<_>>()?
            }
        }
        Strategy::ReciprocalRank => base_samples(
            teacher,
            BaseStrategy::ReciprocalRank,
            total,
            config.oversample_factor,
            config.khot_k,
            config.seed,
        )?,
        Strategy::Entropy => base_samples(
            teacher,
            BaseStrategy::Entropy,
            total,
            config.oversample_factor,
            config.khot_k,
            config.seed,
        )?,
        Strategy::Replay => {
            let retained = require(context.teacher_retained, config.strategy, "data retained with the teacher")?;
            sample_replay(retained, teacher, n)?.into_iter().map(|s| (s, None)).collect()
        }
        Strategy::Prior => {
            let retained = require(context.student_retained, config.strategy, "the student's retained data")?;
            sample_prior(retained, teacher, n)?.into_iter().map(|s| (s, None)).collect()
        }
        Strategy::Mixup => {
            let retained = require(context.teacher_retained, config.strategy, "data retained with the teacher")?;
            mixup_coded(
                retained,
                teacher,
                n,
                config.replay_count,
                config.base_strategy,
                config.oversample_factor,
                config.khot_k,
                config.seed,
            )?
        }
    };

    let classes = teacher.output_dim();
    for (_, code) in &coded {
        teacher.record_transfer(1, pseudo_sample_bytes(code.as_ref(), dim, classes));
    }
    let (samples, codes) = coded.into_iter().unzip();
    Ok(PseudoSet {
        strategy: config.strategy,
        seed: config.seed,
        input_dim: dim,
        khot_k: config.khot_k,
        samples,
        codes,
        ledger_delta: teacher.ledger().since(&start),
    })
}

/// Write a pseudo-set dump. The first line is a metadata comment
/// `# D=..,C=..,k=..,strategy=..,seed=..`; columns are `khot` (semicolon-
/// separated indices, empty for dense inputs), `x0..` (empty for k-hot
/// inputs) and the soft targets `p0..`.
pub fn write_pseudo_set_csv(set: &PseudoSet, path: &Path) -> Result<()> {
    let classes = set.samples.first().map_or(0, |s| s.soft.num_classes());
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let k = set.khot_k.map_or_else(|| "none".to_string(), |k| k.to_string());
    writeln!(
        file,
        "# D={},C={},k={},strategy={},seed={}",
        set.input_dim, classes, k, set.strategy, set.seed
    )
    .map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    let mut header = vec!["khot".to_string()];
    header.extend((0..set.input_dim).map(|i| format!("x{i}")));
    header.extend((0..classes).map(|i| format!("p{i}")));
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    writer.write_record(&header).map_err(io)?;
    for (sample, code) in set.samples.iter().zip(&set.codes) {
        let mut record = Vec::with_capacity(header.len());
        match code {
            Some(c) => {
                record.push(c.indices().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"));
                record.extend(std::iter::repeat_n(String::new(), set.input_dim));
            }
            None => {
                record.push(String::new());
                record.extend(sample.x.as_slice().iter().map(|v| v.to_string()));
            }
        }
        record.extend(sample.soft.as_slice().iter().map(|v| v.to_string()));
        writer.write_record(&record).map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Read a dump written by [`write_pseudo_set_csv`]; k-hot inputs are
/// densified. The returned set carries an empty ledger.
pub fn read_pseudo_set_csv(path: &Path) -> Result<PseudoSet> {
    let bad = |row: usize, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        row,
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut meta = String::new();
    reader.read_line(&mut meta).map_err(|e| Error::io(path, e))?;
    let meta = meta
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| bad(1, "missing metadata line".into()))?;
    let mut fields = std::collections::HashMap::new();
    for kv in meta.split(',') {
        let (k, v) = kv
            .trim()
            .split_once('=')
            .ok_or_else(|| bad(1, format!("malformed metadata `{kv}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |key: &str| fields.get(key).ok_or_else(|| bad(1, format!("missing `{key}`")));
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| bad(1, format!("`{key}` is not an integer")))
    };
    let dim = parse_usize("D")?;
    let classes = parse_usize("C")?;
    let khot_k = match get("k")?.as_str() {
        "none" => None,
        v => Some(v.parse().map_err(|_| bad(1, "`k` is not an integer".into()))?),
    };
    let strategy: Strategy = get("strategy")?.parse()?;
    let seed: u64 = get("seed")?.parse().map_err(|_| bad(1, "`seed` is not an integer".into()))?;

    let mut csv_reader = csv::ReaderBuilder::new().from_reader(reader);
    let mut samples = Vec::new();
    let mut codes = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let row = i + 3;
        let record = record.map_err(|e| bad(row, e.to_string()))?;
        if record.len() != 1 + dim + classes {
            return Err(bad(row, format!("expected {} fields, found {}", 1 + dim + classes, record.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(row, format!("non-numeric value `{s}`")));
        let (x, code) = if record[0].is_empty() {
            let values = (1..=dim).map(|j| num(&record[j])).collect::<Result<Vec<_>>>()?;
            (FeatureVector::new(values)?, None)
        } else {
            let indices = record[0]
                .split(';')
                .map(|s| s.parse::<usize>().map_err(|_| bad(row, format!("bad k-hot index `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            let code = KHotRrf::new(indices, dim).map_err(|e| bad(row, e.to_string()))?;
            (khot_densify(&code, dim)?, Some(code))
        };
        let soft = (1 + dim..1 + dim + classes).map(|j| num(&record[j])).collect::<Result<Vec<_>>>()?;
        samples.push(PseudoSample {
            x,
            soft: PredictionDistribution::new(soft).map_err(|e| bad(row, e.to_string()))?,
        });
        codes.push(code);
    }
    Ok(PseudoSet {
        strategy,
        seed,
        input_dim: dim,
        khot_k,
        samples,
        codes,
        ledger_delta: CostLedger::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use crate::models::{Architecture, Classifier, TrainConfig};
    use crate::types::{ClassId, LabeledSample, PlaceClassSet};
    use proptest::prelude::*;

    fn teacher() -> Classifier {
        Classifier::init(Architecture::new(6, 8, 4), 2).unwrap()
    }

    fn retained(per_class: usize, classes: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for &c in classes {
            for j in 0..per_class {
                let mut v = vec![0.1; 6];
                v[c] = 1.0 + j as f64;
                samples.push(LabeledSample {
                    x: FeatureVector::new(l1_normalize(&v).unwrap()).unwrap(),
                    y: ClassId(c),
                });
            }
        }
        Dataset::new(PlaceClassSet::numbered(6).unwrap(), samples).unwrap()
    }

    #[test]
    fn us_outputs_are_normalized_and_reproducible() {
        let a = sample_us(50, 5, 3).unwrap();
        for v in &a {
            assert!((v.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(a, sample_us(50, 5, 3).unwrap());
        assert_ne!(a, sample_us(50, 5, 4).unwrap());
        assert!(sample_us(0, 5, 1).is_err());
        assert!(sample_us(3, 1, 1).is_err());
    }

    #[test]
    fn us_coordinate_means_approach_uniform() {
        let dim = 4;
        let n = 10_000;
        let samples = sample_us(n, dim, 9).unwrap();
        for j in 0..dim {
            let values: Vec<f64> = samples.iter().map(|v| v.as_slice()[j]).collect();
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let bound = 3.0 * (var / n as f64).sqrt();
            assert!((mean - 0.25).abs() <= bound, "coordinate {j}: {mean}");
        }
    }

    #[test]
    fn rrf_examples() {
        assert_eq!(rrf(&[0.5, 0.3, 0.2]), vec![1.0, 0.5, 1.0 / 3.0]);
        assert_eq!(rrf(&[0.2, 0.5, 0.3]), vec![1.0 / 3.0, 1.0, 0.5]);
        assert_eq!(rrf(&[0.4, 0.4]), vec![1.0, 0.5]);
    }

    #[test]
    fn rrf_matches_rank_enumeration() {
        let x = [0.2, 0.5, 0.3, 0.9, 0.1];
        // rank(x_i) = 1 + #{j : x_j > x_i}
        let expected: Vec<f64> = x
            .iter()
            .map(|xi| 1.0 / (1 + x.iter().filter(|xj| *xj > xi).count()) as f64)
            .collect();
        assert_eq!(rrf(&x), expected);
    }

    #[test]
    fn rr_covers_all_permutations_in_three_dims() {
        let samples = sample_rr(600, 3, 12).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            let key: Vec<u64> = s.as_slice().iter().map(|v| v.to_bits()).collect();
            seen.insert(key);
        }
        // All 3! = 6 permutations of (1, 1/2, 1/3).
        assert_eq!(seen.len(), 6);
        assert_eq!(sample_rr(20, 3, 12).unwrap(), samples[..20].to_vec());
    }

    #[test]
    fn entropy_without_oversampling_equals_rr() {
        let model = teacher();
        let mut h1 = BlackBoxHandle::new(&model);
        let selected = sample_entropy(&mut h1, 30, 6, 1.0, 5).unwrap();
        let rr = sample_rr(30, 6, 5).unwrap();
        let mut h2 = BlackBoxHandle::new(&model);
        for (s, x) in selected.iter().zip(&rr) {
            assert_eq!(&s.x, x);
            assert_eq!(s.soft, h2.query(x).unwrap());
        }
        assert_eq!(selected.len(), rr.len());
    }

    #[test]
    fn entropy_selection_dominates_rejected() {
        let model = teacher();
        let mut handle = BlackBoxHandle::new(&model);
        let selected = sample_entropy(&mut handle, 10, 6, 5.0, 8).unwrap();
        assert_eq!(handle.ledger().queries_issued, 50);
        let pool = sample_rr(50, 6, 8).unwrap();
        let max_selected = selected.iter().map(|s| s.soft.entropy()).fold(0.0, f64::max);
        let chosen: Vec<&FeatureVector> = selected.iter().map(|s| &s.x).collect();
        for x in pool.iter().filter(|x| !chosen.contains(x)) {
            assert!(model.predict(x).unwrap().entropy() >= max_selected);
        }
    }

    #[test]
    fn replay_takes_n_per_class() {
        let model = teacher();
        let data = retained(3, &[0, 2]);
        let mut handle = BlackBoxHandle::new(&model);
        let out = sample_replay(&data, &mut handle, 2).unwrap();
        assert_eq!(out.len(), 4);
        let out = sample_replay(&data, &mut handle, 10).unwrap();
        assert_eq!(out.len(), data.len());
        for (s, orig) in out.iter().zip(data.samples()) {
            assert_eq!(s.x, orig.x);
            assert_eq!(s.soft, model.predict(&orig.x).unwrap());
        }
        let empty = Dataset::new(PlaceClassSet::numbered(6).unwrap(), vec![]).unwrap();
        assert!(sample_replay(&empty, &mut handle, 1).is_err());
    }

    #[test]
    fn prior_counts_queries() {
        let model = teacher();
        let data = retained(5, &[1]);
        let mut handle = BlackBoxHandle::new(&model);
        let out = sample_prior(&data, &mut handle, 4).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(handle.ledger().queries_issued, 4);
    }

    #[test]
    fn mixup_decomposes_into_replay_and_base() {
        let model = teacher();
        let data = retained(3, &[0, 3, 4]);
        let mut handle = BlackBoxHandle::new(&model);
        let out = sample_mixup(&data, &mut handle, 10, 1, BaseStrategy::ReciprocalRank, 4).unwrap();
        assert_eq!(out.len(), 30);
        let replayed = data.head_per_class(1);
        for (s, r) in out.iter().zip(&replayed) {
            assert_eq!(s.x, r.x);
        }
        let base = sample_rr(27, 6, 4).unwrap();
        for (s, b) in out[3..].iter().zip(&base) {
            assert_eq!(&s.x, b);
        }

        let mut h = BlackBoxHandle::new(&model);
        let all_replay = sample_mixup(&data, &mut h, 3, 3, BaseStrategy::Entropy, 4).unwrap();
        let mut h2 = BlackBoxHandle::new(&model);
        assert_eq!(all_replay, sample_replay(&data, &mut h2, 3).unwrap());

        assert!(sample_mixup(&data, &mut h, 10, 4, BaseStrategy::ReciprocalRank, 0).is_err());
        assert!(sample_mixup(&data, &mut h, 2, 3, BaseStrategy::ReciprocalRank, 0).is_err());
    }

    #[test]
    fn khot_examples() {
        let x = rrf(&[0.1, 0.7, 0.2]);
        let code = khot_sparsify(&x, 3).unwrap();
        assert_eq!(code.indices(), &[1, 2, 0]);
        let dense = khot_densify(&code, 3).unwrap();
        let expected = l1_normalize(&x).unwrap();
        for (a, b) in dense.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(khot_sparsify(&x, 4).is_err());

        let big = sample_rr(1, 100, 3).unwrap().remove(0);
        let code = khot_sparsify(big.as_slice(), 10).unwrap();
        let dense = khot_densify(&code, 100).unwrap();
        assert_eq!(dense.as_slice().iter().filter(|v| **v > 0.0).count(), 10);
        assert_eq!(crate::types::argmax(dense.as_slice()), crate::types::argmax(big.as_slice()));
    }

    #[test]
    fn encoding_widths() {
        assert_eq!(index_width(100), 7);
        assert_eq!(index_width(128), 7);
        assert_eq!(index_width(129), 8);
        assert_eq!(index_width(2), 1);
        let code = KHotRrf::new((0..10).map(|i| i * 9).collect(), 100).unwrap();
        let bits = encode_khot(&code, 100).unwrap();
        assert_eq!(bits.len_bits(), 70);
        assert_eq!(bits.as_bytes().len(), 9);
        assert_eq!(decode_khot(&bits, 10, 100).unwrap(), code);

        let one = KHotRrf::new(vec![1], 2).unwrap();
        let bits = encode_khot(&one, 2).unwrap();
        assert_eq!(bits.len_bits(), 1);
        assert_eq!(bits.as_bytes(), &[0x80]);
        assert_eq!(decode_khot(&bits, 1, 2).unwrap(), one);
        assert!(decode_khot(&bits, 2, 2).is_err());
    }

    #[test]
    fn encoding_is_big_endian() {
        let code = KHotRrf::new(vec![5, 2], 8).unwrap();
        let bits = encode_khot(&code, 8).unwrap();
        // 101 010 -> 1010_1000
        assert_eq!(bits.as_bytes(), &[0b1010_1000]);
    }

    #[test]
    fn reconstruct_dispatch_and_accounting() {
        let model = teacher();
        let mut handle = BlackBoxHandle::new(&model);
        let cfg = SamplerConfig {
            n_per_class: 3,
            strategy: Strategy::Uniform,
            ..SamplerConfig::default()
        };
        let ctx = ReconstructionContext {
            classes_covered: 4,
            ..Default::default()
        };
        let set = reconstruct_pseudo_set(&mut handle, &cfg, &ctx).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.ledger_delta.pseudo_samples_sent, 12);
        assert_eq!(set.ledger_delta.bytes_sent, 12 * (8 * 6 + 8 * 4));

        let replay = SamplerConfig {
            strategy: Strategy::Replay,
            ..cfg.clone()
        };
        assert!(matches!(
            reconstruct_pseudo_set(&mut handle, &replay, &ctx),
            Err(Error::Config(_))
        ));

        let khot = SamplerConfig {
            strategy: Strategy::Entropy,
            khot_k: Some(3),
            oversample_factor: 4.0,
            ..cfg.clone()
        };
        let before = handle.ledger();
        let set = reconstruct_pseudo_set(&mut handle, &khot, &ctx).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.ledger_delta.queries_issued, 48);
        assert_eq!(set.ledger_delta.pseudo_samples_sent, 12);
        // 3 indices x ceil(log2 6) = 9 bits -> 2 bytes, plus 4 f64 targets.
        assert_eq!(set.ledger_delta.bytes_sent, 12 * (2 + 32));
        assert_eq!(handle.ledger().since(&before), set.ledger_delta);
        for (s, c) in set.samples.iter().zip(&set.codes) {
            assert_eq!(s.x, khot_densify(c.as_ref().unwrap(), 6).unwrap());
        }
    }

    #[test]
    fn pseudo_set_dump_round_trip() {
        let model = teacher();
        let data = retained(2, &[0, 1]);
        let mut handle = BlackBoxHandle::new(&model);
        let cfg = SamplerConfig {
            n_per_class: 3,
            strategy: Strategy::Mixup,
            replay_count: 1,
            khot_k: Some(4),
            seed: 11,
            ..SamplerConfig::default()
        };
        let ctx = ReconstructionContext {
            teacher_retained: Some(&data),
            classes_covered: 2,
            ..Default::default()
        };
        let set = reconstruct_pseudo_set(&mut handle, &cfg, &ctx).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_pseudo_set_csv(&set, &path).unwrap();
        let back = read_pseudo_set_csv(&path).unwrap();
        assert_eq!(back.samples, set.samples);
        assert_eq!(back.codes, set.codes);
        assert_eq!((back.strategy, back.seed, back.khot_k), (Strategy::Mixup, 11, Some(4)));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# D=6,C=4,k=4,strategy=Mixup,seed=11\n"));
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
        assert!("Replay".parse::<BaseStrategy>().is_err());
    }

    #[test]
    fn replay_teacher_labels_its_own_data() {
        // A teacher fit on its data should label replayed inputs correctly.
        let data = retained(8, &[0, 1, 2, 3]);
        let model = crate::models::train_supervised(&data, Architecture::new(6, 16, 6), &TrainConfig {
            epochs: 300,
            learning_rate: 1.0,
            ..TrainConfig::default()
        })
        .unwrap();
        let mut handle = BlackBoxHandle::new(&model);
        let out = sample_replay(&data, &mut handle, 8).unwrap();
        let agree = out
            .iter()
            .zip(data.head_per_class(8))
            .filter(|(s, orig)| s.soft.top1() == orig.y)
            .count();
        assert!(agree as f64 / out.len() as f64 >= 0.9);
    }

    proptest! {
        #[test]
        fn rrf_codomain_and_stability(x in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let r = rrf(&x);
            let mut sorted = r.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            for (i, v) in sorted.iter().enumerate() {
                prop_assert_eq!(*v, 1.0 / (i + 1) as f64);
            }
            prop_assert_eq!(rrf(&r), r);
        }

        #[test]
        fn khot_codes_round_trip(dim in 2usize..300, seed in 0u64..1000) {
            let k = (seed as usize % dim).max(1);
            let v = sample_rr(1, dim, seed).unwrap().remove(0);
            let code = khot_sparsify(v.as_slice(), k).unwrap();
            let bits = encode_khot(&code, dim).unwrap();
            prop_assert_eq!(bits.len_bits(), k * index_width(dim) as usize);
            prop_assert_eq!(decode_khot(&bits, k, dim).unwrap(), code);
        }
    }
}
