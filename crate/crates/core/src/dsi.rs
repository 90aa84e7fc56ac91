//! Distributed statistic integration.
//!
//! Each robot folds its entropy-gated pseudo-samples into raw sufficient
//! statistics `S = Σ x xᵀ` and `Q = Σ x yᵀ`. Statistics from any number of
//! robots merge by addition, and the global classifier is the ridge solution
//! `W = (S + λI)⁻¹ Q`. The regularizer is applied once, at solve time, so the
//! merged solution equals a batch ridge fit over all admitted samples.

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::types::{argmax, ClassId, FeatureVector, PseudoSample};

pub const STATS_MAGIC: [u8; 4] = *b"DSIS";
pub const STATS_VERSION: u16 = 1;
pub const STATS_HEADER_BYTES: usize = 24;

/// Largest accepted `‖(S + λI)W − Q‖_F / ‖Q‖_F` after a solve.
pub const SOLVE_RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    s: Matrix,
    q: Matrix,
    n: u64,
}

impl SufficientStats {
    pub fn zeros(d: usize, c: usize) -> Self {
        Self {
            s: Matrix::zeros(d, d),
            q: Matrix::zeros(d, c),
            n: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.s.rows()
    }

    pub fn c(&self) -> usize {
        self.q.cols()
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Raw autocorrelation `Σ x xᵀ`.
    pub fn s(&self) -> &Matrix {
        &self.s
    }

    /// Cross-correlation `Σ x yᵀ`.
    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn accumulate(&mut self, x: &[f64], y: &[f64]) -> Result<()> {
        let (d, c) = (self.d(), self.c());
        if x.len() != d {
            return Err(Error::dim(d, x.len(), "stats input"));
        }
        if y.len() != c {
            return Err(Error::dim(c, y.len(), "stats target"));
        }
        let s = self.s.as_mut_slice();
        let q = self.q.as_mut_slice();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (sij, &xj) in s[i * d..(i + 1) * d].iter_mut().zip(x) {
                *sij += xi * xj;
            }
            for (qik, &yk) in q[i * c..(i + 1) * c].iter_mut().zip(y) {
                *qik += xi * yk;
            }
        }
        self.n += 1;
        Ok(())
    }

    pub fn accumulate_sample(&mut self, sample: &PseudoSample) -> Result<()> {
        self.accumulate(sample.x.as_slice(), sample.soft.as_slice())
    }

    pub fn merge(&self, other: &SufficientStats) -> Result<SufficientStats> {
        let mut out = self.clone();
        out.merge_in(other)?;
        Ok(out)
    }

    pub fn merge_in(&mut self, other: &SufficientStats) -> Result<()> {
        if self.d() != other.d() {
            return Err(Error::dim(self.d(), other.d(), "merged stats D"));
        }
        if self.c() != other.c() {
            return Err(Error::dim(self.c(), other.c(), "merged stats C"));
        }
        self.s.add_assign(&other.s)?;
        self.q.add_assign(&other.q)?;
        self.n += other.n;
        Ok(())
    }

    /// Encoded size for the given shape; independent of the sample count.
    pub fn encoded_len(d: usize, c: usize) -> usize {
        STATS_HEADER_BYTES + 8 * d * d + 8 * d * c
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.d(), self.c()));
        out.extend_from_slice(&STATS_MAGIC);
        out.extend_from_slice(&STATS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d() as u32).to_le_bytes());
        out.extend_from_slice(&(self.c() as u32).to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        for v in self.s.as_slice().iter().chain(self.q.as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STATS_HEADER_BYTES {
            return Err(Error::decode(
                "header",
                format!("need {STATS_HEADER_BYTES} bytes, got {}", bytes.len()),
            ));
        }
        if bytes[..4] != STATS_MAGIC {
            return Err(Error::decode("magic", format!("expected \"DSIS\", found {:02x?}", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != STATS_VERSION {
            return Err(Error::decode("version", format!("unsupported version {version}")));
        }
        let d = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
        let expected = Self::encoded_len(d, c);
        if bytes.len() != expected {
            return Err(Error::decode(
                "length",
                format!("d = {d}, c = {c} needs {expected} bytes, got {}", bytes.len()),
            ));
        }
        let mut values = bytes[STATS_HEADER_BYTES..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        let s = Matrix::from_row_major(d, d, values.by_ref().take(d * d).collect())?;
        let q = Matrix::from_row_major(d, c, values.collect())?;
        Ok(Self { s, q, n })
    }
}

pub fn accumulate(stats: &mut SufficientStats, x: &FeatureVector, y: &[f64]) -> Result<()> {
    stats.accumulate(x.as_slice(), y)
}

pub fn merge(a: &SufficientStats, b: &SufficientStats) -> Result<SufficientStats> {
    a.merge(b)
}

pub fn serialize_stats(stats: &SufficientStats) -> Vec<u8> {
    stats.serialize()
}

pub fn deserialize_stats(bytes: &[u8]) -> Result<SufficientStats> {
    SufficientStats::deserialize(bytes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsiConfig {
    /// Tikhonov regularizer added at solve time.
    pub lambda: f64,
    /// Entropy gate in nats; samples with entropy `>= tau` are dropped.
    pub tau: f64,
}

impl DsiConfig {
    /// `λ = 1e-3`, `τ = ½ ln C`.
    pub fn default_for(num_classes: usize) -> Self {
        Self {
            lambda: 1e-3,
            tau: 0.5 * (num_classes as f64).ln(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be non-negative, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Keep the samples whose response entropy is strictly below `tau`.
pub fn filter_by_entropy(samples: &[PseudoSample], tau: f64) -> Vec<PseudoSample> {
    samples.iter().filter(|s| s.soft.entropy() < tau).cloned().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticClassifier {
    w: Matrix,
}

impl AnalyticClassifier {
    pub fn new(w: Matrix) -> Result<Self> {
        if !w.is_finite() {
            return Err(Error::Numeric("analytic weights are not finite".into()));
        }
        Ok(Self { w })
    }

    /// The `D × C` weight matrix.
    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.w.transpose_mul_vec(x)
    }

    pub fn predict(&self, x: &[f64]) -> Result<(Vec<f64>, ClassId)> {
        let scores = self.scores(x)?;
        let class = ClassId(argmax(&scores));
        Ok((scores, class))
    }
}

/// Unnormalized scores `Wᵀx` and their argmax (lowest index on ties).
pub fn predict_analytic(model: &AnalyticClassifier, x: &FeatureVector) -> Result<(Vec<f64>, ClassId)> {
    model.predict(x.as_slice())
}

/// `W = (S + λI)⁻¹ Q` through a Cholesky factorization.
pub fn solve(stats: &SufficientStats, lambda: f64) -> Result<AnalyticClassifier> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let mut a = stats.s.clone();
    for i in 0..a.rows() {
        a[(i, i)] += lambda;
    }
    let w = Cholesky::factor(&a)?.solve(&stats.q)?;
    let q_norm = stats.q.frobenius_norm();
    if q_norm > 0.0 {
        let residual = a.matmul(&w)?.frobenius_distance(&stats.q) / q_norm;
        if !(residual <= SOLVE_RESIDUAL_TOLERANCE) {
            return Err(Error::Numeric(format!(
                "solve residual {residual:e} exceeds {SOLVE_RESIDUAL_TOLERANCE:e}"
            )));
        }
    }
    AnalyticClassifier::new(w)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RobotReport {
    pub received: usize,
    pub admitted: usize,
    pub rejected: usize,
    pub message_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsiReport {
    pub robots: Vec<RobotReport>,
    pub total_admitted: u64,
    /// Sum of all robots' stats messages.
    pub total_message_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsiOutcome {
    pub robot_stats: Vec<SufficientStats>,
    pub global: SufficientStats,
    pub model: AnalyticClassifier,
    pub report: DsiReport,
}

/// Each robot gates its stream by entropy and accumulates locally; the merged
/// statistics are solved once and the same model is handed back to all
/// robots.
pub fn dsi_session_run(
    streams: &[Vec<PseudoSample>],
    d: usize,
    c: usize,
    config: &DsiConfig,
) -> Result<DsiOutcome> {
    config.validate()?;
    if streams.is_empty() {
        return Err(Error::Empty("robot streams"));
    }
    let mut robot_stats = Vec::with_capacity(streams.len());
    let mut robots = Vec::with_capacity(streams.len());
    for stream in streams {
        let admitted = filter_by_entropy(stream, config.tau);
        let mut stats = SufficientStats::zeros(d, c);
        for sample in &admitted {
            stats.accumulate_sample(sample)?;
        }
        robots.push(RobotReport {
            received: stream.len(),
            admitted: admitted.len(),
            rejected: stream.len() - admitted.len(),
            message_bytes: SufficientStats::encoded_len(d, c),
        });
        robot_stats.push(stats);
    }
    let mut global = SufficientStats::zeros(d, c);
    for stats in &robot_stats {
        global.merge_in(stats)?;
    }
    let model = solve(&global, config.lambda)?;
    let report = DsiReport {
        total_admitted: global.n(),
        total_message_bytes: robots.iter().map(|r| r.message_bytes).sum(),
        robots,
    };
    Ok(DsiOutcome {
        robot_stats,
        global,
        model,
        report,
    })
}
