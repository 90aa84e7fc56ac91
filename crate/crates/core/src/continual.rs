//! Class-incremental comparison of three learners over sequential sessions:
//! gradient fine-tuning on new data only, fine-tuning with a small replay
//! buffer, and the analytic learner built from merged sufficient statistics.
//!
//! Session `t` introduces a disjoint group of classes observed under the
//! session's drift. Each learner is scored after every session on the test
//! sets of all sessions seen so far.

use std::collections::BTreeSet;

use crate::dsi::{filter_by_entropy, solve, AnalyticClassifier, DsiConfig, SufficientStats};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{fit, one_hot_pairs, train_supervised, Architecture, Classifier, TrainConfig};
use crate::oracle::ridge_oracle;
use crate::seed::derive_seed;
use crate::synthgen::{build_world, generate_session, SessionSpec, WorldModel};
use crate::types::{ClassId, Dataset, LabeledSample, PredictionDistribution, PseudoSample};

const STREAM_TRAIN: u64 = 0x7a1;
const STREAM_TEST: u64 = 0x7e5;
const STREAM_MODEL: u64 = 0x30de1;

/// Targets accumulated by the analytic learner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TargetSource {
    /// One-hot ground-truth labels.
    Labels,
    /// Soft outputs of a per-session teacher, gated by entropy.
    #[default]
    Teacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinualConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub concentration: f64,
    pub drift_magnitude: f64,
    pub num_sessions: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    /// Replay buffer size per class.
    pub buffer_per_class: usize,
    /// Robots sharing each session's stream.
    pub robots: usize,
    pub dsi: DsiConfig,
    pub targets: TargetSource,
    pub seed: u64,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            feature_dim: 20,
            concentration: 80.0,
            drift_magnitude: 0.3,
            num_sessions: 5,
            train_per_class: 30,
            test_per_class: 20,
            hidden_dim: 32,
            train: TrainConfig {
                learning_rate: 0.5,
                epochs: 40,
                batch_size: 16,
                temperature: 1.0,
                seed: 0,
            },
            buffer_per_class: 2,
            robots: 3,
            dsi: DsiConfig::default_for(20),
            targets: TargetSource::Teacher,
            seed: 0,
        }
    }
}

impl ContinualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sessions == 0 || self.num_classes < self.num_sessions {
            return Err(Error::Config(format!(
                "{} classes cannot be split over {} sessions",
                self.num_classes, self.num_sessions
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("sessions need training and test samples".into()));
        }
        if self.robots == 0 {
            return Err(Error::Config("at least one robot is required".into()));
        }
        self.dsi.validate()?;
        self.train.validate()
    }

    /// Disjoint class groups, session `t` taking classes `t, t + S, t + 2S, ...`.
    pub fn class_groups(&self) -> Vec<BTreeSet<ClassId>> {
        (0..self.num_sessions)
            .map(|t| (t..self.num_classes).step_by(self.num_sessions).map(ClassId).collect())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Learner {
    FineTune,
    Replay,
    Analytic,
}

impl Learner {
    pub const ALL: [Learner; 3] = [Learner::FineTune, Learner::Replay, Learner::Analytic];

    pub fn name(self) -> &'static str {
        match self {
            Learner::FineTune => "FT",
            Learner::Replay => "Replay",
            Learner::Analytic => "DSI",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRow {
    pub session: usize,
    pub learner: Learner,
    /// Mean of the per-session test accuracies over sessions seen so far.
    pub average_accuracy: f64,
    /// Mean per-class accuracy over classes seen so far.
    pub macro_accuracy: f64,
    /// Accuracy on the first session's test set.
    pub first_session_accuracy: f64,
    /// Fraction of test predictions equal to a batch ridge fit on all
    /// admitted samples so far (analytic learner only).
    pub batch_agreement: Option<f64>,
    pub admitted: u64,
    pub rejected: u64,
    pub message_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct ContinualReport {
    pub rows: Vec<SessionRow>,
    /// Statistics merged over every robot and session.
    pub global_stats: SufficientStats,
}

impl ContinualReport {
    pub fn row(&self, session: usize, learner: Learner) -> Option<&SessionRow> {
        self.rows.iter().find(|r| r.session == session && r.learner == learner)
    }
}

pub struct ContinualData {
    pub world: WorldModel,
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

pub fn generate_continual_data(config: &ContinualConfig) -> Result<ContinualData> {
    config.validate()?;
    let world = build_world(config.num_classes, config.feature_dim, config.concentration, config.seed)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (t, group) in config.class_groups().into_iter().enumerate() {
        let spec = |samples, stream| SessionSpec {
            session_id: t as u64,
            visited_classes: group.clone(),
            drift_magnitude: config.drift_magnitude,
            samples_per_class: samples,
            seed: derive_seed(config.seed, &[stream]),
        };
        train.push(generate_session(&world, &spec(config.train_per_class, STREAM_TRAIN))?);
        test.push(generate_session(&world, &spec(config.test_per_class, STREAM_TEST))?);
    }
    Ok(ContinualData { world, train, test })
}

trait Scorer {
    fn class_of(&self, x: &[f64]) -> Result<ClassId>;
}

impl Scorer for Classifier {
    fn class_of(&self, x: &[f64]) -> Result<ClassId> {
        Ok(crate::types::top1(&PredictionDistribution::new(crate::models::softmax(&self.logits(x)?, 1.0))?))
    }
}

impl Scorer for AnalyticClassifier {
    fn class_of(&self, x: &[f64]) -> Result<ClassId> {
        Ok(self.predict(x)?.1)
    }
}

struct Scores {
    average: f64,
    macro_accuracy: f64,
    first: f64,
    predictions: Vec<ClassId>,
}

fn score(model: &dyn Scorer, tests: &[Dataset]) -> Result<Scores> {
    let mut per_session = Vec::new();
    let mut per_class = std::collections::BTreeMap::<ClassId, (usize, usize)>::new();
    let mut predictions = Vec::new();
    for test in tests {
        let mut hits = 0;
        for s in test.samples() {
            let predicted = model.class_of(s.x.as_slice())?;
            let entry = per_class.entry(s.y).or_default();
            entry.1 += 1;
            if predicted == s.y {
                hits += 1;
                entry.0 += 1;
            }
            predictions.push(predicted);
        }
        per_session.push(hits as f64 / test.len() as f64);
    }
    Ok(Scores {
        average: per_session.iter().sum::<f64>() / per_session.len() as f64,
        macro_accuracy: per_class.values().map(|(h, n)| *h as f64 / *n as f64).sum::<f64>() / per_class.len() as f64,
        first: per_session[0],
        predictions,
    })
}

fn warm_fit(data: &Dataset, arch: Architecture, train: &TrainConfig, init: Option<&Classifier>) -> Result<Classifier> {
    match init {
        None => train_supervised(data, arch, train),
        Some(model) => {
            let (inputs, targets) = one_hot_pairs(data, arch.output_dim)?;
            let targets: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
            Ok(fit(&inputs, &targets, arch, train, Some(model))?.model)
        }
    }
}

/// Samples each robot observes in a session: round-robin over the stream.
fn split_among_robots(samples: Vec<PseudoSample>, robots: usize) -> Vec<Vec<PseudoSample>> {
    let mut out = vec![Vec::new(); robots];
    for (i, s) in samples.into_iter().enumerate() {
        out[i % robots].push(s);
    }
    out
}

fn session_targets(
    data: &Dataset,
    arch: Architecture,
    config: &ContinualConfig,
    session: usize,
) -> Result<Vec<PseudoSample>> {
    match config.targets {
        TargetSource::Labels => data
            .samples()
            .iter()
            .map(|s| PseudoSample::from_labeled(s, arch.output_dim))
            .collect(),
        TargetSource::Teacher => {
            let train = TrainConfig {
                seed: derive_seed(config.seed, &[STREAM_MODEL, 1, session as u64]),
                ..config.train
            };
            let teacher = train_supervised(data, arch, &train)?;
            data.samples()
                .iter()
                .map(|s| {
                    Ok(PseudoSample {
                        x: s.x.clone(),
                        soft: teacher.predict(&s.x)?,
                    })
                })
                .collect()
        }
    }
}

/// Run all learners over the configured sessions.
pub fn run_continual(config: &ContinualConfig) -> Result<ContinualReport> {
    let data = generate_continual_data(config)?;
    run_continual_on(config, &data)
}

pub fn run_continual_on(config: &ContinualConfig, data: &ContinualData) -> Result<ContinualReport> {
    config.validate()?;
    let (d, c) = (config.feature_dim, config.num_classes);
    let arch = Architecture::new(d, config.hidden_dim, c);
    let mut rows = Vec::new();

    let mut ft: Option<Classifier> = None;
    let mut replay: Option<Classifier> = None;
    let mut buffer: Vec<LabeledSample> = Vec::new();
    let mut global = SufficientStats::zeros(d, c);
    let mut admitted_rows: Vec<PseudoSample> = Vec::new();
    let (mut admitted, mut rejected, mut message_bytes) = (0u64, 0u64, 0u64);

    for (t, session) in data.train.iter().enumerate() {
        let train = TrainConfig {
            seed: derive_seed(config.seed, &[STREAM_MODEL, 0, t as u64]),
            ..config.train
        };
        let tests = &data.test[..=t];

        let model = warm_fit(session, arch, &train, ft.as_ref())?;
        let s = score(&model, tests)?;
        ft = Some(model);
        rows.push(SessionRow {
            session: t + 1,
            learner: Learner::FineTune,
            average_accuracy: s.average,
            macro_accuracy: s.macro_accuracy,
            first_session_accuracy: s.first,
            batch_agreement: None,
            admitted: 0,
            rejected: 0,
            message_bytes: 0,
        });

        let mut replay_samples = session.samples().to_vec();
        replay_samples.extend(buffer.iter().cloned());
        let replay_data = Dataset::new(session.class_set().clone(), replay_samples)?;
        let model = warm_fit(&replay_data, arch, &train, replay.as_ref())?;
        let s = score(&model, tests)?;
        replay = Some(model);
        buffer.extend(session.head_per_class(config.buffer_per_class).into_iter().cloned());
        rows.push(SessionRow {
            session: t + 1,
            learner: Learner::Replay,
            average_accuracy: s.average,
            macro_accuracy: s.macro_accuracy,
            first_session_accuracy: s.first,
            batch_agreement: None,
            admitted: 0,
            rejected: 0,
            message_bytes: 0,
        });

        let stream = session_targets(session, arch, config, t)?;
        for part in split_among_robots(stream, config.robots) {
            let kept = filter_by_entropy(&part, config.dsi.tau);
            let mut stats = SufficientStats::zeros(d, c);
            for sample in &kept {
                stats.accumulate_sample(sample)?;
            }
            global.merge_in(&stats)?;
            admitted += kept.len() as u64;
            rejected += (part.len() - kept.len()) as u64;
            message_bytes += SufficientStats::encoded_len(d, c) as u64;
            admitted_rows.extend(kept);
        }
        let analytic = solve(&global, config.dsi.lambda)?;
        let s = score(&analytic, tests)?;
        let batch = batch_refit(&admitted_rows, d, c, config.dsi.lambda)?;
        let b = score(&batch, tests)?;
        let agree = s.predictions.iter().zip(&b.predictions).filter(|(a, b)| a == b).count();
        rows.push(SessionRow {
            session: t + 1,
            learner: Learner::Analytic,
            average_accuracy: s.average,
            macro_accuracy: s.macro_accuracy,
            first_session_accuracy: s.first,
            batch_agreement: Some(agree as f64 / s.predictions.len() as f64),
            admitted,
            rejected,
            message_bytes,
        });
    }
    Ok(ContinualReport {
        rows,
        global_stats: global,
    })
}

/// Batch ridge fit on the admitted samples, through the elimination oracle.
/// With no admitted samples the solution is zero.
pub fn batch_refit(samples: &[PseudoSample], d: usize, c: usize, lambda: f64) -> Result<AnalyticClassifier> {
    if samples.is_empty() {
        return AnalyticClassifier::new(Matrix::zeros(d, c));
    }
    let x = Matrix::from_fn(samples.len(), d, |i, j| samples[i].x.as_slice()[j]);
    let y = Matrix::from_fn(samples.len(), c, |i, j| samples[i].soft.as_slice()[j]);
    AnalyticClassifier::new(ridge_oracle(&x, &y, lambda)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ContinualConfig {
        ContinualConfig {
            num_classes: 10,
            feature_dim: 10,
            num_sessions: 5,
            train_per_class: 15,
            test_per_class: 10,
            hidden_dim: 16,
            train: TrainConfig {
                epochs: 20,
                ..ContinualConfig::default().train
            },
            dsi: DsiConfig::default_for(10),
            ..ContinualConfig::default()
        }
    }

    #[test]
    fn class_groups_partition_the_universe() {
        let groups = quick().class_groups();
        assert_eq!(groups.len(), 5);
        let all: BTreeSet<ClassId> = groups.iter().flatten().copied().collect();
        assert_eq!(all.len(), 10);
        assert_eq!(groups.iter().map(BTreeSet::len).sum::<usize>(), 10);
    }

    #[test]
    fn analytic_learner_agrees_with_batch_refit() {
        for targets in [TargetSource::Labels, TargetSource::Teacher] {
            let report = run_continual(&ContinualConfig { targets, ..quick() }).unwrap();
            assert_eq!(report.rows.len(), 15);
            for t in 1..=5 {
                let row = report.row(t, Learner::Analytic).unwrap();
                assert_eq!(row.batch_agreement, Some(1.0));
            }
            let last = report.row(5, Learner::Analytic).unwrap();
            assert_eq!(last.admitted, report.global_stats.n());
            assert_eq!(last.admitted + last.rejected, 5 * 2 * 15);
            assert_eq!(last.message_bytes, 5 * 3 * SufficientStats::encoded_len(10, 10) as u64);
        }
    }

    #[test]
    fn fine_tuning_forgets_the_first_session() {
        let report = run_continual(&quick()).unwrap();
        let first = report.row(1, Learner::FineTune).unwrap().first_session_accuracy;
        let last = report.row(5, Learner::FineTune).unwrap().first_session_accuracy;
        assert!(first - last >= 0.2, "{first} -> {last}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(run_continual(&ContinualConfig { num_classes: 3, ..quick() }).is_err());
        assert!(run_continual(&ContinualConfig { robots: 0, ..quick() }).is_err());
    }
}
