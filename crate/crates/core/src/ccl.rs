//! Continual communicative learning: a student meets three black-box
//! teachers in turn and absorbs each one by reconstructing a pseudo-training
//! set and retraining.
//!
//! Model `i` (student `0`, teachers `1..=3`) of scenario `j` is trained on
//! session `(6i + j) mod num_sessions`, restricted to its own `K` classes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::models::{distill, train_supervised, Architecture, BlackBoxHandle, Classifier, Predictor, TrainConfig};
use crate::sampler::{reconstruct_pseudo_set, ReconstructionContext, SamplerConfig, Strategy};
use crate::seed::{derive_seed, rng_for};
use crate::types::{ClassId, Dataset, LabeledSample, PlaceClassSet, PseudoSample};

pub const NUM_MODELS: usize = 4;
pub const NUM_STAGES: usize = NUM_MODELS;
pub const DEFAULT_CLASSES_PER_MODEL: usize = 10;

const STREAM_CLASSES: u64 = 0xc1a55;
const STREAM_STAGE: u64 = 0x57a6e;

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub scenario_id: usize,
    pub num_sessions: usize,
    /// Session index per model; index 0 is the student.
    pub session_assignment: Vec<usize>,
    pub classes_per_model: usize,
    pub class_assignment: Vec<BTreeSet<ClassId>>,
    pub seed: u64,
}

impl Scenario {
    pub fn num_models(&self) -> usize {
        self.session_assignment.len()
    }

    /// Classes the student has absorbed before stage `stage`.
    pub fn acquired_before(&self, stage: usize) -> BTreeSet<ClassId> {
        self.class_assignment[..stage.min(self.num_models())]
            .iter()
            .flatten()
            .copied()
            .collect()
    }
}

/// Sessions by formula; each model's class set is drawn uniformly without
/// replacement from the universe, independently per model.
pub fn make_scenario(
    scenario_id: usize,
    num_sessions: usize,
    classes_per_model: usize,
    class_universe: &PlaceClassSet,
    seed: u64,
) -> Result<Scenario> {
    if num_sessions == 0 {
        return Err(Error::Config("a scenario needs at least one session".into()));
    }
    if classes_per_model == 0 || classes_per_model > class_universe.len() {
        return Err(Error::Config(format!(
            "K = {classes_per_model} must be in 1..={}",
            class_universe.len()
        )));
    }
    let session_assignment = (0..NUM_MODELS)
        .map(|i| (6 * i + scenario_id) % num_sessions)
        .collect();
    let class_assignment = (0..NUM_MODELS)
        .map(|i| {
            let mut rng = rng_for(seed, &[STREAM_CLASSES, scenario_id as u64, i as u64]);
            sample_indices(&mut rng, class_universe.len(), classes_per_model)
                .into_iter()
                .map(ClassId)
                .collect()
        })
        .collect();
    Ok(Scenario {
        scenario_id,
        num_sessions,
        session_assignment,
        classes_per_model,
        class_assignment,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub macro_accuracy: f64,
    pub per_class: BTreeMap<ClassId, f64>,
    pub support: BTreeMap<ClassId, usize>,
}

impl Evaluation {
    /// Support-weighted accuracy over the test samples whose class is in
    /// `classes`; `None` when no such sample exists.
    pub fn restricted_accuracy(&self, classes: &BTreeSet<ClassId>) -> Option<f64> {
        let (hits, total) = classes
            .iter()
            .filter_map(|c| Some((self.per_class.get(c)?, self.support[c])))
            .fold((0.0, 0usize), |(h, t), (acc, n)| (h + acc * n as f64, t + n));
        (total > 0).then(|| hits / total as f64)
    }
}

pub fn evaluate(model: &dyn Predictor, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut hits: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut support: BTreeMap<ClassId, usize> = BTreeMap::new();
    for sample in test.samples() {
        *support.entry(sample.y).or_default() += 1;
        let hit = model.predict(&sample.x)?.top1() == sample.y;
        *hits.entry(sample.y).or_default() += hit as usize;
    }
    let per_class: BTreeMap<ClassId, f64> = support
        .iter()
        .map(|(c, n)| (*c, hits.get(c).copied().unwrap_or(0) as f64 / *n as f64))
        .collect();
    let correct: usize = hits.values().sum();
    Ok(Evaluation {
        top1: correct as f64 / test.len() as f64,
        macro_accuracy: per_class.values().sum::<f64>() / per_class.len() as f64,
        per_class,
        support,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub stage: usize,
    pub evaluation: Evaluation,
    /// Pseudo-samples sent by teachers during this stage.
    pub kt_cost_samples: u64,
    pub kt_cost_bytes: u64,
    pub kt_queries: u64,
}

impl StageResult {
    pub fn top1(&self) -> f64 {
        self.evaluation.top1
    }

    pub fn macro_accuracy(&self) -> f64 {
        self.evaluation.macro_accuracy
    }
}

/// Where pseudo-samples for previously absorbed classes come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelfSource {
    /// Reconstruct them from the current student.
    #[default]
    Student,
    /// Query every earlier teacher again for its classes; the student covers
    /// only its own original classes.
    EarlierTeachers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CclConfig {
    pub sampler: SamplerConfig,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    /// Reconstruct previously absorbed classes at every stage. Disabling it
    /// gives the fine-tuning baseline that learns only the new teacher.
    pub self_reconstruction: bool,
    /// Strategy for the self part; `None` reuses `sampler.strategy`.
    pub self_strategy: Option<Strategy>,
    pub self_source: SelfSource,
    /// Initialize each stage's student from the previous one instead of from
    /// scratch.
    pub warm_start: bool,
}

impl Default for CclConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            hidden_dim: 64,
            train: TrainConfig::default(),
            self_reconstruction: true,
            self_strategy: None,
            self_source: SelfSource::Student,
            warm_start: false,
        }
    }
}

impl CclConfig {
    fn self_strategy(&self) -> Strategy {
        self.self_strategy.unwrap_or(self.sampler.strategy)
    }

    fn student_retains(&self) -> bool {
        self.sampler.strategy.retains_training_data() || self.self_strategy().retains_training_data()
    }
}

/// Training sets of the four models plus the shared test session.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub model_data: Vec<Dataset>,
    pub test: Dataset,
}

impl ScenarioData {
    /// Restrict each model's session to the model's classes.
    pub fn from_sessions(scenario: &Scenario, sessions: &[Dataset], test: Dataset) -> Result<Self> {
        let model_data = scenario
            .session_assignment
            .iter()
            .zip(&scenario.class_assignment)
            .map(|(&s, classes)| {
                let session = sessions.get(s).ok_or_else(|| {
                    Error::Config(format!("scenario needs session {s}, only {} available", sessions.len()))
                })?;
                let data = session.restrict_to(classes);
                if data.is_empty() {
                    return Err(Error::Empty("model training data"));
                }
                Ok(data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { model_data, test })
    }
}

/// The student between stages.
#[derive(Clone, Debug)]
pub struct StudentState {
    pub model: Classifier,
    /// Labeled inputs the student keeps, when the strategy allows retention.
    pub retained: Option<Dataset>,
    pub known: BTreeSet<ClassId>,
}

/// What a teacher exposes to the protocol.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub model: &'a Classifier,
    /// Training data shipped with the model; only read when the strategy
    /// retains data.
    pub retained: &'a Dataset,
    pub classes: &'a BTreeSet<ClassId>,
}

pub enum StageInput<'a> {
    /// Stage 0: supervised training on the student's own session.
    Supervised(&'a Dataset),
    /// Stages 1..: absorb a teacher. `earlier` lists previous teachers for
    /// [`SelfSource::EarlierTeachers`].
    Transfer {
        teacher: Teacher<'a>,
        earlier: &'a [Teacher<'a>],
    },
}

fn architecture(test: &Dataset, hidden_dim: usize) -> Result<Architecture> {
    let d = test.feature_dim().ok_or(Error::Empty("test set"))?;
    Ok(Architecture::new(d, hidden_dim, test.class_set().len()))
}

fn stage_train_config(config: &CclConfig, seed: u64, scenario_id: usize, stage: usize) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, &[STREAM_STAGE, scenario_id as u64, stage as u64, 0]),
        ..config.train
    }
}

fn sampler_for(config: &CclConfig, strategy: Strategy, seed: u64, scenario_id: usize, stage: usize, part: u64) -> SamplerConfig {
    SamplerConfig {
        strategy,
        seed: derive_seed(seed, &[STREAM_STAGE, scenario_id as u64, stage as u64, 1, part, config.sampler.seed]),
        ..config.sampler.clone()
    }
}

/// Number of leading pseudo-samples whose inputs are retained training data.
fn replayed_prefix(strategy: Strategy, config: &SamplerConfig, retained: &Dataset, len: usize) -> usize {
    match strategy {
        Strategy::Replay => len,
        Strategy::Mixup => (config.replay_count * retained.per_class_index().len()).min(len),
        _ => 0,
    }
}

/// Restrict retained data to `classes`, dropping classes too thin for the
/// strategy.
fn retained_for(strategy: Strategy, config: &SamplerConfig, data: &Dataset, classes: &BTreeSet<ClassId>) -> Dataset {
    let mut keep = classes.clone();
    if strategy == Strategy::Mixup {
        keep.retain(|c| data.indices_of(*c).len() >= config.replay_count);
    }
    data.restrict_to(&keep)
}

struct Part {
    samples: Vec<PseudoSample>,
    remembered: Vec<LabeledSample>,
}

/// Query one model with `strategy` for `classes`. Returns `None` when there
/// is nothing to reconstruct.
fn reconstruct_part(
    handle: &mut BlackBoxHandle<'_>,
    strategy: Strategy,
    sampler: &SamplerConfig,
    retained: Option<&Dataset>,
    student_retained: Option<&Dataset>,
    classes: &BTreeSet<ClassId>,
) -> Result<Option<Part>> {
    if classes.is_empty() {
        return Ok(None);
    }
    let needs_own = matches!(strategy, Strategy::Replay | Strategy::Mixup);
    let own = match (needs_own, retained) {
        (true, Some(data)) => {
            let data = retained_for(strategy, sampler, data, classes);
            if data.is_empty() {
                return Ok(None);
            }
            Some(data)
        }
        (true, None) => {
            return Err(Error::Config(format!("{strategy} needs retained training data")));
        }
        (false, _) => None,
    };
    if strategy == Strategy::Prior && student_retained.is_none_or(Dataset::is_empty) {
        return Ok(None);
    }
    let context = ReconstructionContext {
        teacher_retained: own.as_ref(),
        student_retained,
        classes_covered: classes.len(),
    };
    let set = reconstruct_pseudo_set(handle, sampler, &context)?;
    let prefix = own
        .as_ref()
        .map_or(0, |data| replayed_prefix(strategy, sampler, data, set.len()));
    let remembered = set.samples[..prefix]
        .iter()
        .map(|s| LabeledSample {
            x: s.x.clone(),
            y: s.soft.top1(),
        })
        .collect();
    Ok(Some(Part {
        samples: set.samples,
        remembered,
    }))
}

/// One stage of the protocol. Stage 0 trains the student on its session;
/// later stages distill a fresh student from the union of the teacher's
/// pseudo-set and the student's self-reconstruction.
pub fn run_stage(
    student: Option<&StudentState>,
    input: StageInput<'_>,
    scenario: &Scenario,
    stage: usize,
    config: &CclConfig,
    test: &Dataset,
) -> Result<(StudentState, StageResult)> {
    let arch = architecture(test, config.hidden_dim)?;
    let train = stage_train_config(config, scenario.seed, scenario.scenario_id, stage);
    match input {
        StageInput::Supervised(session) => {
            if stage != 0 {
                return Err(Error::InvalidArgument(format!("stage {stage} needs a teacher")));
            }
            if session.is_empty() {
                return Err(Error::Empty("student session data"));
            }
            let model = train_supervised(session, arch, &train)?;
            let evaluation = evaluate(&model, test)?;
            let state = StudentState {
                model,
                retained: config.student_retains().then(|| session.clone()),
                known: session.classes().collect(),
            };
            let result = StageResult {
                stage,
                evaluation,
                kt_cost_samples: 0,
                kt_cost_bytes: 0,
                kt_queries: 0,
            };
            Ok((state, result))
        }
        StageInput::Transfer { teacher, earlier } => {
            if stage == 0 {
                return Err(Error::InvalidArgument("stage 0 is supervised".into()));
            }
            let student = student.ok_or_else(|| Error::InvalidArgument(format!("stage {stage} needs a student")))?;
            let strategy = config.sampler.strategy;
            let retains = strategy.retains_training_data();
            let mut ledger = crate::types::CostLedger::default();
            let mut parts = Vec::new();
            let mut remembered = Vec::new();

            let mut handle = BlackBoxHandle::new(teacher.model);
            let sampler = sampler_for(config, strategy, scenario.seed, scenario.scenario_id, stage, 0);
            if let Some(part) = reconstruct_part(
                &mut handle,
                strategy,
                &sampler,
                retains.then_some(teacher.retained),
                student.retained.as_ref(),
                teacher.classes,
            )? {
                remembered = part.remembered.clone();
                parts.push(part);
            }
            ledger += handle.ledger();

            let mut remaining: BTreeSet<ClassId> = student.known.difference(teacher.classes).copied().collect();
            if config.self_reconstruction && config.self_source == SelfSource::EarlierTeachers {
                for (t, earlier_teacher) in earlier.iter().enumerate() {
                    let classes: BTreeSet<ClassId> =
                        earlier_teacher.classes.intersection(&remaining).copied().collect();
                    let mut handle = BlackBoxHandle::new(earlier_teacher.model);
                    let sampler = sampler_for(config, strategy, scenario.seed, scenario.scenario_id, stage, 2 + t as u64);
                    if let Some(part) = reconstruct_part(
                        &mut handle,
                        strategy,
                        &sampler,
                        retains.then_some(earlier_teacher.retained),
                        student.retained.as_ref(),
                        &classes,
                    )? {
                        parts.push(part);
                    }
                    ledger += handle.ledger();
                    remaining.retain(|c| !classes.contains(c));
                }
            }
            if config.self_reconstruction {
                let self_strategy = config.self_strategy();
                let mut handle = BlackBoxHandle::new(&student.model);
                let sampler = sampler_for(config, self_strategy, scenario.seed, scenario.scenario_id, stage, 1);
                if let Some(part) = reconstruct_part(
                    &mut handle,
                    self_strategy,
                    &sampler,
                    student.retained.as_ref(),
                    student.retained.as_ref(),
                    &remaining,
                )? {
                    parts.push(part);
                }
            }

            let sets: Vec<&[PseudoSample]> = parts.iter().map(|p| p.samples.as_slice()).collect();
            let model = if config.warm_start {
                let targets: Vec<&[f64]> = sets.iter().flat_map(|s| s.iter().map(|p| p.soft.as_slice())).collect();
                let inputs: Vec<&[f64]> = sets.iter().flat_map(|s| s.iter().map(|p| p.x.as_slice())).collect();
                crate::models::fit(&inputs, &targets, arch, &train, Some(&student.model))?.model
            } else {
                distill(&sets, arch, &train)?
            };

            let retained = match &student.retained {
                Some(old) => {
                    let mut samples = old.samples().to_vec();
                    samples.extend(remembered);
                    Some(Dataset::new(old.class_set().clone(), samples)?)
                }
                None => None,
            };
            let mut known = student.known.clone();
            known.extend(teacher.classes.iter().copied());
            let evaluation = evaluate(&model, test)?;
            let result = StageResult {
                stage,
                evaluation,
                kt_cost_samples: ledger.pseudo_samples_sent,
                kt_cost_bytes: ledger.bytes_sent,
                kt_queries: ledger.queries_issued,
            };
            Ok((StudentState { model, retained, known }, result))
        }
    }
}

/// Scenario state that does not depend on the transfer strategy: trained
/// teachers and the stage-0 student.
#[derive(Clone, Debug)]
pub struct PreparedScenario {
    pub scenario: Scenario,
    pub data: ScenarioData,
    pub teachers: Vec<Classifier>,
    pub student: StudentState,
    pub stage0: StageResult,
}

/// Train every model supervised on its session. The student keeps its
/// session data here; [`run_transfer`] drops it when the strategy does not
/// retain data.
pub fn prepare_scenario(scenario: &Scenario, data: ScenarioData, config: &CclConfig) -> Result<PreparedScenario> {
    if data.model_data.len() != NUM_MODELS {
        return Err(Error::dim(NUM_MODELS, data.model_data.len(), "models per scenario"));
    }
    let keep = CclConfig {
        sampler: SamplerConfig {
            strategy: Strategy::Replay,
            ..config.sampler.clone()
        },
        ..config.clone()
    };
    let (student, stage0) = run_stage(
        None,
        StageInput::Supervised(&data.model_data[0]),
        scenario,
        0,
        &keep,
        &data.test,
    )?;
    let arch = architecture(&data.test, config.hidden_dim)?;
    let teachers = (1..NUM_MODELS)
        .map(|i| {
            let cfg = TrainConfig {
                seed: derive_seed(scenario.seed, &[STREAM_STAGE, scenario.scenario_id as u64, 100 + i as u64]),
                ..config.train
            };
            train_supervised(&data.model_data[i], arch, &cfg)
        })
        .collect::<Result<_>>()?;
    Ok(PreparedScenario {
        scenario: scenario.clone(),
        data,
        teachers,
        student,
        stage0,
    })
}

/// Stages 1..3 with the given transfer configuration.
pub fn run_transfer(prepared: &PreparedScenario, config: &CclConfig) -> Result<Vec<StageResult>> {
    let scenario = &prepared.scenario;
    let mut student = prepared.student.clone();
    if !config.student_retains() {
        student.retained = None;
    }
    let teachers: Vec<Teacher<'_>> = prepared
        .teachers
        .iter()
        .enumerate()
        .map(|(t, model)| Teacher {
            model,
            retained: &prepared.data.model_data[t + 1],
            classes: &scenario.class_assignment[t + 1],
        })
        .collect();
    let mut results = vec![prepared.stage0.clone()];
    for stage in 1..NUM_STAGES {
        let (next, result) = run_stage(
            Some(&student),
            StageInput::Transfer {
                teacher: teachers[stage - 1],
                earlier: &teachers[..stage - 1],
            },
            scenario,
            stage,
            config,
            &prepared.data.test,
        )?;
        student = next;
        results.push(result);
    }
    Ok(results)
}

pub fn run_scenario(scenario: &Scenario, data: ScenarioData, config: &CclConfig) -> Result<Vec<StageResult>> {
    run_transfer(&prepare_scenario(scenario, data, config)?, config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingEntry {
    pub stage: usize,
    /// Accuracy at this stage over classes acquired at earlier stages.
    pub restricted_accuracy: Option<f64>,
    /// Largest drop of that accuracy relative to any earlier stage.
    pub forgetting: f64,
}

/// For each stage `s >= 1`, accuracy on classes acquired before `s` and the
/// largest drop on that restriction relative to earlier stages. Stage 0 has
/// no earlier stage and reports zero.
pub fn forgetting_report(results: &[StageResult], class_assignment: &[BTreeSet<ClassId>]) -> Result<Vec<ForgettingEntry>> {
    if results.len() < 2 {
        return Err(Error::InvalidArgument("forgetting needs at least two stages".into()));
    }
    let mut out = vec![ForgettingEntry {
        stage: results[0].stage,
        restricted_accuracy: None,
        forgetting: 0.0,
    }];
    for s in 1..results.len() {
        let acquired: BTreeSet<ClassId> = class_assignment[..s.min(class_assignment.len())]
            .iter()
            .flatten()
            .copied()
            .collect();
        let current = results[s].evaluation.restricted_accuracy(&acquired);
        let forgetting = match current {
            Some(now) => results[..s]
                .iter()
                .filter_map(|r| r.evaluation.restricted_accuracy(&acquired))
                .map(|before| before - now)
                .fold(f64::NEG_INFINITY, f64::max),
            None => 0.0,
        };
        out.push(ForgettingEntry {
            stage: results[s].stage,
            restricted_accuracy: current,
            forgetting: if forgetting.is_finite() { forgetting } else { 0.0 },
        });
    }
    Ok(out)
}
