use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ccl_core::ccl::{forgetting_report, make_scenario, prepare_scenario, run_transfer, ScenarioData};
use ccl_core::continual::{run_continual, Learner};
use ccl_core::dsi::SufficientStats;
use ccl_core::sampler::Strategy;
use ccl_core::seed::rng_for;
use ccl_core::synthgen::write_csv_dataset;
use rand::Rng;
use rayon::prelude::*;

use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult, Context};
use crate::world::{class_universe, generate_world, load_world, seed_dir, session_file, verify_manifest, write_manifest, WorldData};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DSI_REPORT_FILE: &str = "dsi_report.csv";

pub const RESULTS_HEADER: [&str; 10] = [
    "scenario_id",
    "stage",
    "strategy",
    "N",
    "top1",
    "macro",
    "forgetting",
    "kt_samples",
    "kt_bytes",
    "seed",
];

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Write every seed's sessions and test set under `out`, plus a manifest of
/// SHA-256 hashes.
pub fn gen_data(config: &LoadedConfig, out: &Path, seeds: &[u64]) -> CliResult<PathBuf> {
    create_dir(out)?;
    let universe = class_universe(config)?;
    let mut files = Vec::new();
    for &seed in seeds {
        let data = generate_world(config, &universe, seed)?;
        let dir = seed_dir(out, seed);
        create_dir(&dir)?;
        let rel = PathBuf::from(format!("seed-{seed}"));
        for (t, session) in data.sessions.iter().enumerate() {
            let name = session_file(t);
            write_csv_dataset(session, &dir.join(&name)).context(|| format!("writing {name}"))?;
            files.push(rel.join(name));
        }
        write_csv_dataset(&data.test, &dir.join("test.csv")).context(|| "writing test.csv".into())?;
        files.push(rel.join("test.csv"));
    }
    write_manifest(out, &files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub scenario_id: usize,
    pub stage: usize,
    pub strategy: Strategy,
    pub n: usize,
    pub top1: f64,
    pub macro_accuracy: f64,
    pub forgetting: f64,
    pub kt_samples: u64,
    pub kt_bytes: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub n: usize,
    pub runs: usize,
    pub mean_top1: f64,
    pub mean_macro: f64,
    pub mean_forgetting: f64,
    /// Mean total KT cost over all stages of a run.
    pub mean_kt_samples: f64,
    pub mean_kt_bytes: f64,
}

pub struct SimulateOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub results_path: PathBuf,
    pub summary_path: PathBuf,
}

fn world_for(config: &LoadedConfig, universe: &ccl_core::PlaceClassSet, seed: u64) -> CliResult<WorldData> {
    match &config.config.data_dir {
        Some(dir) => load_world(config, universe, &config.resolve(dir), seed),
        None => generate_world(config, universe, seed),
    }
}

fn simulate_cell(
    config: &LoadedConfig,
    world: &WorldData,
    scenario_id: usize,
    seed: u64,
    strategies: &[Strategy],
) -> CliResult<Vec<ResultRow>> {
    let c = &config.config;
    let scenario = make_scenario(
        scenario_id,
        c.world.sessions,
        c.scenarios.classes_per_model,
        &world.world.class_set,
        seed,
    )
    .context(|| format!("scenario {scenario_id}, seed {seed}"))?;
    let data = ScenarioData::from_sessions(&scenario, &world.sessions, world.test.clone())
        .context(|| format!("scenario {scenario_id}, seed {seed}"))?;
    let base = config.ccl_config(strategies[0], c.sweep.n_values[0], seed);
    let prepared =
        prepare_scenario(&scenario, data, &base).context(|| format!("training models for scenario {scenario_id}, seed {seed}"))?;
    let mut rows = Vec::new();
    for &strategy in strategies {
        for &n in &c.sweep.n_values {
            let cfg = config.ccl_config(strategy, n, seed);
            let ctx = || format!("scenario {scenario_id}, seed {seed}, {strategy}, N = {n}");
            let results = run_transfer(&prepared, &cfg).context(ctx)?;
            let forgetting = forgetting_report(&results, &scenario.class_assignment).context(ctx)?;
            for (r, f) in results.iter().zip(&forgetting) {
                rows.push(ResultRow {
                    scenario_id,
                    stage: r.stage,
                    strategy,
                    n,
                    top1: r.top1(),
                    macro_accuracy: r.macro_accuracy(),
                    forgetting: f.forgetting,
                    kt_samples: r.kt_cost_samples,
                    kt_bytes: r.kt_cost_bytes,
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

fn thread_pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} worker threads: {e}")))
}

/// Run the strategy × N sweep over every (seed, scenario) cell.
pub fn simulate(config: &LoadedConfig, out: &Path, seeds: &[u64], jobs: usize) -> CliResult<SimulateOutput> {
    let c = &config.config;
    if let Some(dir) = &c.data_dir {
        verify_manifest(&config.resolve(dir))?;
    }
    create_dir(out)?;
    let universe = class_universe(config)?;
    if c.scenarios.classes_per_model > universe.len() {
        return Err(CliError::Config(format!(
            "classes_per_model = {} exceeds the {} available classes",
            c.scenarios.classes_per_model,
            universe.len()
        )));
    }
    let strategies = config.strategies();
    let pool = thread_pool(jobs)?;
    let worlds: Vec<WorldData> = seeds
        .iter()
        .map(|&s| world_for(config, &universe, s))
        .collect::<CliResult<_>>()?;
    let cells: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|si| c.scenarios.ids.iter().map(move |&j| (si, j)))
        .collect();
    let per_cell: Vec<Vec<ResultRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(si, j)| simulate_cell(config, &worlds[si], j, seeds[si], &strategies))
            .collect::<CliResult<_>>()
    })?;
    let mut rows: Vec<ResultRow> = per_cell.into_iter().flatten().collect();
    let order = |s: Strategy| strategies.iter().position(|x| *x == s).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        (a.seed, a.scenario_id, order(a.strategy), a.n, a.stage).cmp(&(b.seed, b.scenario_id, order(b.strategy), b.n, b.stage))
    });

    let results_path = out.join(RESULTS_FILE);
    let mut w = csv_writer(&results_path)?;
    w.write_record(RESULTS_HEADER).map_err(|e| csv_error(&results_path, e))?;
    for r in &rows {
        w.write_record([
            r.scenario_id.to_string(),
            r.stage.to_string(),
            r.strategy.to_string(),
            r.n.to_string(),
            fmt6(r.top1),
            fmt6(r.macro_accuracy),
            fmt6(r.forgetting),
            r.kt_samples.to_string(),
            r.kt_bytes.to_string(),
            r.seed.to_string(),
        ])
        .map_err(|e| csv_error(&results_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&results_path, e))?;

    let summary = summarize(&rows, &strategies, &c.sweep.n_values);
    let summary_path = out.join(SUMMARY_FILE);
    let mut w = csv_writer(&summary_path)?;
    w.write_record([
        "strategy",
        "N",
        "runs",
        "mean_top1",
        "mean_macro",
        "mean_forgetting",
        "mean_kt_samples",
        "mean_kt_bytes",
    ])
    .map_err(|e| csv_error(&summary_path, e))?;
    for s in &summary {
        w.write_record([
            s.strategy.to_string(),
            s.n.to_string(),
            s.runs.to_string(),
            fmt6(s.mean_top1),
            fmt6(s.mean_macro),
            fmt6(s.mean_forgetting),
            format!("{:.1}", s.mean_kt_samples),
            format!("{:.1}", s.mean_kt_bytes),
        ])
        .map_err(|e| csv_error(&summary_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&summary_path, e))?;

    Ok(SimulateOutput {
        rows,
        summary,
        results_path,
        summary_path,
    })
}

/// Per (strategy, N): means over runs of the final-stage metrics and of the
/// total KT cost.
pub fn summarize(rows: &[ResultRow], strategies: &[Strategy], n_values: &[usize]) -> Vec<SummaryRow> {
    let last_stage = rows.iter().map(|r| r.stage).max().unwrap_or(0);
    let mut runs: BTreeMap<(Strategy, usize, u64, usize), (Option<&ResultRow>, u64, u64)> = BTreeMap::new();
    for r in rows {
        let entry = runs.entry((r.strategy, r.n, r.seed, r.scenario_id)).or_default();
        entry.1 += r.kt_samples;
        entry.2 += r.kt_bytes;
        if r.stage == last_stage {
            entry.0 = Some(r);
        }
    }
    let mut out = Vec::new();
    for &strategy in strategies {
        for &n in n_values {
            let finals: Vec<(&ResultRow, u64, u64)> = runs
                .iter()
                .filter(|(k, _)| k.0 == strategy && k.1 == n)
                .filter_map(|(_, v)| Some((v.0?, v.1, v.2)))
                .collect();
            if finals.is_empty() {
                continue;
            }
            let k = finals.len() as f64;
            let mean = |f: &dyn Fn(&(&ResultRow, u64, u64)) -> f64| finals.iter().map(f).sum::<f64>() / k;
            out.push(SummaryRow {
                strategy,
                n,
                runs: finals.len(),
                mean_top1: mean(&|r| r.0.top1),
                mean_macro: mean(&|r| r.0.macro_accuracy),
                mean_forgetting: mean(&|r| r.0.forgetting),
                mean_kt_samples: mean(&|r| r.1 as f64),
                mean_kt_bytes: mean(&|r| r.2 as f64),
            });
        }
    }
    out
}

/// Fixed-width table of final-stage accuracy: strategies by rows, N by
/// columns.
pub fn summary_table(summary: &[SummaryRow]) -> String {
    let mut ns: Vec<usize> = summary.iter().map(|s| s.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut strategies: Vec<Strategy> = Vec::new();
    for s in summary {
        if !strategies.contains(&s.strategy) {
            strategies.push(s.strategy);
        }
    }
    let mut out = String::new();
    write!(out, "{:<10}", "top1 @N").unwrap();
    for n in &ns {
        write!(out, "{:>9}", n).unwrap();
    }
    out.push('\n');
    for st in strategies {
        write!(out, "{:<10}", st.name()).unwrap();
        for n in &ns {
            match summary.iter().find(|s| s.strategy == st && s.n == *n) {
                Some(s) => write!(out, "{:>9.3}", s.mean_top1).unwrap(),
                None => write!(out, "{:>9}", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}

pub struct DsiDemoOutput {
    pub report_path: PathBuf,
    pub stats_paths: Vec<PathBuf>,
    pub table: String,
}

/// Run the three continual learners for every seed.
pub fn dsi_demo(config: &LoadedConfig, out: &Path, seeds: &[u64]) -> CliResult<DsiDemoOutput> {
    create_dir(out)?;
    let report_path = out.join(DSI_REPORT_FILE);
    let mut w = csv_writer(&report_path)?;
    w.write_record([
        "seed",
        "session",
        "learner",
        "average_accuracy",
        "macro_accuracy",
        "session1_accuracy",
        "batch_agreement",
        "admitted",
        "rejected",
        "message_bytes",
    ])
    .map_err(|e| csv_error(&report_path, e))?;
    let mut stats_paths = Vec::new();
    let mut means: BTreeMap<(usize, Learner), (f64, f64, f64, usize)> = BTreeMap::new();
    for &seed in seeds {
        let report = run_continual(&config.continual_config(seed)).context(|| format!("dsi demo, seed {seed}"))?;
        for r in &report.rows {
            w.write_record([
                seed.to_string(),
                r.session.to_string(),
                r.learner.name().to_string(),
                fmt6(r.average_accuracy),
                fmt6(r.macro_accuracy),
                fmt6(r.first_session_accuracy),
                r.batch_agreement.map(fmt6).unwrap_or_default(),
                r.admitted.to_string(),
                r.rejected.to_string(),
                r.message_bytes.to_string(),
            ])
            .map_err(|e| csv_error(&report_path, e))?;
            let m = means.entry((r.session, r.learner)).or_default();
            m.0 += r.average_accuracy;
            m.1 += r.macro_accuracy;
            m.2 += r.first_session_accuracy;
            m.3 += 1;
        }
        let stats_path = out.join(format!("dsi-stats-seed-{seed}.dsis"));
        std::fs::write(&stats_path, report.global_stats.serialize()).map_err(|e| CliError::io(&stats_path, e))?;
        stats_paths.push(stats_path);
    }
    w.flush().map_err(|e| CliError::io(&report_path, e))?;

    let mut table = format!("{:<8}{:<8}{:>10}{:>10}{:>10}\n", "session", "learner", "average", "macro", "session1");
    for ((session, learner), (a, m, f, k)) in &means {
        let k = *k as f64;
        writeln!(
            table,
            "{:<8}{:<8}{:>10.3}{:>10.3}{:>10.3}",
            session,
            learner.name(),
            a / k,
            m / k,
            f / k
        )
        .unwrap();
    }
    Ok(DsiDemoOutput {
        report_path,
        stats_paths,
        table,
    })
}

/// Human-readable summary of a serialized statistics message.
pub fn inspect_stats(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let stats = SufficientStats::deserialize(&bytes).context(|| path.display().to_string())?;
    let s = stats.s();
    let d = stats.d();
    // Rayleigh quotients over the basis vectors and fixed random probes
    // bound the extreme eigenvalues from inside.
    let mut quotients: Vec<f64> = (0..d).map(|i| s[(i, i)]).collect();
    let mut rng = rng_for(0, &[0x1a5]);
    for _ in 0..64 {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum();
        if norm == 0.0 {
            continue;
        }
        let mut quad = 0.0;
        for i in 0..d {
            let row = s.row(i);
            quad += v[i] * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        }
        quotients.push(quad / norm);
    }
    let min = quotients.iter().copied().fold(f64::INFINITY, f64::min);
    let max = quotients.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::new();
    writeln!(out, "file               {}", path.display()).unwrap();
    writeln!(out, "d                  {}", d).unwrap();
    writeln!(out, "c                  {}", stats.c()).unwrap();
    writeln!(out, "n                  {}", stats.n()).unwrap();
    writeln!(
        out,
        "bytes              {} (expected {})",
        bytes.len(),
        SufficientStats::encoded_len(d, stats.c())
    )
    .unwrap();
    writeln!(out, "symmetry residual  {:e}", s.symmetry_residual()).unwrap();
    if d > 0 {
        writeln!(out, "probe min          {:e}", min).unwrap();
        writeln!(out, "probe max          {:e}", max).unwrap();
    }
    Ok(out)
}
