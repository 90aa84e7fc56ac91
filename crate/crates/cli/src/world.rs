//! Synthetic worlds per run seed, generated in memory or read back from a
//! `gen-data` directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use ccl_core::seed::{derive_seed, rng_for};
use ccl_core::synthgen::{
    build_world_with_classes, generate_session, load_csv_dataset_with_classes, SessionSpec, WorldModel,
};
use ccl_core::{Dataset, PlaceClassSet};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult, Context};

pub const MANIFEST_NAME: &str = "manifest.sha256";

const STREAM_SESSIONS: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_POINTS: u64 = 3;

/// World seed for sweep seed `seed`.
pub fn world_seed(config: &LoadedConfig, seed: u64) -> u64 {
    derive_seed(config.config.world.seed, &[seed])
}

/// The class universe: numbered classes, or the places produced by the
/// partition pattern over uniformly drawn trajectory points.
pub fn class_universe(config: &LoadedConfig) -> CliResult<PlaceClassSet> {
    match config.load_pattern()? {
        None => PlaceClassSet::numbered(config.config.world.classes).context(|| "building class set".into()),
        Some(file) => {
            let [x0, y0, x1, y1] = file.workspace();
            let mut rng = rng_for(file.seed, &[STREAM_POINTS]);
            let points: Vec<(f64, f64)> = (0..file.points)
                .map(|_| (rng.random_range(x0..=x1), rng.random_range(y0..=y1)))
                .collect();
            let pattern = file.pattern().context(|| "partition pattern".into())?;
            Ok(pattern.build(&points).context(|| "partition pattern".into())?.class_set)
        }
    }
}

pub struct WorldData {
    pub world: WorldModel,
    pub sessions: Vec<Dataset>,
    pub test: Dataset,
}

pub fn build_world(config: &LoadedConfig, universe: &PlaceClassSet, seed: u64) -> CliResult<WorldModel> {
    let w = &config.config.world;
    let dim = w.feature_dim.unwrap_or(universe.len());
    build_world_with_classes(universe.clone(), dim, w.concentration, world_seed(config, seed))
        .context(|| format!("building world for seed {seed}"))
}

pub fn generate_world(config: &LoadedConfig, universe: &PlaceClassSet, seed: u64) -> CliResult<WorldData> {
    let w = &config.config.world;
    let world = build_world(config, universe, seed)?;
    let ws = world.seed;
    let sessions = (0..w.sessions)
        .map(|t| {
            let spec = SessionSpec::all_classes(
                &world,
                t as u64,
                w.drift,
                w.samples_per_class,
                derive_seed(ws, &[STREAM_SESSIONS]),
            );
            generate_session(&world, &spec).context(|| format!("seed {seed}, session {t}"))
        })
        .collect::<CliResult<_>>()?;
    // The test session is held out: its index follows the training sessions.
    let spec = SessionSpec::all_classes(
        &world,
        w.sessions as u64,
        w.drift,
        w.test_samples_per_class,
        derive_seed(ws, &[STREAM_TEST]),
    );
    let test = generate_session(&world, &spec).context(|| format!("seed {seed}, test session"))?;
    Ok(WorldData { world, sessions, test })
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

pub fn session_file(t: usize) -> String {
    format!("session-{t:02}.csv")
}

pub fn load_world(config: &LoadedConfig, universe: &PlaceClassSet, root: &Path, seed: u64) -> CliResult<WorldData> {
    let world = build_world(config, universe, seed)?;
    let dir = seed_dir(root, seed);
    let load = |name: &str| {
        let path = dir.join(name);
        load_csv_dataset_with_classes(&path, universe, "label", &[]).context(|| format!("loading {}", path.display()))
    };
    let sessions = (0..config.config.world.sessions)
        .map(|t| load(&session_file(t)))
        .collect::<CliResult<_>>()?;
    let test = load("test.csv")?;
    Ok(WorldData { world, sessions, test })
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `sha256  relative/path` lines for `files` (relative to `root`).
pub fn write_manifest(root: &Path, files: &[PathBuf]) -> CliResult<PathBuf> {
    let path = root.join(MANIFEST_NAME);
    let mut out = Vec::new();
    for rel in files {
        let hash = sha256_file(&root.join(rel))?;
        writeln!(out, "{hash}  {}", rel.to_string_lossy().replace('\\', "/")).expect("write to memory");
    }
    std::fs::write(&path, out).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Check every file listed in the manifest against its recorded hash.
pub fn verify_manifest(root: &Path) -> CliResult<usize> {
    let path = root.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut checked = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (expected, rel) = line.split_once("  ").ok_or_else(|| CliError::ConfigAt {
            path: path.clone(),
            line: i + 1,
            message: "expected `<sha256>  <path>`".into(),
        })?;
        let file = root.join(rel);
        let actual = sha256_file(&file)?;
        if actual != expected {
            return Err(CliError::Checksum {
                path: file,
                expected: expected.to_string(),
                actual,
            });
        }
        checked += 1;
    }
    Ok(checked)
}
