//! Expert-demonstration corpus: terrain maps, goals and optimal
//! trajectories, split by map, with a directory-per-map disk layout.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nav::{ActionId, Cell, NavWorld};
use crate::oracle::{distance_field, ExpertTrajectory};
use crate::terrain::{
    compress_risky, encode_rasters, generate_terrain, load_mask_png, save_mask_png, InputEncoding, Raster,
    TerrainParams,
};

pub const FORMAT: &str = "marsnav-dataset-v1";
const MANIFEST: &str = "manifest.json";

/// Mixes a map index (or attempt number) into a seed, splitmix64 style.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    /// One goal per map shared by all of its trajectories.
    PerMap,
    /// A fresh goal for every trajectory.
    PerTrajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub terrain: TerrainParams,
    pub n_maps: usize,
    pub trajectories_per_map: usize,
    pub seed: u64,
    pub goal_mode: GoalMode,
    /// Terrain regenerations allowed per map before giving up.
    pub max_attempts: u32,
}

impl DatasetConfig {
    pub fn new(terrain: TerrainParams, n_maps: usize, trajectories_per_map: usize, seed: u64) -> Self {
        DatasetConfig {
            terrain,
            n_maps,
            trajectories_per_map,
            seed,
            goal_mode: GoalMode::PerMap,
            max_attempts: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.terrain.validate()?;
        if self.n_maps < 7 {
            return Err(Error::InvalidParams(format!(
                "need at least 7 maps for a 6:1 train/test split, got {}",
                self.n_maps
            )));
        }
        if self.trajectories_per_map == 0 {
            return Err(Error::InvalidParams("trajectories per map must be positive".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidParams("max attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Per-map `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub map_id: String,
    pub split: Split,
    pub terrain_seed: u64,
    /// Generation attempts consumed (1 when the first terrain was usable).
    pub attempts: u32,
    pub image_size: usize,
    pub cell_size: usize,
    pub grid_size: usize,
    /// Traversability rows, `.` safe and `#` risky.
    pub grid: Vec<String>,
    pub trajectories: Vec<ExpertTrajectory>,
}

impl MapMeta {
    pub fn safe_cells(&self) -> Vec<bool> {
        self.grid
            .iter()
            .flat_map(|row| row.chars().map(|c| c == '.'))
            .collect()
    }

    pub fn sample_count(&self) -> usize {
        self.trajectories.iter().map(ExpertTrajectory::len).sum()
    }
}

fn grid_rows(safe: &[bool], n: usize) -> Vec<String> {
    safe.chunks(n)
        .map(|row| row.iter().map(|&s| if s { '.' } else { '#' }).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub map_id: String,
    pub dir: String,
    pub split: Split,
    pub trajectories: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train_maps: usize,
    pub test_maps: usize,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Top-level `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub n_maps: usize,
    pub trajectories_per_map: usize,
    pub goal_mode: GoalMode,
    pub terrain: TerrainParams,
    pub params_digest: String,
    pub counts: Counts,
    pub maps: Vec<ManifestEntry>,
}

/// One map with its rasters, traversability and demonstrations.
#[derive(Clone, Debug)]
pub struct MapRecord {
    pub meta: MapMeta,
    pub gray: Raster,
    pub edge: Raster,
    /// Pixel-level risky mask.
    pub risky: Vec<bool>,
}

impl MapRecord {
    /// The map's world with the given goal.
    pub fn world(&self, goal: Cell) -> Result<NavWorld> {
        NavWorld::new(
            self.meta.grid_size,
            self.meta.safe_cells(),
            goal,
            self.meta.map_id.clone(),
            self.meta.cell_size,
        )
    }

    pub fn input(&self, goal: Cell) -> Result<InputEncoding> {
        encode_rasters(&self.gray, &self.edge, goal, self.meta.cell_size)
    }

    /// Distinct goals in first-appearance order.
    pub fn goals(&self) -> Vec<Cell> {
        let mut goals: Vec<Cell> = Vec::new();
        for t in &self.meta.trajectories {
            if !goals.contains(&t.goal) {
                goals.push(t.goal);
            }
        }
        goals
    }
}

/// Everything a policy sees and is scored on for one (map, goal) pair.
#[derive(Clone, Debug)]
pub struct Task {
    pub map_index: usize,
    pub world: NavWorld,
    pub input: InputEncoding,
    /// `(position, expert action)` for every trajectory step.
    pub samples: Vec<(Cell, ActionId)>,
    /// Trajectory start cells.
    pub starts: Vec<Cell>,
}

impl Task {
    pub fn positions(&self) -> Vec<Cell> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.1.index()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub maps: Vec<MapRecord>,
}

fn generate_map(config: &DatasetConfig, index: usize, split: Split) -> Result<MapRecord> {
    let map_id = format!("map_{index:05}");
    let base = derive_seed(config.seed, index as u64);
    let params = &config.terrain;
    let n = params.grid_size();
    let want = config.trajectories_per_map;
    'attempts: for attempt in 0..config.max_attempts {
        let terrain_seed = derive_seed(base, attempt as u64);
        let terrain = generate_terrain(terrain_seed, params)?;
        let safe = terrain.traversability(params.cell_size, params.risk_fraction)?;
        let safe_cells: Vec<usize> = (0..n * n).filter(|&i| safe[i]).collect();
        if safe_cells.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(terrain_seed, u64::MAX));
        let pick_goal = |rng: &mut ChaCha8Rng| {
            let i = safe_cells[rng.gen_range(0..safe_cells.len())];
            Cell::new((i % n) as i32, (i / n) as i32)
        };
        let mut trajectories = Vec::with_capacity(want);
        match config.goal_mode {
            GoalMode::PerMap => {
                let goal = pick_goal(&mut rng);
                let world = NavWorld::new(n, safe.clone(), goal, map_id.clone(), params.cell_size)?;
                let field = distance_field(&world);
                let starts = field.reachable_starts();
                if starts.len() < want {
                    continue 'attempts;
                }
                for i in sample(&mut rng, starts.len(), want) {
                    trajectories.push(field.sample_trajectory(starts[i])?);
                }
            }
            GoalMode::PerTrajectory => {
                for _ in 0..want {
                    let goal = pick_goal(&mut rng);
                    let world = NavWorld::new(n, safe.clone(), goal, map_id.clone(), params.cell_size)?;
                    let field = distance_field(&world);
                    let starts = field.reachable_starts();
                    if starts.is_empty() {
                        continue 'attempts;
                    }
                    let start = starts[rng.gen_range(0..starts.len())];
                    trajectories.push(field.sample_trajectory(start)?);
                }
            }
        }
        return Ok(MapRecord {
            meta: MapMeta {
                map_id,
                split,
                terrain_seed,
                attempts: attempt + 1,
                image_size: params.image_size,
                cell_size: params.cell_size,
                grid_size: n,
                grid: grid_rows(&safe, n),
                trajectories,
            },
            gray: terrain.gray,
            edge: terrain.edge,
            risky: terrain.risky,
        });
    }
    Err(Error::Generation(format!(
        "{map_id}: no terrain with {want} reachable starts after {} attempts; \
         crater density may be too high for the grid",
        config.max_attempts
    )))
}

/// Test-map count for a corpus of `n_maps`.
pub fn test_map_count(n_maps: usize) -> usize {
    (n_maps / 7).max(1)
}

/// Generates the whole corpus in memory. Per-map seeds derive from
/// `(seed, index)`, so the result is independent of thread scheduling.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut order: Vec<usize> = (0..config.n_maps).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX)));
    let mut splits = vec![Split::Train; config.n_maps];
    for &i in &order[..test_map_count(config.n_maps)] {
        splits[i] = Split::Test;
    }
    let maps = (0..config.n_maps)
        .into_par_iter()
        .map(|i| generate_map(config, i, splits[i]))
        .collect::<Result<Vec<_>>>()?;
    let manifest = manifest_for(config, &maps);
    Ok(Dataset { manifest, maps })
}

fn manifest_for(config: &DatasetConfig, maps: &[MapRecord]) -> DatasetManifest {
    let mut counts = Counts::default();
    let entries = maps
        .iter()
        .map(|m| {
            let samples = m.meta.sample_count();
            match m.meta.split {
                Split::Train => {
                    counts.train_maps += 1;
                    counts.train_samples += samples;
                }
                Split::Test => {
                    counts.test_maps += 1;
                    counts.test_samples += samples;
                }
            }
            ManifestEntry {
                map_id: m.meta.map_id.clone(),
                dir: format!("maps/{}", m.meta.map_id),
                split: m.meta.split,
                trajectories: m.meta.trajectories.len(),
                samples,
            }
        })
        .collect();
    DatasetManifest {
        format: FORMAT.to_string(),
        seed: config.seed,
        n_maps: config.n_maps,
        trajectories_per_map: config.trajectories_per_map,
        goal_mode: config.goal_mode,
        terrain: config.terrain.clone(),
        params_digest: config.terrain.digest(),
        counts,
        maps: entries,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

impl Dataset {
    pub fn image_size(&self) -> usize {
        self.manifest.terrain.image_size
    }

    pub fn grid_size(&self) -> usize {
        self.manifest.terrain.grid_size()
    }

    pub fn maps_in(&self, split: Split) -> impl Iterator<Item = (usize, &MapRecord)> {
        self.maps.iter().enumerate().filter(move |(_, m)| m.meta.split == split)
    }

    /// One [`Task`] per (map, goal) in the split, in map order.
    pub fn tasks(&self, split: Split) -> Result<Vec<Task>> {
        let mut out = Vec::new();
        for (map_index, map) in self.maps_in(split) {
            for goal in map.goals() {
                let mut samples = Vec::new();
                let mut starts = Vec::new();
                for t in map.meta.trajectories.iter().filter(|t| t.goal == goal) {
                    samples.extend(t.steps());
                    starts.push(t.start());
                }
                out.push(Task {
                    map_index,
                    world: map.world(goal)?,
                    input: map.input(goal)?,
                    samples,
                    starts,
                });
            }
        }
        if out.is_empty() {
            return Err(Error::EmptySplit);
        }
        Ok(out)
    }

    /// Writes `manifest.json` and one directory per map under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("maps")).map_err(|e| Error::io(dir, e))?;
        self.maps
            .par_iter()
            .zip(&self.manifest.maps)
            .try_for_each(|(map, entry)| {
                let d = dir.join(&entry.dir);
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                map.gray.save_png(&d.join("gray.png"))?;
                map.edge.save_png(&d.join("edge.png"))?;
                save_mask_png(&map.risky, map.meta.image_size, &d.join("risky.png"))?;
                write_json(&d.join("meta.json"), &map.meta)
            })?;
        write_json(&dir.join(MANIFEST), &self.manifest)
    }

    /// Reads a corpus written by [`Dataset::save`], checking that every
    /// stored grid agrees with its risky mask.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
        if manifest.format != FORMAT {
            return Err(Error::Dataset(format!("unsupported format `{}`", manifest.format)));
        }
        let params = &manifest.terrain;
        let maps = manifest
            .maps
            .par_iter()
            .map(|entry| {
                let d = dir.join(&entry.dir);
                let meta: MapMeta = read_json(&d.join("meta.json"))?;
                let gray = Raster::load_png(&d.join("gray.png"))?;
                let edge = Raster::load_png(&d.join("edge.png"))?;
                let (size, risky) = load_mask_png(&d.join("risky.png"))?;
                if size != params.image_size || gray.size() != size || edge.size() != size {
                    return Err(Error::Dataset(format!("{}: raster size mismatch", entry.map_id)));
                }
                let grid = compress_risky(&risky, size, params.cell_size, params.risk_fraction)?;
                if grid != meta.safe_cells() {
                    return Err(Error::Dataset(format!(
                        "{}: stored grid disagrees with risky.png",
                        entry.map_id
                    )));
                }
                if meta.split != entry.split || meta.map_id != entry.map_id {
                    return Err(Error::Dataset(format!("{}: meta disagrees with manifest", entry.map_id)));
                }
                Ok(MapRecord {
                    meta,
                    gray,
                    edge,
                    risky,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, maps })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub checked: usize,
    pub mismatches: usize,
}

/// Recomputes the expert action for every stored sample and validates each
/// trajectory against its world.
pub fn audit(dataset: &Dataset) -> Result<AuditReport> {
    let per_map = dataset
        .maps
        .par_iter()
        .map(|map| {
            let mut report = AuditReport::default();
            for goal in map.goals() {
                let world = map.world(goal)?;
                let field = distance_field(&world);
                for t in map.meta.trajectories.iter().filter(|t| t.goal == goal) {
                    t.validate(&world)?;
                    for (pos, label) in t.steps() {
                        report.checked += 1;
                        if field.optimal_action(pos)? != label {
                            report.mismatches += 1;
                        }
                    }
                }
            }
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_map.into_iter().fold(AuditReport::default(), |a, b| AuditReport {
        checked: a.checked + b.checked,
        mismatches: a.mismatches + b.mismatches,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n_maps: usize, seed: u64) -> DatasetConfig {
        DatasetConfig::new(TerrainParams::for_size(32), n_maps, 4, seed)
    }

    #[test]
    fn seven_maps_split_six_to_one() {
        let d = build_dataset(&small_config(7, 1)).unwrap();
        assert_eq!(d.manifest.counts.train_maps, 6);
        assert_eq!(d.manifest.counts.test_maps, 1);
        assert_eq!(test_map_count(700), 100);
    }

    #[test]
    fn too_few_maps_rejected() {
        assert!(matches!(build_dataset(&small_config(3, 1)), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn labels_pass_audit() {
        let d = build_dataset(&small_config(14, 2)).unwrap();
        let r = audit(&d).unwrap();
        assert_eq!(r.mismatches, 0);
        assert_eq!(r.checked, d.manifest.counts.train_samples + d.manifest.counts.test_samples);
    }

    #[test]
    fn starts_are_distinct_reachable_and_not_the_goal() {
        let d = build_dataset(&small_config(7, 3)).unwrap();
        for m in &d.maps {
            let goals = m.goals();
            assert_eq!(goals.len(), 1);
            let mut starts: Vec<Cell> = m.meta.trajectories.iter().map(|t| t.start()).collect();
            assert!(starts.iter().all(|&s| s != goals[0]));
            starts.sort_by_key(|c| (c.y, c.x));
            starts.dedup();
            assert_eq!(starts.len(), 4);
        }
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let a = build_dataset(&small_config(7, 9)).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| build_dataset(&small_config(7, 9)).unwrap());
        assert_eq!(a.manifest, b.manifest);
        for (x, y) in a.maps.iter().zip(&b.maps) {
            assert_eq!(x.meta, y.meta);
            assert_eq!(x.gray, y.gray);
        }
    }

    #[test]
    fn per_trajectory_goals() {
        let mut c = small_config(7, 4);
        c.goal_mode = GoalMode::PerTrajectory;
        let d = build_dataset(&c).unwrap();
        assert_eq!(audit(&d).unwrap().mismatches, 0);
        let tasks = d.tasks(Split::Train).unwrap();
        let n: usize = tasks.iter().map(|t| t.starts.len()).sum();
        assert_eq!(n, 6 * 4);
    }

    #[test]
    fn impossible_terrain_aborts_with_diagnostic() {
        let mut c = small_config(7, 5);
        c.terrain.risk_fraction = 0.0;
        c.terrain.crater_count_range = (40, 40);
        c.terrain.crater_radius_range = (12.0, 14.0);
        c.max_attempts = 3;
        c.trajectories_per_map = 200;
        let err = build_dataset(&c).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
        assert!(err.to_string().contains("after 3 attempts"), "{err}");
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(&small_config(7, 6)).unwrap();
        d.save(dir.path()).unwrap();
        assert!(dir.path().join("maps/map_00003/risky.png").exists());
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        for (x, y) in d.maps.iter().zip(&back.maps) {
            assert_eq!(x.meta, y.meta);
            assert_eq!(x.gray, y.gray);
            assert_eq!(x.edge, y.edge);
            assert_eq!(x.risky, y.risky);
        }
        let a = d.tasks(Split::Test).unwrap();
        let b = back.tasks(Split::Test).unwrap();
        assert_eq!(a[0].input, b[0].input);
    }

    #[test]
    fn tampered_grid_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(&small_config(7, 7)).unwrap();
        d.save(dir.path()).unwrap();
        let meta_path = dir.path().join("maps/map_00000/meta.json");
        let mut meta: MapMeta = read_json(&meta_path).unwrap();
        let row = meta.grid[0].clone();
        meta.grid[0] = row.chars().map(|c| if c == '.' { '#' } else { '.' }).collect();
        write_json(&meta_path, &meta).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));
    }
}
