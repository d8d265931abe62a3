use marsnav_core::dataset::{audit, build_dataset, DatasetConfig, Split};
use marsnav_core::eval::{evaluate, step_accuracy, success_rate, FnPolicy, StartMode};
use marsnav_core::models::{input_tensor, load_checkpoint, save_checkpoint};
use marsnav_core::render::{render_trajectory_overlay, render_value_map, value_map, GOAL_COLOR, PATH_COLOR, START_COLOR};
use marsnav_core::{ActionId, Arch, Cell, Dataset, ModelSpec, Network, OraclePolicy, RandomPolicy, Task, TerrainParams};

fn dataset(size: usize, maps: usize, seed: u64) -> Dataset {
    build_dataset(&DatasetConfig::new(TerrainParams::for_size(size), maps, 7, seed)).unwrap()
}

#[test]
fn oracle_replay_is_exact() {
    let d = dataset(32, 21, 6);
    let (tr, te) = (d.tasks(Split::Train).unwrap(), d.tasks(Split::Test).unwrap());
    let r = evaluate(&OraclePolicy, &tr, &te, StartMode::Stored).unwrap();
    assert_eq!((r.train_acc, r.test_acc, r.train_succ, r.test_succ), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(audit(&d).unwrap().mismatches, 0);
}

#[test]
fn random_scores_sit_at_chance() {
    let d = dataset(64, 210, 21);
    let mut tasks = d.tasks(Split::Train).unwrap();
    tasks.extend(d.tasks(Split::Test).unwrap());
    let n: usize = tasks.iter().map(|t| t.samples.len()).sum();
    assert!(n >= 10_000, "{n} samples");
    let acc = step_accuracy(&RandomPolicy { seed: 77 }, &tasks).unwrap();
    let sigma = (0.125f64 * 0.875 / n as f64).sqrt();
    assert!((acc - 0.125).abs() <= 3.0 * sigma, "{acc} vs 0.125 ± {}", 3.0 * sigma);
}

#[test]
fn receding_policy_never_succeeds() {
    let d = dataset(32, 14, 2);
    let te = d.tasks(Split::Test).unwrap();
    let away = FnPolicy(|task: &Task, p: Cell| {
        let g = task.world.goal();
        ActionId::from_delta(((p.x - g.x).signum(), (p.y - g.y).signum())).unwrap_or(ActionId::EAST)
    });
    assert_eq!(success_rate(&away, &te, StartMode::Stored).unwrap(), 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_policy() {
    let d = dataset(32, 7, 1);
    let task = &d.tasks(Split::Train).unwrap()[0];
    let net = Network::<f32>::new(ModelSpec::new(Arch::DbNet, 32), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    save_checkpoint(&path, &net, 42).unwrap();
    let (header, back) = load_checkpoint(&path).unwrap();
    assert_eq!(header.step, 42);
    assert_eq!(header.spec, *net.spec());
    let x = input_tensor(&task.input);
    assert_eq!(net.infer_all_cells(&x).unwrap().data(), back.infer_all_cells(&x).unwrap().data());
}

#[test]
fn dataset_survives_disk_round_trip() {
    let d = dataset(32, 7, 9);
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.manifest, d.manifest);
    let a = d.tasks(Split::Test).unwrap();
    let b = back.tasks(Split::Test).unwrap();
    assert_eq!(a[0].samples, b[0].samples);
    assert_eq!(a[0].input, b[0].input);
}

#[test]
fn value_map_of_position_blind_net_is_mid_gray() {
    let d = dataset(32, 7, 3);
    let task = &d.tasks(Split::Train).unwrap()[0];
    let mut net = Network::<f32>::new(ModelSpec::new(Arch::DbNet, 32), 0).unwrap();
    net.zero_branch_two();
    let v = value_map(&net, task).unwrap();
    assert_eq!(v.len(), 64);
    let img = render_value_map(&v, 8, 1).unwrap();
    assert_eq!(img.dimensions(), (8, 8));
    assert!(img.pixels().all(|p| p.0[0] == 128));
    assert_eq!(render_value_map(&v, 8, 4).unwrap().dimensions(), (32, 32));
}

#[test]
fn overlay_marks_start_goal_and_path() {
    let d = dataset(32, 7, 3);
    let map = &d.maps[0];
    let traj = &map.meta.trajectories[0];
    let img = render_trajectory_overlay(&map.gray, 4, &traj.positions, traj.goal).unwrap();
    assert_eq!(img.dimensions(), (32, 32));
    let count = |c| img.pixels().filter(|p| **p == c).count();
    assert_eq!(count(START_COLOR), 4);
    assert_eq!(count(GOAL_COLOR), 4);
    if traj.positions.len() > 2 {
        assert!(count(PATH_COLOR) > 0);
    }
}
