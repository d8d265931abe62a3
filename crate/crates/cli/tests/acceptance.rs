//! End-to-end acceptance run: property suites plus desk-scale training
//! experiments. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any fails. Set `MARSNAV_ACCEPTANCE_DIR` to keep the artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use marsnav_core::dataset::Split;
use marsnav_core::diagnostics::{run_suite, SuiteOptions};
use marsnav_core::eval::{rollout, step_accuracy};
use marsnav_core::models::load_checkpoint;
use marsnav_core::render::{render_value_map, value_map};
use marsnav_core::tensor::{one_hot, softmax_ce_l2_loss, L2Mode, Tensor};
use marsnav_core::{
    distance_field, value_iteration, Arch, Cell, Dataset, InputEncoding, ModelSpec, NavWorld, Network, OraclePolicy,
    RandomPolicy, Task, Terminal,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_marsnav");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

type Check = anyhow::Result<Outcome>;

fn marsnav(args: &[&str]) -> anyhow::Result<String> {
    let out = Command::new(BIN).args(args).output()?;
    if !out.status.success() {
        anyhow::bail!(
            "marsnav {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn random_world(rng: &mut impl Rng, n: usize, max_risky: usize) -> NavWorld {
    let mut safe = vec![true; n * n];
    let goal = rng.gen_range(0..n * n);
    for _ in 0..rng.gen_range(0..=max_risky) {
        let i = rng.gen_range(0..n * n);
        if i != goal {
            safe[i] = false;
        }
    }
    NavWorld::new(n, safe, Cell::new((goal % n) as i32, (goal / n) as i32), "random", 4).unwrap()
}

/// Breadth-first search from `start` outward, independent of the planner.
fn brute_force_distance(world: &NavWorld, start: Cell) -> Option<u32> {
    if !world.is_safe(start) {
        return None;
    }
    let n = world.size();
    let mut seen = vec![false; n * n];
    let mut frontier = vec![start];
    seen[world.index(start)] = true;
    let mut d = 0;
    while !frontier.is_empty() {
        if frontier.contains(&world.goal()) {
            return Some(d);
        }
        let mut next = Vec::new();
        for c in frontier {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let m = Cell::new(c.x + dx, c.y + dy);
                    if world.in_grid(m) && world.is_safe(m) && !seen[world.index(m)] {
                        seen[world.index(m)] = true;
                        next.push(m);
                    }
                }
            }
        }
        frontier = next;
        d += 1;
    }
    None
}

fn blank_task(world: NavWorld) -> Task {
    let m = 4 * world.size();
    Task {
        map_index: 0,
        input: InputEncoding::from_vec(m, vec![0.0; 3 * m * m]).unwrap(),
        world,
        samples: Vec::new(),
        starts: Vec::new(),
    }
}

fn gradient_check() -> Check {
    let t = Instant::now();
    let reports = run_suite(&SuiteOptions::default())?;
    let elapsed = t.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.label.as_str()).collect();
    Ok(outcome(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst rel err {worst:.2e}, failed {failed:?}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn oracle_exactness() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (mut cells, mut bad, mut rollouts, mut failed) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let world = random_world(&mut rng, 6, 3);
        let field = distance_field(&world);
        for c in world.cells() {
            cells += 1;
            if field.dist(c) != brute_force_distance(&world, c) {
                bad += 1;
            }
        }
        let task = blank_task(world.clone());
        for s in field.reachable_starts() {
            rollouts += 1;
            let r = rollout(&OraclePolicy, &task, s, world.max_steps())?;
            if r.terminal != Terminal::Success {
                failed += 1;
            }
        }
    }
    let elapsed = t.elapsed();
    Ok(outcome(
        bad == 0 && failed == 0 && elapsed < Duration::from_secs(60),
        format!(
            "{bad}/{cells} distance mismatches, {failed}/{rollouts} failed rollouts, {:.1}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn value_iteration_consistency() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut compared, mut bad) = (0, 0);
    for _ in 0..20 {
        let world = random_world(&mut rng, 8, 12);
        let field = distance_field(&world);
        let vf = value_iteration(&world, 0.99, 1e-10)?;
        for c in field.reachable_starts() {
            let opt = field.optimal_actions(c);
            if opt.len() == 1 {
                compared += 1;
                if vf.greedy_action(c) != opt[0] {
                    bad += 1;
                }
            }
        }
    }
    let elapsed = t.elapsed();
    Ok(outcome(
        bad == 0 && compared > 0 && elapsed < Duration::from_secs(60),
        format!("{bad}/{compared} unique-action cells disagree, {:.1}s", elapsed.as_secs_f64()),
    ))
}

fn loss_identities() -> Check {
    let logits = Tensor::<f64>::zeros(&[4, 8]);
    let y = one_hot::<f64>(&[0, 2, 5, 7], 8)?;
    let net = Network::<f64>::new(ModelSpec::new(Arch::DbNet, 16), 4)?;
    let ce = softmax_ce_l2_loss(&logits, &y, net.params(), 0.0, L2Mode::Norm)?.cross_entropy;
    let norm = net
        .params()
        .iter()
        .flat_map(|p| p.value.data().iter())
        .map(|w| w * w)
        .sum::<f64>()
        .sqrt();
    let lambda = 1e-4;
    let out = softmax_ce_l2_loss(&logits, &y, net.params(), lambda, L2Mode::Norm)?;
    let ce_err = (ce - 8f64.ln()).abs();
    let pen_err = (out.loss - out.cross_entropy - lambda * norm).abs();
    Ok(outcome(
        ce_err <= 1e-9 && pen_err <= 1e-9,
        format!("|CE - ln 8| = {ce_err:.1e}, |penalty - lambda*norm| = {pen_err:.1e}"),
    ))
}

struct Runs {
    data: PathBuf,
    dbnet: Option<(Value, Duration)>,
    b1net: Option<Value>,
    b2net: Option<Value>,
    errors: Vec<String>,
}

fn train_run(work: &Path, data: &Path, arch: &str) -> anyhow::Result<(Value, Duration)> {
    let out = work.join(format!("run-{arch}"));
    let t = Instant::now();
    marsnav(&["train", "--data", p(data), "--out", p(&out), "--arch", arch, "--seed", "0"])?;
    Ok((read_json(&out.join("metrics.json"))?, t.elapsed()))
}

fn desk_scale_runs(work: &Path) -> Runs {
    let data = work.join("corpus");
    let mut runs = Runs {
        data: data.clone(),
        dbnet: None,
        b1net: None,
        b2net: None,
        errors: Vec::new(),
    };
    if let Err(e) = marsnav(&["gen-data", "--out", p(&data), "--seed", "1"]) {
        runs.errors.push(e.to_string());
        return runs;
    }
    for arch in ["dbnet", "b1net", "b2net"] {
        eprintln!("training {arch} on the desk-scale corpus");
        match train_run(work, &data, arch) {
            Ok((m, d)) => match arch {
                "dbnet" => runs.dbnet = Some((m, d)),
                "b1net" => runs.b1net = Some(m),
                _ => runs.b2net = Some(m),
            },
            Err(e) => runs.errors.push(e.to_string()),
        }
    }
    runs
}

fn num(v: &Value, key: &str) -> anyhow::Result<f64> {
    v[key].as_f64().ok_or_else(|| anyhow::anyhow!("metrics lack `{key}`"))
}

fn desk_scale_learning(runs: &Runs) -> Check {
    let (m, elapsed) = runs
        .dbnet
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("dbnet run missing: {:?}", runs.errors))?;
    let acc = num(m, "best_test_acc")?;
    let succ = num(m, "test_succ")?;
    Ok(outcome(
        acc >= 0.85 && succ >= 0.70 && *elapsed <= Duration::from_secs(7200),
        format!(
            "test acc {acc:.4} (>= 0.85), test success {succ:.4} (>= 0.70), {:.0}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn ablation_ordering(runs: &Runs) -> Check {
    let missing = || anyhow::anyhow!("training runs missing: {:?}", runs.errors);
    let db = num(&runs.dbnet.as_ref().ok_or_else(missing)?.0, "best_test_acc")?;
    let b1 = num(runs.b1net.as_ref().ok_or_else(missing)?, "best_test_acc")?;
    let b2 = num(runs.b2net.as_ref().ok_or_else(missing)?, "best_test_acc")?;
    Ok(outcome(
        db > b1 && b1 > b2 && b2 <= 0.35 && db - b1 >= 0.05,
        format!(
            "test acc dbnet {db:.4}, b1net {b1:.4}, b2net {b2:.4}; gap dbnet-b1net {:.2} pp (>= 5)",
            100.0 * (db - b1)
        ),
    ))
}

fn epoch_time_ordering(runs: &Runs) -> Check {
    let out = marsnav(&["bench", "--data", p(&runs.data), "--k", "40", "--batch", "128"])?;
    let r: Value = serde_json::from_str(&out)?;
    let db = num(&r, "dbnet_seconds")?;
    let vin = num(&r, "vin_seconds")?;
    Ok(outcome(
        db < vin,
        format!(
            "epoch seconds dbnet {db:.2}, vin(K=40) {vin:.2}; reduction {:.1}%",
            100.0 * num(&r, "reduction")?
        ),
    ))
}

fn metric_plumbing(runs: &Runs) -> Check {
    let out = marsnav(&["eval", "--data", p(&runs.data), "--oracle"])?;
    let r: Value = serde_json::from_str(&out)?;
    let keys: Vec<&String> = r.as_object().map(|o| o.keys().collect()).unwrap_or_default();
    let all_one = ["train_acc", "test_acc", "train_succ", "test_succ"]
        .iter()
        .all(|k| r[*k].as_f64() == Some(1.0));
    let d = Dataset::load(&runs.data)?;
    let mut tasks = d.tasks(Split::Train)?;
    tasks.extend(d.tasks(Split::Test)?);
    let n: usize = tasks.iter().map(|t| t.samples.len()).sum();
    let acc = step_accuracy(&RandomPolicy { seed: 8 }, &tasks)?;
    let sigma = (0.125f64 * 0.875 / n as f64).sqrt();
    let z = (acc - 0.125) / sigma;
    Ok(outcome(
        all_one && keys.len() == 4 && n >= 10_000 && z.abs() <= 3.0,
        format!("oracle {r}; random acc {acc:.4} over {n} samples ({z:+.2} sigma)"),
    ))
}

fn determinism(work: &Path) -> Check {
    let data = work.join("tiny");
    marsnav(&["gen-data", "--out", p(&data), "--maps", "7", "--traj", "3", "--size", "32", "--seed", "7"])?;
    let mut files = Vec::new();
    for run in ["det-a", "det-b"] {
        let out = work.join(run);
        marsnav(&[
            "train", "--data", p(&data), "--out", p(&out), "--arch", "dbnet", "--epochs", "2", "--deterministic",
            "--seed", "7",
        ])?;
        files.push((std::fs::read(out.join("metrics.json"))?, std::fs::read(out.join("checkpoint.bin"))?));
    }
    let same_metrics = files[0].0 == files[1].0;
    let same_ckpt = files[0].1 == files[1].1;
    Ok(outcome(
        same_metrics && same_ckpt,
        format!("metrics identical: {same_metrics}, checkpoints identical: {same_ckpt}"),
    ))
}

fn value_map_ordering(work: &Path, runs: &Runs) -> Check {
    let (_, net) = load_checkpoint(&work.join("run-dbnet").join("checkpoint.bin"))?;
    let d = Dataset::load(&runs.data)?;
    let tasks = d.tasks(Split::Test)?;
    let mut seen_maps = Vec::new();
    let (mut checked, mut brighter) = (0, 0);
    let mut detail = String::new();
    for task in &tasks {
        if checked == 10 {
            break;
        }
        if seen_maps.contains(&task.map_index) {
            continue;
        }
        let w = &task.world;
        let g = w.goal();
        let adjacent: Vec<Cell> = w
            .cells()
            .filter(|&c| c != g && c.chebyshev(g) == 1 && w.is_safe(c))
            .collect();
        let risky: Vec<Cell> = w.cells().filter(|&c| !w.is_safe(c)).collect();
        if adjacent.is_empty() || risky.is_empty() {
            continue;
        }
        seen_maps.push(task.map_index);
        let img = render_value_map(&value_map(&net, task)?, w.size(), 1)?;
        let mean = |cells: &[Cell]| {
            cells
                .iter()
                .map(|c| img.get_pixel(c.x as u32, c.y as u32).0[0] as f64)
                .sum::<f64>()
                / cells.len() as f64
        };
        let (a, r) = (mean(&adjacent), mean(&risky));
        checked += 1;
        if a > r {
            brighter += 1;
        }
        let _ = write!(detail, " {a:.0}/{r:.0}");
    }
    Ok(outcome(
        checked == 10 && brighter >= 8,
        format!("{brighter}/{checked} maps with goal neighbours brighter than risky cells (means:{detail})"),
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let (_guard, work) = match std::env::var_os("MARSNAV_ACCEPTANCE_DIR") {
        Some(d) => {
            let d = PathBuf::from(d);
            std::fs::create_dir_all(&d).expect("create acceptance dir");
            (None, d)
        }
        None => {
            let t = tempfile::tempdir().expect("temp dir");
            let d = t.path().to_path_buf();
            (Some(t), d)
        }
    };
    let mut results: Vec<(u32, &str, Check)> = vec![
        (1, "gradient correctness", gradient_check()),
        (2, "oracle exactness", oracle_exactness()),
        (3, "value-iteration consistency", value_iteration_consistency()),
        (4, "loss identities", loss_identities()),
    ];
    let runs = desk_scale_runs(&work);
    results.push((5, "desk-scale learning", desk_scale_learning(&runs)));
    results.push((6, "ablation ordering", ablation_ordering(&runs)));
    results.push((7, "epoch-time ordering", epoch_time_ordering(&runs)));
    results.push((8, "rollout and metric plumbing", metric_plumbing(&runs)));
    results.push((9, "determinism", determinism(&work)));
    results.push((10, "value-map ordering", value_map_ordering(&work, &runs)));

    let mut failures = 0;
    for (id, name, r) in &results {
        let (ok, detail) = match r {
            Ok(o) => (o.passed, o.detail.clone()),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !ok {
            failures += 1;
        }
        println!("{} {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failures,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
