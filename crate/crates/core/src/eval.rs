//! Policy evaluation: per-step accuracy against the expert and closed-loop
//! rollouts through the navigation MDP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, Task};
use crate::error::{Error, Result};
use crate::models::{input_tensor, Network, ACTIONS};
use crate::nav::{ActionId, Cell, NavWorld, Terminal};
use crate::oracle::distance_field;

/// Anything that scores the eight actions at grid cells of a task.
pub trait Policy: Sync {
    /// One row of action scores per position; the argmax is the action taken.
    fn scores(&self, task: &Task, positions: &[Cell]) -> Result<Vec<[f32; ACTIONS]>>;
}

fn rows(flat: &[f32]) -> Vec<[f32; ACTIONS]> {
    flat.chunks_exact(ACTIONS)
        .map(|c| c.try_into().expect("chunk of eight"))
        .collect()
}

impl Policy for Network<f32> {
    fn scores(&self, task: &Task, positions: &[Cell]) -> Result<Vec<[f32; ACTIONS]>> {
        Ok(rows(self.infer(&input_tensor(&task.input), positions)?.data()))
    }
}

/// The expert itself: a one-hot score on the optimal action, zeros at the
/// goal and at unreachable cells.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn scores(&self, task: &Task, positions: &[Cell]) -> Result<Vec<[f32; ACTIONS]>> {
        let field = distance_field(&task.world);
        Ok(positions
            .iter()
            .map(|&p| {
                let mut row = [0.0; ACTIONS];
                if let Ok(a) = field.optimal_action(p) {
                    row[a.index()] = 1.0;
                }
                row
            })
            .collect())
    }
}

/// Independent uniform scores for every query, seeded per task.
#[derive(Clone, Copy, Debug)]
pub struct RandomPolicy {
    pub seed: u64,
}

impl Policy for RandomPolicy {
    fn scores(&self, task: &Task, positions: &[Cell]) -> Result<Vec<[f32; ACTIONS]>> {
        let g = task.world.goal();
        let key = derive_seed(derive_seed(self.seed, task.map_index as u64), (g.y as u64) << 32 | g.x as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        Ok(positions
            .iter()
            .map(|_| std::array::from_fn(|_| rng.gen::<f32>()))
            .collect())
    }
}

/// Policy defined by a closure over `(task, position)`.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&Task, Cell) -> ActionId + Sync,
{
    fn scores(&self, task: &Task, positions: &[Cell]) -> Result<Vec<[f32; ACTIONS]>> {
        Ok(positions
            .iter()
            .map(|&p| {
                let mut row = [0.0; ACTIONS];
                row[(self.0)(task, p).index()] = 1.0;
                row
            })
            .collect())
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Scores for every cell of the task's grid, row-major.
pub fn cell_table(policy: &dyn Policy, task: &Task) -> Result<Vec<[f32; ACTIONS]>> {
    let cells: Vec<Cell> = task.world.cells().collect();
    policy.scores(task, &cells)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub hits: usize,
    pub total: usize,
}

impl Tally {
    pub fn fraction(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::EmptySplit);
        }
        Ok(self.hits as f64 / self.total as f64)
    }

    fn add(self, o: Tally) -> Tally {
        Tally {
            hits: self.hits + o.hits,
            total: self.total + o.total,
        }
    }
}

fn task_accuracy(policy: &dyn Policy, task: &Task) -> Result<Tally> {
    let scores = policy.scores(task, &task.positions())?;
    let hits = scores
        .iter()
        .zip(&task.samples)
        .filter(|(row, (_, label))| argmax(&row[..]) == label.index())
        .count();
    Ok(Tally {
        hits,
        total: task.samples.len(),
    })
}

/// Fraction of samples whose argmax action equals the expert label.
pub fn step_accuracy(policy: &dyn Policy, tasks: &[Task]) -> Result<f64> {
    tasks
        .par_iter()
        .map(|t| task_accuracy(policy, t))
        .try_reduce(Tally::default, |a, b| Ok(a.add(b)))?
        .fraction()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    pub positions: Vec<Cell>,
    pub terminal: Terminal,
}

impl Rollout {
    pub fn success(&self) -> bool {
        self.terminal == Terminal::Success
    }
}

/// Follows the argmax action of a precomputed cell table until the episode
/// ends.
pub fn rollout_with_table(table: &[[f32; ACTIONS]], world: &NavWorld, start: Cell) -> Result<Rollout> {
    let mut state = world.start(start)?;
    let mut positions = vec![start];
    while !state.is_terminal() {
        let row = &table[world.index(state.pos)];
        let a = ActionId::new(argmax(row) as u8)?;
        state = state.step(a)?.next;
        positions.push(state.pos);
    }
    Ok(Rollout {
        positions,
        terminal: state.terminal.expect("loop exits on terminal"),
    })
}

pub fn rollout(policy: &dyn Policy, task: &Task, start: Cell, max_steps: usize) -> Result<Rollout> {
    let world = task.world.clone().with_max_steps(max_steps);
    rollout_with_table(&cell_table(policy, task)?, &world, start)
}

/// Where success-rate rollouts begin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// The dataset's stored trajectory starts.
    Stored,
    /// Fresh uniformly drawn reachable starts, this many per task.
    Random { per_task: usize, seed: u64 },
}

fn task_starts(task: &Task, mode: StartMode) -> Vec<Cell> {
    match mode {
        StartMode::Stored => task.starts.clone(),
        StartMode::Random { per_task, seed } => {
            let field = distance_field(&task.world);
            let reachable = field.reachable_starts();
            if reachable.is_empty() {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, task.map_index as u64));
            (0..per_task)
                .map(|_| reachable[rng.gen_range(0..reachable.len())])
                .collect()
        }
    }
}

/// Fraction of rollouts that reach the goal.
pub fn success_rate(policy: &dyn Policy, tasks: &[Task], mode: StartMode) -> Result<f64> {
    tasks
        .par_iter()
        .map(|task| -> Result<Tally> {
            let table = cell_table(policy, task)?;
            let mut t = Tally::default();
            for s in task_starts(task, mode) {
                t.total += 1;
                if rollout_with_table(&table, &task.world, s)?.success() {
                    t.hits += 1;
                }
            }
            Ok(t)
        })
        .try_reduce(Tally::default, |a, b| Ok(a.add(b)))?
        .fraction()
}

/// The four headline numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_succ: f64,
    pub test_succ: f64,
}

pub fn evaluate(policy: &dyn Policy, train: &[Task], test: &[Task], mode: StartMode) -> Result<EvalReport> {
    Ok(EvalReport {
        train_acc: step_accuracy(policy, train)?,
        test_acc: step_accuracy(policy, test)?,
        train_succ: success_rate(policy, train, mode)?,
        test_succ: success_rate(policy, test, mode)?,
    })
}
