//! Exact planning on the traversability grid: shortest-path distance field,
//! tabular value iteration, and expert trajectories.
//!
//! All eight moves cost one step and corner cutting is allowed, so the
//! obstacle-free metric is Chebyshev distance.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nav::{ActionId, Cell, NavWorld, GOAL_REWARD, STEP_REWARD};

/// Steps-to-goal for every cell; `None` where the goal is unreachable.
#[derive(Clone, Debug)]
pub struct DistanceField<'w> {
    world: &'w NavWorld,
    dist: Vec<Option<u32>>,
}

pub fn distance_field(world: &NavWorld) -> DistanceField<'_> {
    let n = world.size();
    let mut dist = vec![None; n * n];
    let goal = world.goal();
    dist[world.index(goal)] = Some(0);
    let mut queue = VecDeque::from([goal]);
    while let Some(c) = queue.pop_front() {
        let d = dist[world.index(c)].expect("queued cells are labelled");
        for a in ActionId::all() {
            // Moves are symmetric, so predecessors are the safe neighbors.
            let p = c.offset(a.delta());
            if world.is_safe(p) {
                let i = world.index(p);
                if dist[i].is_none() {
                    dist[i] = Some(d + 1);
                    queue.push_back(p);
                }
            }
        }
    }
    DistanceField { world, dist }
}

impl<'w> DistanceField<'w> {
    pub fn world(&self) -> &'w NavWorld {
        self.world
    }

    pub fn dist(&self, c: Cell) -> Option<u32> {
        if self.world.in_grid(c) {
            self.dist[self.world.index(c)]
        } else {
            None
        }
    }

    /// Distance as `f64`, `+inf` where unreachable or off-grid.
    pub fn dist_f64(&self, c: Cell) -> f64 {
        self.dist(c).map_or(f64::INFINITY, f64::from)
    }

    pub fn is_reachable(&self, c: Cell) -> bool {
        self.dist(c).is_some()
    }

    /// Every action whose successor is one step closer to the goal.
    pub fn optimal_actions(&self, pos: Cell) -> Vec<ActionId> {
        let Some(d) = self.dist(pos) else {
            return Vec::new();
        };
        if d == 0 {
            return Vec::new();
        }
        ActionId::all()
            .filter(|a| self.dist(pos.offset(a.delta())) == Some(d - 1))
            .collect()
    }

    /// Smallest action id among the distance-minimizing moves.
    pub fn optimal_action(&self, pos: Cell) -> Result<ActionId> {
        match self.dist(pos) {
            None => Err(Error::NoOptimalAction(pos, "goal unreachable")),
            Some(0) => Err(Error::NoOptimalAction(pos, "already at goal")),
            Some(_) => self
                .optimal_actions(pos)
                .first()
                .copied()
                .ok_or(Error::NoOptimalAction(pos, "no descending neighbor")),
        }
    }

    /// Greedy descent from `start` to the goal.
    pub fn sample_trajectory(&self, start: Cell) -> Result<ExpertTrajectory> {
        let d = self
            .dist(start)
            .ok_or(Error::NoOptimalAction(start, "goal unreachable"))?;
        let mut positions = Vec::with_capacity(d as usize + 1);
        let mut actions = Vec::with_capacity(d as usize);
        let mut pos = start;
        positions.push(pos);
        while pos != self.world.goal() {
            let a = self.optimal_action(pos)?;
            pos = pos.offset(a.delta());
            actions.push(a);
            positions.push(pos);
        }
        Ok(ExpertTrajectory {
            map_id: self.world.source_map_id().to_string(),
            goal: self.world.goal(),
            positions,
            actions,
        })
    }

    /// Reachable traversable cells other than the goal.
    pub fn reachable_starts(&self) -> Vec<Cell> {
        self.world
            .cells()
            .filter(|&c| matches!(self.dist(c), Some(d) if d > 0))
            .collect()
    }
}

pub fn optimal_action(field: &DistanceField<'_>, pos: Cell) -> Result<ActionId> {
    field.optimal_action(pos)
}

pub fn sample_trajectory(field: &DistanceField<'_>, start: Cell) -> Result<ExpertTrajectory> {
    field.sample_trajectory(start)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertTrajectory {
    pub map_id: String,
    pub goal: Cell,
    pub positions: Vec<Cell>,
    pub actions: Vec<ActionId>,
}

impl ExpertTrajectory {
    pub fn start(&self) -> Cell {
        self.positions[0]
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `(position, action)` pairs, one per step.
    pub fn steps(&self) -> impl Iterator<Item = (Cell, ActionId)> + '_ {
        self.positions.iter().copied().zip(self.actions.iter().copied())
    }

    pub fn validate(&self, world: &NavWorld) -> Result<()> {
        if self.positions.len() != self.actions.len() + 1 {
            return Err(Error::MalformedTrajectory(format!(
                "{} positions for {} actions",
                self.positions.len(),
                self.actions.len()
            )));
        }
        for (i, (p, a)) in self.steps().enumerate() {
            if p.offset(a.delta()) != self.positions[i + 1] {
                return Err(Error::MalformedTrajectory(format!(
                    "step {i}: action {a} does not lead from {p:?} to {:?}",
                    self.positions[i + 1]
                )));
            }
        }
        if !crate::nav::is_successful_trajectory(world, &self.positions)? {
            return Err(Error::MalformedTrajectory(
                "trajectory leaves safe cells or misses the goal".into(),
            ));
        }
        Ok(())
    }
}

/// Converged tabular values. Goal is absorbing with value 0; entering a risky
/// or off-grid cell is an absorbing failure that keeps paying the step reward
/// forever, worth `STEP_REWARD / (1 - gamma)`.
#[derive(Clone, Debug)]
pub struct ValueField {
    size: usize,
    pub v: Vec<f64>,
    pub q: Vec<[f64; 8]>,
    pub gamma: f64,
    pub iterations: usize,
}

impl ValueField {
    pub fn value(&self, c: Cell) -> f64 {
        self.v[c.y as usize * self.size + c.x as usize]
    }

    pub fn q_values(&self, c: Cell) -> [f64; 8] {
        self.q[c.y as usize * self.size + c.x as usize]
    }

    /// `argmax_a Q(c, a)`, smallest id among exact ties.
    pub fn greedy_action(&self, c: Cell) -> ActionId {
        let q = self.q_values(c);
        let mut best = 0;
        for a in 1..8 {
            if q[a] > q[best] {
                best = a;
            }
        }
        ActionId::new(best as u8).expect("index below 8")
    }
}

pub fn value_iteration(world: &NavWorld, gamma: f64, tol: f64) -> Result<ValueField> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParams(format!("gamma {gamma} outside (0, 1)")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParams(format!("tolerance {tol} must be positive")));
    }
    let n = world.size();
    let failure = STEP_REWARD / (1.0 - gamma);
    let goal = world.goal();
    let mut v: Vec<f64> = world
        .cells()
        .map(|c| if world.is_safe(c) { 0.0 } else { failure })
        .collect();
    let mut q = vec![[0.0; 8]; n * n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut next = v.clone();
        let mut delta: f64 = 0.0;
        for c in world.cells() {
            let i = world.index(c);
            if c == goal || !world.is_safe(c) {
                q[i] = [0.0; 8];
                continue;
            }
            for a in ActionId::all() {
                let s = c.offset(a.delta());
                q[i][a.index()] = if s == goal {
                    GOAL_REWARD
                } else if world.is_safe(s) {
                    STEP_REWARD + gamma * v[world.index(s)]
                } else {
                    STEP_REWARD + gamma * failure
                };
            }
            next[i] = q[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((next[i] - v[i]).abs());
        }
        v = next;
        if delta < tol {
            break;
        }
    }
    Ok(ValueField {
        size: n,
        v,
        q,
        gamma,
        iterations,
    })
}
