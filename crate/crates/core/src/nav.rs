//! Grid navigation MDP at compressed (cell) resolution.
//!
//! Axis convention: `x` is the column index and grows eastward, `y` is the
//! row index and grows southward. One action moves the rover by one cell.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reward for a transition that lands on the goal.
pub const GOAL_REWARD: f64 = 1.0;
/// Reward for every other transition.
pub const STEP_REWARD: f64 = -1.0;

/// Grid coordinate. Signed so that off-grid successors are representable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn offset(self, (dx, dy): (i32, i32)) -> Cell {
        Cell::new(self.x + dx, self.y + dy)
    }

    /// Chebyshev distance, the obstacle-free step count under 8-connectivity.
    pub fn chebyshev(self, other: Cell) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

impl From<[i32; 2]> for Cell {
    fn from([x, y]: [i32; 2]) -> Self {
        Cell::new(x, y)
    }
}

impl From<Cell> for [i32; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

/// One of the eight compass moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ActionId(u8);

impl ActionId {
    pub const COUNT: usize = 8;
    pub const EAST: ActionId = ActionId(0);
    pub const SOUTH: ActionId = ActionId(1);
    pub const WEST: ActionId = ActionId(2);
    pub const NORTH: ActionId = ActionId(3);
    pub const SOUTHEAST: ActionId = ActionId(4);
    pub const NORTHEAST: ActionId = ActionId(5);
    pub const SOUTHWEST: ActionId = ActionId(6);
    pub const NORTHWEST: ActionId = ActionId(7);

    const DELTAS: [(i32, i32); 8] = [
        (1, 0),
        (0, 1),
        (-1, 0),
        (0, -1),
        (1, 1),
        (1, -1),
        (-1, 1),
        (-1, -1),
    ];

    const NAMES: [&'static str; 8] = [
        "east",
        "south",
        "west",
        "north",
        "southeast",
        "northeast",
        "southwest",
        "northwest",
    ];

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < Self::COUNT {
            Ok(ActionId(value))
        } else {
            Err(Error::InvalidAction(value))
        }
    }

    pub fn all() -> impl Iterator<Item = ActionId> {
        (0..Self::COUNT as u8).map(ActionId)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Coordinate increment `(dx, dy)` for this move.
    pub fn delta(self) -> (i32, i32) {
        Self::DELTAS[self.index()]
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    /// Inverse of [`ActionId::delta`].
    pub fn from_delta(delta: (i32, i32)) -> Option<ActionId> {
        Self::DELTAS
            .iter()
            .position(|&d| d == delta)
            .map(|i| ActionId(i as u8))
    }
}

impl TryFrom<u8> for ActionId {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        ActionId::new(value)
    }
}

impl From<ActionId> for u8 {
    fn from(a: ActionId) -> u8 {
        a.0
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.0, self.name())
    }
}

/// Convenience wrapper over [`ActionId::delta`].
pub fn action_delta(a: ActionId) -> (i32, i32) {
    a.delta()
}

/// Immutable navigation problem: traversability grid plus goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavWorld {
    size: usize,
    safe: Vec<bool>,
    goal: Cell,
    source_map_id: String,
    cell_size: usize,
    max_steps: usize,
}

impl NavWorld {
    /// `safe` is row-major, `size * size` long. `max_steps` defaults to `4 * size`.
    pub fn new(
        size: usize,
        safe: Vec<bool>,
        goal: Cell,
        source_map_id: impl Into<String>,
        cell_size: usize,
    ) -> Result<Self> {
        if size < 1 {
            return Err(Error::InvalidWorld("grid must have at least one cell".into()));
        }
        if safe.len() != size * size {
            return Err(Error::InvalidWorld(format!(
                "grid holds {} cells, expected {}",
                safe.len(),
                size * size
            )));
        }
        if cell_size == 0 {
            return Err(Error::InvalidWorld("cell size must be positive".into()));
        }
        let world = NavWorld {
            size,
            safe,
            goal,
            source_map_id: source_map_id.into(),
            cell_size,
            max_steps: 4 * size,
        };
        if !world.in_grid(goal) {
            return Err(Error::OutOfGrid { cell: goal, size });
        }
        if !world.is_safe(goal) {
            return Err(Error::InvalidWorld(format!("goal {goal:?} is not traversable")));
        }
        Ok(world)
    }

    /// All-safe world, mostly for tests and fixtures.
    pub fn open(size: usize, goal: Cell) -> Result<Self> {
        NavWorld::new(size, vec![true; size * size], goal, "open", 1)
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_goal(&self, goal: Cell) -> Result<Self> {
        let mut w = NavWorld::new(
            self.size,
            self.safe.clone(),
            goal,
            self.source_map_id.clone(),
            self.cell_size,
        )?;
        w.max_steps = self.max_steps;
        Ok(w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn source_map_id(&self) -> &str {
        &self.source_map_id
    }

    pub fn grid(&self) -> &[bool] {
        &self.safe
    }

    pub fn in_grid(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.size && (c.y as usize) < self.size
    }

    /// Row-major index of an in-grid cell.
    pub fn index(&self, c: Cell) -> usize {
        debug_assert!(self.in_grid(c));
        c.y as usize * self.size + c.x as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index % self.size) as i32, (index / self.size) as i32)
    }

    /// In-grid and traversable.
    pub fn is_safe(&self, c: Cell) -> bool {
        self.in_grid(c) && self.safe[self.index(c)]
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.size * self.size).map(move |i| self.cell_at(i))
    }

    pub fn start(&self, pos: Cell) -> Result<NavState<'_>> {
        if !self.in_grid(pos) {
            return Err(Error::OutOfGrid {
                cell: pos,
                size: self.size,
            });
        }
        let terminal = if pos == self.goal {
            Some(Terminal::Success)
        } else if !self.is_safe(pos) {
            Some(Terminal::HitRisky)
        } else {
            None
        };
        Ok(NavState {
            world: self,
            pos,
            step_count: 0,
            terminal,
        })
    }
}

/// Why an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    Success,
    HitRisky,
    OffGrid,
    StepLimit,
}

#[derive(Clone, Copy, Debug)]
pub struct NavState<'w> {
    pub world: &'w NavWorld,
    pub pos: Cell,
    pub step_count: usize,
    pub terminal: Option<Terminal>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepResult<'w> {
    pub next: NavState<'w>,
    pub reward: f64,
}

impl<'w> NavState<'w> {
    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn step(&self, a: ActionId) -> Result<StepResult<'w>> {
        if let Some(t) = self.terminal {
            return Err(Error::SteppedTerminal(t));
        }
        let world = self.world;
        let pos = self.pos.offset(a.delta());
        let step_count = self.step_count + 1;
        let reward = if pos == world.goal {
            GOAL_REWARD
        } else {
            STEP_REWARD
        };
        let terminal = if pos == world.goal {
            Some(Terminal::Success)
        } else if !world.in_grid(pos) {
            Some(Terminal::OffGrid)
        } else if !world.is_safe(pos) {
            Some(Terminal::HitRisky)
        } else if step_count >= world.max_steps {
            Some(Terminal::StepLimit)
        } else {
            None
        };
        Ok(StepResult {
            next: NavState {
                world,
                pos,
                step_count,
                terminal,
            },
            reward,
        })
    }
}

/// True iff every cell is safe, consecutive cells are one move apart, and the
/// last cell is the goal.
pub fn is_successful_trajectory(world: &NavWorld, positions: &[Cell]) -> Result<bool> {
    let last = *positions
        .last()
        .ok_or_else(|| Error::MalformedTrajectory("empty trajectory".into()))?;
    for (i, w) in positions.windows(2).enumerate() {
        let delta = (w[1].x - w[0].x, w[1].y - w[0].y);
        if ActionId::from_delta(delta).is_none() {
            return Err(Error::MalformedTrajectory(format!(
                "positions {i} and {} ({:?} -> {:?}) are not adjacent",
                i + 1,
                w[0],
                w[1]
            )));
        }
    }
    Ok(positions.iter().all(|&c| world.is_safe(c)) && last == world.goal)
}

/// `sum_t gamma^t r_t`; zero for an empty sequence.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidParams(format!("gamma {gamma} outside (0, 1]")));
    }
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    Ok(total)
}
