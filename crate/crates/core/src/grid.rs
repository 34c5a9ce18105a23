//! CoinGrid: a Minigrid-style gridworld with coloured coins.
//!
//! The agent turns left/right or moves forward; entering a coin cell collects
//! the coin. Per-transition ground-truth features are one indicator per coin
//! colour plus a constant step indicator, and a task is a weight vector over
//! those features.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 3;
pub const N_CHANNELS: usize = 5;
/// red, green, yellow, step.
pub const N_TRUE_FEATURES: usize = 4;
pub const STEP_FEATURE: usize = 3;
pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_STATE_CAP: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Orientation {
    North,
    East,
    South,
    West,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::North,
        Orientation::East,
        Orientation::South,
        Orientation::West,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn turn_left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn turn_right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Orientation::North => (0, -1),
            Orientation::East => (1, 0),
            Orientation::South => (0, 1),
            Orientation::West => (-1, 0),
        }
    }

    fn glyph(self) -> char {
        match self {
            Orientation::North => '^',
            Orientation::East => '>',
            Orientation::South => 'v',
            Orientation::West => '<',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Yellow];

    pub fn index(self) -> usize {
        self as usize
    }

    fn glyph(self) -> char {
        match self {
            Color::Red => 'R',
            Color::Green => 'G',
            Color::Yellow => 'Y',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Left = 0,
    Right = 1,
    Forward = 2,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Left, Action::Right, Action::Forward];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Preference weights over the ground-truth feature dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub weights: Vec<f64>,
}

impl TaskVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("task weights must be finite".into()));
        }
        Ok(Self { weights })
    }

    /// Coin-colour weights (red, green, yellow), zero step cost.
    pub fn coins(red: f64, green: f64, yellow: f64) -> Self {
        Self {
            weights: vec![red, green, yellow, 0.0],
        }
    }

    pub fn collect(color: Color) -> Self {
        let mut w = vec![0.0; N_TRUE_FEATURES];
        w[color.index()] = 1.0;
        Self { weights: w }
    }

    pub fn dot(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, f)| w * f).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub walls: BTreeSet<Cell>,
    pub coins: BTreeMap<Cell, Color>,
    pub start: (Cell, Orientation),
    pub episode_horizon: usize,
    pub respawn: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_cell: Cell,
    pub orientation: Orientation,
    /// Bit i set when the i-th coin of `GridSpec::coins` (in map order) remains.
    pub coin_mask: u64,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub features: [f64; N_TRUE_FEATURES],
    pub done: bool,
}

/// A binary `height × width × channels` tensor in row-major (y, x, c) order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub shape: [usize; 3],
    pub bits: Vec<bool>,
}

impl Observation {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            bits: vec![false; shape[0] * shape[1] * shape[2]],
        }
    }

    /// A `1 × n × 1` one-hot vector, used for tabular models.
    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut o = Self::zeros([1, n, 1]);
        o.bits[i] = true;
        o
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> bool {
        self.bits[(y * self.shape[1] + x) * self.shape[2] + c]
    }

    fn set(&mut self, y: usize, x: usize, c: usize) {
        let i = (y * self.shape[1] + x) * self.shape[2] + c;
        self.bits[i] = true;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Flat indices of the set bits.
    pub fn active(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("grid must be non-empty".into()));
        }
        let in_bounds = |c: &Cell| c.x < self.width && c.y < self.height;
        if let Some(c) = self.walls.iter().find(|c| !in_bounds(c)) {
            return Err(Error::InvalidArgument(format!("wall {c:?} out of bounds")));
        }
        for c in self.coins.keys() {
            if !in_bounds(c) {
                return Err(Error::InvalidArgument(format!("coin {c:?} out of bounds")));
            }
            if self.walls.contains(c) {
                return Err(Error::InvalidArgument(format!("coin {c:?} on a wall")));
            }
        }
        if self.coins.len() > 63 {
            return Err(Error::InvalidArgument("at most 63 coins supported".into()));
        }
        let start = self.start.0;
        if !in_bounds(&start) || self.walls.contains(&start) {
            return Err(Error::InvalidArgument(format!("start {start:?} is not a free cell")));
        }
        if self.coins.contains_key(&start) {
            return Err(Error::InvalidArgument(format!("start {start:?} is on a coin")));
        }
        if self.episode_horizon == 0 {
            return Err(Error::InvalidArgument("episode horizon must be positive".into()));
        }
        Ok(())
    }

    /// The 7×7 CoinGrid used throughout the experiments: two coins of each
    /// colour, walls in the four corners, agent in the centre facing north.
    pub fn coingrid() -> Self {
        Self::parse(CANONICAL_COINGRID).expect("canonical map is valid")
    }

    pub fn is_free(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height && !self.walls.contains(&c)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                if !self.walls.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn coin_list(&self) -> Vec<(Cell, Color)> {
        self.coins.iter().map(|(c, col)| (*c, *col)).collect()
    }

    fn coin_index(&self, cell: Cell) -> Option<usize> {
        self.coins.keys().position(|c| *c == cell)
    }

    pub fn full_mask(&self) -> u64 {
        if self.coins.is_empty() {
            0
        } else {
            (1u64 << self.coins.len()) - 1
        }
    }

    pub fn initial_state(&self) -> EnvState {
        EnvState {
            agent_cell: self.start.0,
            orientation: self.start.1,
            coin_mask: self.full_mask(),
            step: 0,
        }
    }

    pub fn faced_cell(&self, cell: Cell, o: Orientation) -> Option<Cell> {
        let (dx, dy) = o.delta();
        let x = cell.x as isize + dx;
        let y = cell.y as isize + dy;
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(Cell::new(x as usize, y as usize))
        }
    }

    pub fn remaining_coins(&self, state: &EnvState) -> Vec<(Cell, Color)> {
        self.coins
            .iter()
            .enumerate()
            .filter(|(i, _)| state.coin_mask & (1 << i) != 0)
            .map(|(_, (c, col))| (*c, *col))
            .collect()
    }

    pub fn step(&self, state: &EnvState, action: Action, task: &TaskVector) -> StepOutcome {
        let mut next = state.clone();
        next.step += 1;
        let mut features = [0.0; N_TRUE_FEATURES];
        features[STEP_FEATURE] = 1.0;
        match action {
            Action::Left => next.orientation = state.orientation.turn_left(),
            Action::Right => next.orientation = state.orientation.turn_right(),
            Action::Forward => {
                if let Some(target) = self.faced_cell(state.agent_cell, state.orientation) {
                    if !self.walls.contains(&target) {
                        next.agent_cell = target;
                        if let Some(i) = self.coin_index(target) {
                            if state.coin_mask & (1 << i) != 0 {
                                features[self.coins[&target].index()] = 1.0;
                                if !self.respawn {
                                    next.coin_mask &= !(1 << i);
                                }
                            }
                        }
                    }
                }
            }
        }
        let reward = task.dot(&features);
        let done = next.step >= self.episode_horizon || self.task_done(next.coin_mask, task);
        StepOutcome {
            next,
            reward,
            features,
            done,
        }
    }

    /// True when no coins remain at all, whatever the task.
    pub fn is_terminal(&self, state: &EnvState) -> bool {
        !self.respawn && state.coin_mask == 0
    }

    /// Coins whose colour the task rewards positively, as a bit mask.
    pub fn positive_mask(&self, task: &TaskVector) -> u64 {
        self.coins
            .values()
            .enumerate()
            .filter(|(_, c)| task.weights.get(c.index()).is_some_and(|&w| w > 0.0))
            .fold(0, |m, (i, _)| m | 1 << i)
    }

    /// The episode ends once every positively weighted coin is gone; a task
    /// rewarding no coin on the map runs until the map is empty.
    pub fn task_done(&self, mask: u64, task: &TaskVector) -> bool {
        if self.respawn {
            return false;
        }
        match self.positive_mask(task) {
            0 => mask == 0,
            pos => mask & pos == 0,
        }
    }

    pub fn is_terminal_for(&self, state: &EnvState, task: &TaskVector) -> bool {
        self.task_done(state.coin_mask, task)
    }

    /// Multi-channel observation: coin masks per colour, walls, and the agent
    /// cell together with the cell it faces.
    pub fn encode(&self, state: &EnvState) -> Observation {
        let mut obs = Observation::zeros(self.observation_shape());
        for (i, (cell, color)) in self.coins.iter().enumerate() {
            if state.coin_mask & (1 << i) != 0 {
                obs.set(cell.y, cell.x, color.index());
            }
        }
        for w in &self.walls {
            obs.set(w.y, w.x, 3);
        }
        let a = state.agent_cell;
        obs.set(a.y, a.x, 4);
        if let Some(f) = self.faced_cell(a, state.orientation) {
            obs.set(f.y, f.x, 4);
        }
        obs
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        [self.height, self.width, N_CHANNELS]
    }

    /// Whether the agent can stand on a cell carrying coin `bit` (if any)
    /// with `mask` coins remaining.
    fn admissible(&self, bit: Option<usize>, mask: u64) -> bool {
        if self.respawn {
            return true;
        }
        match bit {
            Some(b) => mask & (1 << b) == 0,
            // The last coin ends the episode where it was picked up.
            None => mask != 0 || self.coins.is_empty(),
        }
    }

    /// The other states that `encode` maps to the same observation.
    ///
    /// The agent channel marks the agent cell and the faced cell without
    /// telling them apart, so standing on A facing B looks like standing on B
    /// facing A. Orientations facing out of bounds from the same cell
    /// coincide as well.
    pub fn aliases(&self, state: &EnvState) -> Vec<EnvState> {
        let cell = state.agent_cell;
        match self.faced_cell(cell, state.orientation) {
            Some(f) => {
                if self.walls.contains(&f) || !self.admissible(self.coin_index(f), state.coin_mask) {
                    return Vec::new();
                }
                vec![EnvState {
                    agent_cell: f,
                    orientation: state.orientation.turn_left().turn_left(),
                    ..state.clone()
                }]
            }
            None => Orientation::ALL
                .into_iter()
                .filter(|&o| o != state.orientation && self.faced_cell(cell, o).is_none())
                .map(|o| EnvState {
                    orientation: o,
                    ..state.clone()
                })
                .collect(),
        }
    }

    /// Whether `encode` separates all enumerated states; false as soon as two
    /// free cells are adjacent.
    pub fn observation_is_injective(&self, cap: usize) -> Result<bool> {
        Ok(self
            .enumerate_states(cap)?
            .iter()
            .all(|s| self.aliases(s).is_empty()))
    }

    /// Every (cell, orientation, remaining coins) combination the dynamics can
    /// produce, with `step = 0`. The agent never stands on a coin that is still
    /// present unless coins respawn, and once every coin is gone it stands on
    /// a coin cell.
    pub fn enumerate_states(&self, cap: usize) -> Result<Vec<EnvState>> {
        self.validate()?;
        let free = self.free_cells();
        let n_masks: u128 = if self.respawn { 1 } else { 1u128 << self.coins.len() };
        let bound = free.len() as u128 * 4 * n_masks;
        if bound > cap as u128 {
            return Err(Error::StateSpaceTooLarge { count: bound, cap });
        }
        let coin_bits: Vec<Option<usize>> = free.iter().map(|c| self.coin_index(*c)).collect();
        let masks: Vec<u64> = if self.respawn {
            vec![self.full_mask()]
        } else {
            (0..n_masks as u64).rev().collect()
        };
        let mut out = Vec::with_capacity(bound as usize);
        for mask in masks {
            for (cell, bit) in free.iter().zip(&coin_bits) {
                if !self.admissible(*bit, mask) {
                    continue;
                }
                for o in Orientation::ALL {
                    out.push(EnvState {
                        agent_cell: *cell,
                        orientation: o,
                        coin_mask: mask,
                        step: 0,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Parse a textual map: `#` wall, `.` floor, `R`/`G`/`Y` coins, and one of
    /// `^ > v <` for the start cell and orientation.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(Error::MalformedMap("empty map".into()));
        }
        let width = rows[0].chars().count();
        let mut walls = BTreeSet::new();
        let mut coins = BTreeMap::new();
        let mut start = None;
        for (y, row) in rows.iter().enumerate() {
            let n = row.chars().count();
            if n != width {
                return Err(Error::MalformedMap(format!(
                    "row {} has {n} cells, expected {width}",
                    y + 1
                )));
            }
            for (x, ch) in row.chars().enumerate() {
                let cell = Cell::new(x, y);
                match ch {
                    '#' => {
                        walls.insert(cell);
                    }
                    '.' => {}
                    'R' => {
                        coins.insert(cell, Color::Red);
                    }
                    'G' => {
                        coins.insert(cell, Color::Green);
                    }
                    'Y' => {
                        coins.insert(cell, Color::Yellow);
                    }
                    '^' | '>' | 'v' | '<' => {
                        if start.is_some() {
                            return Err(Error::MalformedMap("more than one start".into()));
                        }
                        let o = match ch {
                            '^' => Orientation::North,
                            '>' => Orientation::East,
                            'v' => Orientation::South,
                            _ => Orientation::West,
                        };
                        start = Some((cell, o));
                    }
                    other => {
                        return Err(Error::MalformedMap(format!(
                            "unexpected character {other:?} at row {}, column {}",
                            y + 1,
                            x + 1
                        )))
                    }
                }
            }
        }
        let start = start.ok_or_else(|| Error::MalformedMap("no start marker".into()))?;
        let spec = GridSpec {
            width,
            height: rows.len(),
            walls,
            coins,
            start,
            episode_horizon: DEFAULT_HORIZON,
            respawn: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                let ch = if self.walls.contains(&c) {
                    '#'
                } else if let Some(col) = self.coins.get(&c) {
                    col.glyph()
                } else if self.start.0 == c {
                    self.start.1.glyph()
                } else {
                    '.'
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub const CANONICAL_COINGRID: &str = "\
#.....#
.R...G.
.......
.Y.^.Y.
.......
.G...R.
#.....#
";

/// Four rooms joined by doorways with a single red coin as the goal.
pub const FOUR_ROOMS: &str = "\
.....#.....
.....#.....
...........
.....#.....
.....#.....
##.####.###
.....#.....
.....#..R..
...........
.>...#.....
.....#.....
";

/// Dense index over `enumerate_states`, keyed on everything but `step`.
#[derive(Debug, Clone)]
pub struct StateIndex {
    states: Vec<EnvState>,
    index: HashMap<(Cell, Orientation, u64), usize>,
}

impl StateIndex {
    pub fn new(spec: &GridSpec, cap: usize) -> Result<Self> {
        let states = spec.enumerate_states(cap)?;
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.agent_cell, s.orientation, s.coin_mask), i))
            .collect();
        Ok(Self { states, index })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[EnvState] {
        &self.states
    }

    pub fn get(&self, s: &EnvState) -> Option<usize> {
        self.index.get(&(s.agent_cell, s.orientation, s.coin_mask)).copied()
    }
}

/// Breadth-first reachability from the start state, ignoring the step counter.
pub fn reachable_states(spec: &GridSpec) -> BTreeSet<(Cell, Orientation, u64)> {
    let task = TaskVector::coins(0.0, 0.0, 0.0);
    let start = spec.initial_state();
    let key = |s: &EnvState| (s.agent_cell, s.orientation, s.coin_mask);
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::new();
    seen.insert(key(&start));
    queue.push_back(start);
    while let Some(s) = queue.pop_front() {
        if spec.is_terminal(&s) {
            continue;
        }
        for a in Action::ALL {
            let mut n = spec.step(&s, a, &task).next;
            n.step = 0;
            if seen.insert(key(&n)) {
                queue.push_back(n);
            }
        }
    }
    seen
}
