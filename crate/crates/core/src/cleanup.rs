//! Cleanup: a gridworld public-goods dilemma.
//!
//! Waste accumulates in the river; apples grow in the orchard at a rate that
//! falls with river pollution. Eating an apple pays +1, cleaning pays nothing.
//!
//! A step resolves, in order: movement and turning, apple consumption, beams,
//! waste spawning, apple spawning, then credo mixing of the step's rewards.

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::credo::{credo_reward_all, CredoVector, RewardVector, TeamStructure};
use crate::error::{Error, Result};
use crate::ipd::CredoAssignment;
use crate::learners::{PatrolBounds, PolicyGradientAgent, PolicyGradientConfig, Role, ScriptedCleanupRole};
use crate::metrics::{equality, final_quarter_start};

pub const DEFAULT_MAP: &str = include_str!("../maps/cleanup_default.txt");

// Observation cell codes.
pub const CODE_WALL: u8 = 0;
pub const CODE_EMPTY: u8 = 1;
pub const CODE_RIVER: u8 = 2;
pub const CODE_WASTE: u8 = 3;
pub const CODE_ORCHARD: u8 = 4;
pub const CODE_APPLE: u8 = 5;
/// Agents are encoded as `CODE_AGENT_BASE + team`.
pub const CODE_AGENT_BASE: u8 = 10;

pub fn is_agent_code(code: u8) -> bool {
    code >= CODE_AGENT_BASE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position {
    pub x: usize,
    pub y: usize,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    North,
    East,
    South,
    West,
}

impl Orientation {
    pub fn delta(self) -> (i64, i64) {
        match self {
            Orientation::North => (0, -1),
            Orientation::East => (1, 0),
            Orientation::South => (0, 1),
            Orientation::West => (-1, 0),
        }
    }

    pub fn right(self) -> Self {
        match self {
            Orientation::North => Orientation::East,
            Orientation::East => Orientation::South,
            Orientation::South => Orientation::West,
            Orientation::West => Orientation::North,
        }
    }

    pub fn left(self) -> Self {
        self.right().right().right()
    }

    pub fn opposite(self) -> Self {
        self.right().right()
    }

    /// Neighbouring cell inside a `width x height` grid.
    pub fn offset(self, p: Position, width: usize, height: usize) -> Option<Position> {
        let (dx, dy) = self.delta();
        translate(p, dx, dy, width, height)
    }
}

fn translate(p: Position, dx: i64, dy: i64, width: usize, height: usize) -> Option<Position> {
    let x = p.x as i64 + dx;
    let y = p.y as i64 + dy;
    (x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height).then_some(Position {
        x: x as usize,
        y: y as usize,
    })
}

/// Cells of a beam fired from `origin`: `length` cells ahead, `width` cells
/// across (centred), clipped to the grid.
pub fn beam_cells(
    origin: Position,
    facing: Orientation,
    length: usize,
    width: usize,
    grid_width: usize,
    grid_height: usize,
) -> impl Iterator<Item = Position> {
    let (fx, fy) = facing.delta();
    let (lx, ly) = facing.right().delta();
    let half = (width / 2) as i64;
    (1..=length as i64).flat_map(move |k| {
        (-half..=half).filter_map(move |w| translate(origin, fx * k + lx * w, fy * k + ly * w, grid_width, grid_height))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CleanupAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
    TurnLeft,
    TurnRight,
    CleanBeam,
    PunishBeam,
}

impl CleanupAction {
    pub const ALL: [CleanupAction; 9] = [
        CleanupAction::Up,
        CleanupAction::Down,
        CleanupAction::Left,
        CleanupAction::Right,
        CleanupAction::Stay,
        CleanupAction::TurnLeft,
        CleanupAction::TurnRight,
        CleanupAction::CleanBeam,
        CleanupAction::PunishBeam,
    ];

    pub fn moving(dir: Orientation) -> Self {
        match dir {
            Orientation::North => CleanupAction::Up,
            Orientation::South => CleanupAction::Down,
            Orientation::West => CleanupAction::Left,
            Orientation::East => CleanupAction::Right,
        }
    }

    /// Movement direction, for the four move actions. Moves are in map
    /// directions and leave the agent's orientation unchanged.
    pub fn direction(self) -> Option<Orientation> {
        match self {
            CleanupAction::Up => Some(Orientation::North),
            CleanupAction::Down => Some(Orientation::South),
            CleanupAction::Left => Some(Orientation::West),
            CleanupAction::Right => Some(Orientation::East),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Wall,
    Empty,
    River,
    Orchard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    /// Spawn point for each digit `0..=9` present in the layout.
    spawns: Vec<Option<Position>>,
    river: Vec<usize>,
    orchard: Vec<usize>,
}

impl GridMap {
    /// Parses the ASCII layout: `R` river, `O` orchard, `.` empty, `#` wall,
    /// digits mark spawn points on empty ground.
    pub fn parse(layout: &str) -> Result<Self> {
        let lines: Vec<&str> = layout.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let height = lines.len();
        let width = lines.first().map_or(0, |l| l.chars().count());
        if height < 3 || width < 3 {
            return Err(Error::config("map must be at least 3x3"));
        }
        let mut cells = Vec::with_capacity(width * height);
        let mut spawns = vec![None; 10];
        for (y, line) in lines.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::config(format!("map row {y} has a different width")));
            }
            for (x, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Empty,
                    'R' => Cell::River,
                    'O' => Cell::Orchard,
                    d @ '0'..='9' => {
                        let idx = d.to_digit(10).unwrap() as usize;
                        if spawns[idx].is_some() {
                            return Err(Error::config(format!("spawn point {d} appears twice")));
                        }
                        spawns[idx] = Some(Position { x, y });
                        Cell::Empty
                    }
                    other => return Err(Error::config(format!("unknown map character {other:?} at ({x}, {y})"))),
                };
                let border = x == 0 || y == 0 || x == width - 1 || y == height - 1;
                if border && cell != Cell::Wall {
                    return Err(Error::config(format!("border cell ({x}, {y}) is not a wall")));
                }
                cells.push(cell);
            }
        }
        let river: Vec<usize> = (0..cells.len()).filter(|&i| cells[i] == Cell::River).collect();
        let orchard: Vec<usize> = (0..cells.len()).filter(|&i| cells[i] == Cell::Orchard).collect();
        if river.is_empty() || orchard.is_empty() {
            return Err(Error::config("map needs both river and orchard cells"));
        }
        Ok(Self {
            width,
            height,
            cells,
            spawns,
            river,
            orchard,
        })
    }

    pub fn default_map() -> Self {
        Self::parse(DEFAULT_MAP).expect("bundled map is valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn index(&self, p: Position) -> usize {
        p.y * self.width + p.x
    }

    pub fn position(&self, idx: usize) -> Position {
        Position {
            x: idx % self.width,
            y: idx / self.width,
        }
    }

    pub fn cell(&self, p: Position) -> Cell {
        self.cells[self.index(p)]
    }

    pub fn river_cells(&self) -> &[usize] {
        &self.river
    }

    pub fn orchard_cells(&self) -> &[usize] {
        &self.orchard
    }

    pub fn spawn_points(&self) -> impl Iterator<Item = Position> + '_ {
        self.spawns.iter().flatten().copied()
    }

    fn bounds_of(&self, idxs: &[usize]) -> PatrolBounds {
        let ps = idxs.iter().map(|&i| self.position(i));
        let (mut lo, mut hi) = (
            Position {
                x: usize::MAX,
                y: usize::MAX,
            },
            Position { x: 0, y: 0 },
        );
        for p in ps {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        PatrolBounds { min: lo, max: hi }
    }

    pub fn river_bounds(&self) -> PatrolBounds {
        self.bounds_of(&self.river)
    }

    pub fn orchard_bounds(&self) -> PatrolBounds {
        self.bounds_of(&self.orchard)
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Position { x, y };
                let spawn = self.spawns.iter().position(|sp| *sp == Some(p));
                s.push(match (spawn, self.cell(p)) {
                    (Some(d), _) => char::from_digit(d as u32, 10).unwrap(),
                    (None, Cell::Wall) => '#',
                    (None, Cell::Empty) => '.',
                    (None, Cell::River) => 'R',
                    (None, Cell::Orchard) => 'O',
                });
            }
            s.push('\n');
        }
        s
    }
}

/// How agents choose actions in a Cleanup run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySpec {
    /// Agents `0..cleaners` are scripted cleaners, the rest scripted pickers.
    Scripted { cleaners: usize },
    /// Uniformly random actions.
    Random,
    /// Toy clipped-surrogate policy-gradient learners, updated after every episode.
    PolicyGradient,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Scripted { cleaners: 2 }
    }
}

fn d_num_agents() -> usize {
    6
}
fn d_num_teams() -> usize {
    3
}
fn d_episode_length() -> usize {
    1000
}
fn d_episodes() -> u64 {
    1
}
fn d_waste_spawn_prob() -> f64 {
    0.5
}
fn d_apple_respawn_rate() -> f64 {
    0.05
}
fn d_depletion() -> f64 {
    0.4
}
fn d_beam_length() -> usize {
    5
}
fn d_beam_width() -> usize {
    3
}
fn d_punish_hit() -> f64 {
    -50.0
}
fn d_punish_cost() -> f64 {
    -1.0
}
fn d_window() -> usize {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanupConfig {
    #[serde(default = "d_num_agents")]
    pub num_agents: usize,
    #[serde(default = "d_num_teams")]
    pub num_teams: usize,
    #[serde(default = "d_episode_length")]
    pub episode_length: usize,
    #[serde(default = "d_episodes")]
    pub episodes: u64,
    /// Expected number of new waste cells per step, spread over clean river cells.
    #[serde(default = "d_waste_spawn_prob")]
    pub waste_spawn_prob: f64,
    #[serde(default = "d_apple_respawn_rate")]
    pub apple_respawn_rate: f64,
    #[serde(default = "d_depletion")]
    pub waste_threshold_depletion: f64,
    #[serde(default)]
    pub waste_threshold_restored: f64,
    #[serde(default = "d_beam_length")]
    pub beam_length: usize,
    #[serde(default = "d_beam_width")]
    pub beam_width: usize,
    #[serde(default = "d_punish_hit")]
    pub punish_penalty_hit: f64,
    #[serde(default = "d_punish_cost")]
    pub punish_cost_firer: f64,
    #[serde(default = "d_window")]
    pub observation_window: usize,
    #[serde(default)]
    pub seed: u64,
    pub credos: CredoAssignment,
    /// Alternative ASCII map file; the bundled map is used when absent.
    #[serde(default)]
    pub map: Option<PathBuf>,
    #[serde(default)]
    pub policies: PolicySpec,
}

impl CleanupConfig {
    pub fn with_credo(credo: CredoVector) -> Self {
        Self {
            num_agents: d_num_agents(),
            num_teams: d_num_teams(),
            episode_length: d_episode_length(),
            episodes: d_episodes(),
            waste_spawn_prob: d_waste_spawn_prob(),
            apple_respawn_rate: d_apple_respawn_rate(),
            waste_threshold_depletion: d_depletion(),
            waste_threshold_restored: 0.0,
            beam_length: d_beam_length(),
            beam_width: d_beam_width(),
            punish_penalty_hit: d_punish_hit(),
            punish_cost_firer: d_punish_cost(),
            observation_window: d_window(),
            seed: 0,
            credos: CredoAssignment::Homogeneous(credo),
            map: None,
            policies: PolicySpec::default(),
        }
    }

    pub fn validate(&self) -> Result<TeamStructure> {
        if self.num_agents == 0 || self.num_teams == 0 || !self.num_agents.is_multiple_of(self.num_teams) {
            return Err(Error::config(format!(
                "{} agents cannot form {} equal teams",
                self.num_agents, self.num_teams
            )));
        }
        if self.episode_length == 0 {
            return Err(Error::validation("episode_length must be positive"));
        }
        for (name, v) in [
            ("waste_threshold_depletion", self.waste_threshold_depletion),
            ("waste_threshold_restored", self.waste_threshold_restored),
            ("apple_respawn_rate", self.apple_respawn_rate),
            ("waste_spawn_prob", self.waste_spawn_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.waste_threshold_restored > self.waste_threshold_depletion {
            return Err(Error::validation(
                "waste_threshold_restored exceeds waste_threshold_depletion",
            ));
        }
        if self.beam_length == 0 || self.beam_width.is_multiple_of(2) {
            return Err(Error::validation("beam_length must be positive and beam_width odd"));
        }
        if self.observation_window.is_multiple_of(2) {
            return Err(Error::validation("observation_window must be odd"));
        }
        if self.punish_penalty_hit > 0.0 || self.punish_cost_firer > 0.0 {
            return Err(Error::validation("punishment values must be <= 0"));
        }
        if let PolicySpec::Scripted { cleaners } = self.policies {
            if cleaners > self.num_agents {
                return Err(Error::config("more scripted cleaners than agents"));
            }
        }
        self.credos.expand(self.num_agents)?;
        TeamStructure::equal_teams(self.num_agents, self.num_teams)
    }

    pub fn load_map(&self) -> Result<GridMap> {
        match &self.map {
            None => Ok(GridMap::default_map()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                GridMap::parse(&text)
            }
        }
    }
}

/// Per-cell apple spawn probability given river waste density.
pub fn apple_spawn_probability(density: f64, config: &CleanupConfig) -> f64 {
    let (hi, lo) = (config.waste_threshold_depletion, config.waste_threshold_restored);
    if density >= hi {
        0.0
    } else if density <= lo {
        config.apple_respawn_rate
    } else {
        config.apple_respawn_rate * (hi - density) / (hi - lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentPose {
    pub position: Position,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CleanupState {
    waste: Vec<bool>,
    apples: Vec<bool>,
    pub agents: Vec<AgentPose>,
    pub timestep: usize,
}

impl CleanupState {
    pub fn has_waste(&self, map: &GridMap, p: Position) -> bool {
        self.waste[map.index(p)]
    }

    pub fn has_apple(&self, map: &GridMap, p: Position) -> bool {
        self.apples[map.index(p)]
    }

    pub fn waste_count(&self) -> usize {
        self.waste.iter().filter(|w| **w).count()
    }

    pub fn apple_count(&self) -> usize {
        self.apples.iter().filter(|a| **a).count()
    }

    pub fn set_waste(&mut self, map: &GridMap, p: Position, on: bool) -> Result<()> {
        if on && map.cell(p) != Cell::River {
            return Err(Error::validation(format!("waste placed off-river at {p}")));
        }
        let i = map.index(p);
        self.waste[i] = on;
        Ok(())
    }

    pub fn set_apple(&mut self, map: &GridMap, p: Position, on: bool) -> Result<()> {
        if on && (map.cell(p) != Cell::Orchard || self.agents.iter().any(|a| a.position == p)) {
            return Err(Error::validation(format!(
                "apple placed on non-orchard or occupied cell {p}"
            )));
        }
        let i = map.index(p);
        self.apples[i] = on;
        Ok(())
    }

    fn agent_at(&self, p: Position) -> Option<usize> {
        self.agents.iter().position(|a| a.position == p)
    }

    /// Checks the occupancy invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self, map: &GridMap) -> std::result::Result<(), String> {
        for (i, a) in self.agents.iter().enumerate() {
            if map.cell(a.position) == Cell::Wall {
                return Err(format!("agent {i} inside a wall at {}", a.position));
            }
            if self.agents[..i].iter().any(|b| b.position == a.position) {
                return Err(format!("two agents share {}", a.position));
            }
            if self.apples[map.index(a.position)] {
                return Err(format!("agent {i} shares {} with an apple", a.position));
            }
        }
        for idx in 0..self.waste.len() {
            if self.waste[idx] && map.cells[idx] != Cell::River {
                return Err(format!("waste off-river at {}", map.position(idx)));
            }
            if self.apples[idx] && map.cells[idx] != Cell::Orchard {
                return Err(format!("apple off-orchard at {}", map.position(idx)));
            }
        }
        Ok(())
    }
}

/// Egocentric window of cell codes around one agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanupObservation {
    size: usize,
    codes: Vec<u8>,
    pub position: Position,
    pub orientation: Orientation,
    pub timestep: usize,
}

impl CleanupObservation {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn center(&self) -> Position {
        Position {
            x: self.size / 2,
            y: self.size / 2,
        }
    }

    pub fn code_at(&self, p: Position) -> u8 {
        self.codes[p.y * self.size + p.x]
    }

    /// Closest window cell (Manhattan distance from the centre) holding `code`;
    /// ties resolve in row-major order.
    pub fn nearest(&self, code: u8) -> Option<Position> {
        let c = self.center();
        (0..self.codes.len())
            .filter(|&i| self.codes[i] == code)
            .map(|i| Position {
                x: i % self.size,
                y: i / self.size,
            })
            .min_by_key(|p| p.x.abs_diff(c.x) + p.y.abs_diff(c.y))
    }
}

/// Decides a Cleanup action from an observation.
pub trait CleanupPolicy: Send {
    fn act(&mut self, obs: &CleanupObservation, rng: &mut ChaCha8Rng) -> CleanupAction;

    /// Called with the agent's credo reward after every step.
    fn observe_reward(&mut self, _credo_reward: f64) {}

    /// Called once at the end of every episode.
    fn end_episode(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Uniformly random actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl CleanupPolicy for RandomPolicy {
    fn act(&mut self, _obs: &CleanupObservation, rng: &mut ChaCha8Rng) -> CleanupAction {
        *CleanupAction::ALL.choose(rng).unwrap()
    }
}

/// Wraps a [`PolicyGradientAgent`] so it learns from its credo reward.
#[derive(Debug, Clone, Default)]
pub struct LearningPolicy {
    pub agent: PolicyGradientAgent,
    pub config: PolicyGradientConfig,
}

impl CleanupPolicy for LearningPolicy {
    fn act(&mut self, obs: &CleanupObservation, rng: &mut ChaCha8Rng) -> CleanupAction {
        self.agent.act(obs, rng)
    }

    fn observe_reward(&mut self, credo_reward: f64) {
        self.agent.record_reward(credo_reward);
    }

    fn end_episode(&mut self) -> Result<()> {
        self.agent.finish_episode(&self.config).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentStepEvents {
    pub ate_apple: bool,
    pub fired_clean: bool,
    pub fired_punish: bool,
    pub times_punished: u32,
    pub waste_removed: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: RewardVector,
    pub credo_rewards: RewardVector,
    pub observations: Vec<CleanupObservation>,
    pub events: Vec<AgentStepEvents>,
    pub done: bool,
}

/// Static parts of a Cleanup game: map, teams, credos, dynamics constants.
#[derive(Debug, Clone)]
pub struct CleanupEnv {
    pub config: CleanupConfig,
    pub map: GridMap,
    pub structure: TeamStructure,
    pub credos: Vec<CredoVector>,
}

impl CleanupEnv {
    pub fn new(config: CleanupConfig) -> Result<Self> {
        let structure = config.validate()?;
        let map = config.load_map()?;
        Self::with_map(config, map, structure)
    }

    fn with_map(config: CleanupConfig, map: GridMap, structure: TeamStructure) -> Result<Self> {
        let passable = map
            .cells
            .iter()
            .filter(|c| **c != Cell::Wall && **c != Cell::Orchard)
            .count();
        if passable < config.num_agents {
            return Err(Error::config("map has too few free cells for the agents"));
        }
        Ok(Self {
            credos: config.credos.expand(config.num_agents)?,
            config,
            map,
            structure,
        })
    }

    pub fn with_custom_map(config: CleanupConfig, map: GridMap) -> Result<Self> {
        let structure = config.validate()?;
        Self::with_map(config, map, structure)
    }

    /// Clean river, empty orchard, agents on spawn points facing north.
    /// Agents beyond the map's spawn points start on random free non-orchard cells.
    pub fn reset(&self, rng: &mut ChaCha8Rng) -> CleanupState {
        let n_cells = self.map.cells.len();
        let mut agents: Vec<AgentPose> = self
            .map
            .spawn_points()
            .take(self.config.num_agents)
            .map(|position| AgentPose {
                position,
                orientation: Orientation::North,
            })
            .collect();
        if agents.len() < self.config.num_agents {
            let mut free: Vec<Position> = (0..n_cells)
                .filter(|&i| matches!(self.map.cells[i], Cell::Empty | Cell::River))
                .map(|i| self.map.position(i))
                .filter(|p| !agents.iter().any(|a| a.position == *p))
                .collect();
            free.shuffle(rng);
            for position in free.into_iter().take(self.config.num_agents - agents.len()) {
                agents.push(AgentPose {
                    position,
                    orientation: Orientation::North,
                });
            }
        }
        CleanupState {
            waste: vec![false; n_cells],
            apples: vec![false; n_cells],
            agents,
            timestep: 0,
        }
    }

    pub fn waste_density(&self, state: &CleanupState) -> f64 {
        let river = self.map.river_cells();
        river.iter().filter(|&&i| state.waste[i]).count() as f64 / river.len() as f64
    }

    pub fn render_observation(&self, state: &CleanupState, agent: usize) -> CleanupObservation {
        let size = self.config.observation_window;
        let half = (size / 2) as i64;
        let pose = state.agents[agent];
        let mut codes = vec![CODE_WALL; size * size];
        for wy in 0..size {
            for wx in 0..size {
                let Some(p) = translate(
                    pose.position,
                    wx as i64 - half,
                    wy as i64 - half,
                    self.map.width,
                    self.map.height,
                ) else {
                    continue;
                };
                let idx = self.map.index(p);
                codes[wy * size + wx] = if let Some(other) = state.agent_at(p) {
                    CODE_AGENT_BASE + self.structure.team_of(other).expect("agent in structure") as u8
                } else {
                    match self.map.cells[idx] {
                        Cell::Wall => CODE_WALL,
                        Cell::Empty => CODE_EMPTY,
                        Cell::River if state.waste[idx] => CODE_WASTE,
                        Cell::River => CODE_RIVER,
                        Cell::Orchard if state.apples[idx] => CODE_APPLE,
                        Cell::Orchard => CODE_ORCHARD,
                    }
                };
            }
        }
        CleanupObservation {
            size,
            codes,
            position: pose.position,
            orientation: pose.orientation,
            timestep: state.timestep,
        }
    }

    pub fn observations(&self, state: &CleanupState) -> Vec<CleanupObservation> {
        (0..state.agents.len())
            .map(|i| self.render_observation(state, i))
            .collect()
    }

    /// Advances the game by one step. Deterministic in `(state, actions, rng)`.
    pub fn step(
        &self,
        state: &mut CleanupState,
        actions: &[CleanupAction],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome> {
        let n = state.agents.len();
        if actions.len() != n {
            return Err(Error::validation(format!("{} actions for {n} agents", actions.len())));
        }
        if state.timestep >= self.config.episode_length {
            return Err(Error::validation("step past the end of the episode"));
        }
        let map = &self.map;
        let mut rewards = vec![0.0; n];
        let mut events = vec![AgentStepEvents::default(); n];

        // 1. turning, then movement with random priority among conflicting agents.
        let mut targets: Vec<Option<Position>> = vec![None; n];
        for (i, action) in actions.iter().enumerate() {
            let pose = &mut state.agents[i];
            match action {
                CleanupAction::TurnLeft => pose.orientation = pose.orientation.left(),
                CleanupAction::TurnRight => pose.orientation = pose.orientation.right(),
                _ => {}
            }
            if let Some(dir) = action.direction() {
                targets[i] = dir
                    .offset(pose.position, map.width, map.height)
                    .filter(|p| map.cell(*p) != Cell::Wall);
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        loop {
            let mut moved = false;
            for &i in &order {
                if let Some(t) = targets[i] {
                    if state.agent_at(t).is_none() {
                        state.agents[i].position = t;
                        targets[i] = None;
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }

        // 2. apple consumption.
        for (i, pose) in state.agents.iter().enumerate() {
            let idx = map.index(pose.position);
            if state.apples[idx] {
                state.apples[idx] = false;
                rewards[i] += 1.0;
                events[i].ate_apple = true;
            }
        }

        // 3. beams.
        let (len, width) = (self.config.beam_length, self.config.beam_width);
        for (i, action) in actions.iter().enumerate() {
            let pose = state.agents[i];
            match action {
                CleanupAction::CleanBeam => {
                    events[i].fired_clean = true;
                    for p in beam_cells(pose.position, pose.orientation, len, width, map.width, map.height) {
                        let idx = map.index(p);
                        if state.waste[idx] {
                            state.waste[idx] = false;
                            events[i].waste_removed += 1;
                        }
                    }
                }
                CleanupAction::PunishBeam => {
                    events[i].fired_punish = true;
                    rewards[i] += self.config.punish_cost_firer;
                    for p in beam_cells(pose.position, pose.orientation, len, width, map.width, map.height) {
                        if let Some(j) = state.agent_at(p) {
                            rewards[j] += self.config.punish_penalty_hit;
                            events[j].times_punished += 1;
                        }
                    }
                }
                _ => {}
            }
        }

        // 4. waste spawning.
        if self.waste_density(state) < self.config.waste_threshold_depletion {
            let clean: Vec<usize> = map.river.iter().copied().filter(|&i| !state.waste[i]).collect();
            if !clean.is_empty() {
                let p = (self.config.waste_spawn_prob / clean.len() as f64).min(1.0);
                for i in clean {
                    if rng.gen_bool(p) {
                        state.waste[i] = true;
                    }
                }
            }
        }

        // 5. apple spawning.
        let p_apple = apple_spawn_probability(self.waste_density(state), &self.config);
        if p_apple > 0.0 {
            for &i in &map.orchard {
                if !state.apples[i] && state.agent_at(map.position(i)).is_none() && rng.gen_bool(p_apple) {
                    state.apples[i] = true;
                }
            }
        }

        // 6. credo mixing.
        let rewards = RewardVector(rewards);
        let credo_rewards = credo_reward_all(&self.credos, &rewards, &self.structure)?;
        state.timestep += 1;
        Ok(StepOutcome {
            rewards,
            credo_rewards,
            observations: self.observations(state),
            events,
            done: state.timestep == self.config.episode_length,
        })
    }

    /// Policies for the configured [`PolicySpec`].
    pub fn build_policies(&self) -> Vec<Box<dyn CleanupPolicy>> {
        let c = &self.config;
        (0..c.num_agents)
            .map(|i| -> Box<dyn CleanupPolicy> {
                match c.policies {
                    PolicySpec::Scripted { cleaners } => {
                        let role = if i < cleaners { Role::Cleaner } else { Role::Picker };
                        Box::new(ScriptedCleanupRole::for_map(
                            role,
                            &self.map,
                            c.observation_window,
                            c.beam_length,
                            c.beam_width,
                        ))
                    }
                    PolicySpec::Random => Box::new(RandomPolicy),
                    PolicySpec::PolicyGradient => Box::new(LearningPolicy::default()),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentEpisodeLog {
    pub agent_id: usize,
    pub team: usize,
    pub apples: u64,
    pub cleans: u64,
    pub punishes: u64,
    pub exo_reward: f64,
    pub credo_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub agents: Vec<AgentEpisodeLog>,
    pub population_exo_per_step: Vec<f64>,
    pub population_credo_per_step: Vec<f64>,
    pub waste_density_per_step: Vec<f64>,
}

impl EpisodeLog {
    /// Mean population exogenous reward per step over the final quarter.
    pub fn final_quarter_exo_per_step(&self) -> f64 {
        let tail = &self.population_exo_per_step[final_quarter_start(self.population_exo_per_step.len())..];
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }

    pub fn total_apples(&self) -> u64 {
        self.agents.iter().map(|a| a.apples).sum()
    }
}

/// Runs one episode from a fresh reset. The environment and the policies draw
/// from separate streams of `rng`'s seed so policy randomness cannot perturb
/// the environment's dynamics stream.
pub fn run_cleanup_episode(
    env: &CleanupEnv,
    policies: &mut [Box<dyn CleanupPolicy>],
    env_rng: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
) -> Result<EpisodeLog> {
    let n = env.config.num_agents;
    if policies.len() != n {
        return Err(Error::validation(format!("{} policies for {n} agents", policies.len())));
    }
    let mut state = env.reset(env_rng);
    let mut obs = env.observations(&state);
    let mut agents: Vec<AgentEpisodeLog> = (0..n)
        .map(|i| AgentEpisodeLog {
            agent_id: i,
            team: env.structure.team_of(i).expect("agent in structure"),
            apples: 0,
            cleans: 0,
            punishes: 0,
            exo_reward: 0.0,
            credo_reward: 0.0,
        })
        .collect();
    let len = env.config.episode_length;
    let mut log = EpisodeLog {
        agents: Vec::new(),
        population_exo_per_step: Vec::with_capacity(len),
        population_credo_per_step: Vec::with_capacity(len),
        waste_density_per_step: Vec::with_capacity(len),
    };
    loop {
        let actions: Vec<CleanupAction> = policies
            .iter_mut()
            .zip(&obs)
            .map(|(p, o)| p.act(o, policy_rng))
            .collect();
        let out = env.step(&mut state, &actions, env_rng)?;
        for (i, a) in agents.iter_mut().enumerate() {
            let ev = out.events[i];
            a.apples += ev.ate_apple as u64;
            a.cleans += ev.fired_clean as u64;
            a.punishes += ev.fired_punish as u64;
            a.exo_reward += out.rewards.0[i];
            a.credo_reward += out.credo_rewards.0[i];
            policies[i].observe_reward(out.credo_rewards.0[i]);
        }
        log.population_exo_per_step.push(out.rewards.sum());
        log.population_credo_per_step.push(out.credo_rewards.sum());
        log.waste_density_per_step.push(env.waste_density(&state));
        obs = out.observations;
        if out.done {
            break;
        }
    }
    for p in policies.iter_mut() {
        p.end_episode()?;
    }
    log.agents = agents;
    Ok(log)
}

/// The two generators used by a Cleanup run with `seed`.
pub fn cleanup_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let env = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = ChaCha8Rng::seed_from_u64(seed);
    policy.set_stream(1);
    (env, policy)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CleanupSummary {
    /// Mean per-agent credo reward per episode over the final quarter of episodes.
    pub mean_credo_reward: f64,
    pub equality: Option<f64>,
    pub exogenous_equality: Option<f64>,
    pub mean_exo_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanupRunOutput {
    pub episodes: Vec<EpisodeLog>,
    pub summary: CleanupSummary,
}

/// Runs `config.episodes` episodes with policies built from `config.policies`.
pub fn run_cleanup_experiment(config: &CleanupConfig) -> Result<CleanupRunOutput> {
    let env = CleanupEnv::new(config.clone())?;
    let mut policies = env.build_policies();
    let (mut env_rng, mut policy_rng) = cleanup_rngs(config.seed);
    let episodes = (0..config.episodes)
        .map(|_| run_cleanup_episode(&env, &mut policies, &mut env_rng, &mut policy_rng))
        .collect::<Result<Vec<_>>>()?;
    let tail = &episodes[final_quarter_start(episodes.len())..];
    let n = config.num_agents;
    let mut credo = vec![0.0; n];
    let mut exo = vec![0.0; n];
    for ep in tail {
        for a in &ep.agents {
            credo[a.agent_id] += a.credo_reward;
            exo[a.agent_id] += a.exo_reward;
        }
    }
    let denom = (tail.len().max(1) * n) as f64;
    let summary = CleanupSummary {
        mean_credo_reward: credo.iter().sum::<f64>() / denom,
        equality: equality(&credo),
        exogenous_equality: equality(&exo),
        mean_exo_reward: exo.iter().sum::<f64>() / denom,
    };
    Ok(CleanupRunOutput { episodes, summary })
}
