//! Crossing gridworlds: generation, dynamics, safety labels and observations.
//!
//! A layout is a square grid bordered by walls. The agent starts in the
//! top-left interior cell facing east and must reach the goal in the
//! bottom-right interior cell. Obstacle rivers (lava or wall) span the interior
//! in alternating orientation, vertical first, each with a single opening.
//!
//! Dynamics are deterministic. Turning changes only the heading; moving forward
//! into a wall leaves the agent in place; entering lava ends the episode with a
//! violation and reward 0; entering the goal ends it with reward
//! [`GOAL_REWARD`]. Episodes are truncated after `max_steps` moves.
//!
//! The tabular state is `(row, col, direction)`; the step counter is only used
//! for truncation.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const GOAL_REWARD: f64 = 1.0;

/// Number of observation planes: four cell kinds, agent presence, four headings.
pub const OBS_CHANNELS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Empty,
    Wall,
    Lava,
    Goal,
}

impl CellKind {
    fn plane(self) -> usize {
        match self {
            CellKind::Empty => 0,
            CellKind::Wall => 1,
            CellKind::Lava => 2,
            CellKind::Goal => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObstacleKind {
    Lava,
    Wall,
}

impl ObstacleKind {
    fn cell(self) -> CellKind {
        match self {
            ObstacleKind::Lava => CellKind::Lava,
            ObstacleKind::Wall => CellKind::Wall,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObstacleKind::Lava => "lava",
            ObstacleKind::Wall => "wall",
        }
    }
}

impl FromStr for ObstacleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lava" => Ok(ObstacleKind::Lava),
            "wall" | "simple" => Ok(ObstacleKind::Wall),
            other => Err(Error::parse("obstacle kind", format!("unknown obstacle `{other}`"))),
        }
    }
}

/// Heading, numbered clockwise from east.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    East = 0,
    South = 1,
    West = 2,
    North = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::East, Direction::South, Direction::West, Direction::North];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Direction {
        Self::ALL[i % 4]
    }

    pub fn turn_left(self) -> Direction {
        Self::from_index(self.index() + 3)
    }

    pub fn turn_right(self) -> Direction {
        Self::from_index(self.index() + 1)
    }

    /// Row and column offsets of one forward move.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Direction::East => (0, 1),
            Direction::South => (1, 0),
            Direction::West => (0, -1),
            Direction::North => (-1, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::East => "east",
            Direction::South => "south",
            Direction::West => "west",
            Direction::North => "north",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "east" => Ok(Direction::East),
            "south" => Ok(Direction::South),
            "west" => Ok(Direction::West),
            "north" => Ok(Direction::North),
            other => Err(Error::parse("direction", format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    TurnLeft = 0,
    TurnRight = 1,
    Forward = 2,
}

pub const ACTION_COUNT: usize = 3;

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [Action::TurnLeft, Action::TurnRight, Action::Forward];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentState {
    pub row: usize,
    pub col: usize,
    pub direction: Direction,
    pub steps_elapsed: usize,
}

impl AgentState {
    pub fn new(row: usize, col: usize, direction: Direction) -> Self {
        Self {
            row,
            col,
            direction,
            steps_elapsed: 0,
        }
    }

    /// Same pose with the step counter cleared.
    pub fn pose(&self) -> (usize, usize, Direction) {
        (self.row, self.col, self.direction)
    }
}

/// Safety of a state: a violation, one action away from a violation, or neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SafetyLabel {
    Violation,
    Undesirable,
    Safe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: AgentState,
    pub action: Action,
    pub next_state: AgentState,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub violated: bool,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Channelised full-view observation, laid out as `(channel, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<CellKind>,
    pub start: (usize, usize, Direction),
    pub goal: (usize, usize),
    pub max_steps: usize,
    pub obstacle_kind: ObstacleKind,
    pub num_crossings: usize,
    pub seed: u64,
}

impl GridSpec {
    /// Builds a crossing layout. Rivers sit on even interior indices so that at
    /// least one free line separates parallel rivers; openings are placed along
    /// a shuffled east/south route through the rooms the rivers carve out, which
    /// keeps the goal reachable.
    pub fn generate_crossing(size: usize, num_crossings: usize, obstacle_kind: ObstacleKind, seed: u64) -> Result<GridSpec> {
        if size < 5 {
            return Err(Error::InvalidGrid(format!("size {size} is below the minimum of 5")));
        }
        let slots: Vec<usize> = (2..=size - 3).filter(|i| i % 2 == 0).collect();
        let n_vertical = num_crossings.div_ceil(2);
        let n_horizontal = num_crossings / 2;
        if n_vertical > slots.len() || n_horizontal > slots.len() {
            return Err(Error::InvalidGrid(format!(
                "{num_crossings} crossings do not fit in a {size}x{size} grid (at most {} per orientation)",
                slots.len()
            )));
        }

        let mut rng = SplitMix64::new(seed);
        let mut cols = slots.clone();
        rng.shuffle(&mut cols);
        let mut cols: Vec<usize> = cols.into_iter().take(n_vertical).collect();
        cols.sort_unstable();
        let mut rows = slots;
        rng.shuffle(&mut rows);
        let mut rows: Vec<usize> = rows.into_iter().take(n_horizontal).collect();
        rows.sort_unstable();

        let mut cells = vec![CellKind::Empty; size * size];
        for r in 0..size {
            for c in 0..size {
                if r == 0 || c == 0 || r == size - 1 || c == size - 1 {
                    cells[r * size + c] = CellKind::Wall;
                }
            }
        }
        let obstacle = obstacle_kind.cell();
        for &c in &cols {
            for r in 1..size - 1 {
                cells[r * size + c] = obstacle;
            }
        }
        for &r in &rows {
            for c in 1..size - 1 {
                cells[r * size + c] = obstacle;
            }
        }

        // true = cross the next vertical river heading east.
        let mut route: Vec<bool> = std::iter::repeat_n(true, n_vertical)
            .chain(std::iter::repeat_n(false, n_horizontal))
            .collect();
        rng.shuffle(&mut route);
        let col_limits: Vec<usize> = std::iter::once(0).chain(cols.iter().copied()).chain(std::iter::once(size - 1)).collect();
        let row_limits: Vec<usize> = std::iter::once(0).chain(rows.iter().copied()).chain(std::iter::once(size - 1)).collect();
        let (mut room_r, mut room_c) = (0, 0);
        for east in route {
            let (r, c) = if east {
                let r = rng.inclusive(row_limits[room_r] + 1, row_limits[room_r + 1] - 1);
                room_c += 1;
                (r, col_limits[room_c])
            } else {
                let c = rng.inclusive(col_limits[room_c] + 1, col_limits[room_c + 1] - 1);
                room_r += 1;
                (row_limits[room_r], c)
            };
            cells[r * size + c] = CellKind::Empty;
        }

        let goal = (size - 2, size - 2);
        cells[goal.0 * size + goal.1] = CellKind::Goal;
        Ok(GridSpec {
            width: size,
            height: size,
            cells,
            start: (1, 1, Direction::East),
            goal,
            max_steps: 4 * size * size,
            obstacle_kind,
            num_crossings,
            seed,
        })
    }

    pub fn cell(&self, row: usize, col: usize) -> CellKind {
        self.cells[row * self.width + col]
    }

    pub fn state_count(&self) -> usize {
        self.width * self.height * 4
    }

    pub fn state_index(&self, row: usize, col: usize, direction: Direction) -> usize {
        (row * self.width + col) * 4 + direction.index()
    }

    pub fn index_of(&self, state: &AgentState) -> usize {
        self.state_index(state.row, state.col, state.direction)
    }

    pub fn state_at(&self, index: usize) -> AgentState {
        let cell = index / 4;
        AgentState::new(cell / self.width, cell % self.width, Direction::from_index(index % 4))
    }

    pub fn start_state(&self) -> AgentState {
        AgentState::new(self.start.0, self.start.1, self.start.2)
    }

    /// Lava and goal cells end the episode when entered.
    pub fn is_terminal_cell(&self, row: usize, col: usize) -> bool {
        matches!(self.cell(row, col), CellKind::Lava | CellKind::Goal)
    }

    /// States the agent can act from: empty cells in all four headings.
    pub fn is_live(&self, index: usize) -> bool {
        let cell = index / 4;
        cell < self.cells.len() && self.cells[cell] == CellKind::Empty
    }

    /// Pose reached by `action`, ignoring termination and the step counter.
    pub fn successor(&self, row: usize, col: usize, direction: Direction, action: Action) -> (usize, usize, Direction) {
        match action {
            Action::TurnLeft => (row, col, direction.turn_left()),
            Action::TurnRight => (row, col, direction.turn_right()),
            Action::Forward => {
                let (dr, dc) = direction.delta();
                let nr = row as isize + dr;
                let nc = col as isize + dc;
                if nr < 0 || nc < 0 || nr as usize >= self.height || nc as usize >= self.width {
                    return (row, col, direction);
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if self.cell(nr, nc) == CellKind::Wall {
                    (row, col, direction)
                } else {
                    (nr, nc, direction)
                }
            }
        }
    }

    pub fn step(&self, state: &AgentState, action: Action) -> Result<Transition> {
        if self.is_terminal_cell(state.row, state.col) || state.steps_elapsed >= self.max_steps {
            return Err(Error::TerminalState);
        }
        let (row, col, direction) = self.successor(state.row, state.col, state.direction, action);
        let next_state = AgentState {
            row,
            col,
            direction,
            steps_elapsed: state.steps_elapsed + 1,
        };
        let (reward, terminated, violated) = match self.cell(row, col) {
            CellKind::Lava => (0.0, true, true),
            CellKind::Goal => (GOAL_REWARD, true, false),
            _ => (0.0, false, false),
        };
        Ok(Transition {
            state: *state,
            action,
            next_state,
            reward,
            terminated,
            truncated: !terminated && next_state.steps_elapsed >= self.max_steps,
            violated,
        })
    }

    pub fn classify_state(&self, state: &AgentState) -> SafetyLabel {
        match self.cell(state.row, state.col) {
            CellKind::Lava => SafetyLabel::Violation,
            CellKind::Goal => SafetyLabel::Safe,
            _ => {
                let unsafe_move = Action::ALL.iter().any(|&a| {
                    let (r, c, _) = self.successor(state.row, state.col, state.direction, a);
                    self.cell(r, c) == CellKind::Lava
                });
                if unsafe_move {
                    SafetyLabel::Undesirable
                } else {
                    SafetyLabel::Safe
                }
            }
        }
    }

    pub fn observe(&self, state: &AgentState) -> Observation {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut data = vec![0.0; OBS_CHANNELS * plane];
        for (i, kind) in self.cells.iter().enumerate() {
            data[kind.plane() * plane + i] = 1.0;
        }
        let at = state.row * w + state.col;
        data[4 * plane + at] = 1.0;
        data[(5 + state.direction.index()) * plane + at] = 1.0;
        Observation {
            channels: OBS_CHANNELS,
            height: h,
            width: w,
            data,
        }
    }

    pub fn observation_len(&self) -> usize {
        OBS_CHANNELS * self.width * self.height
    }

    /// Live states reachable from the start, in breadth-first order.
    pub fn reachable_states(&self) -> Vec<AgentState> {
        let start = self.start_state();
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        let mut out = Vec::new();
        seen.insert(start.pose());
        queue.push_back(start.pose());
        while let Some((r, c, d)) = queue.pop_front() {
            out.push(AgentState::new(r, c, d));
            for a in Action::ALL {
                let next = self.successor(r, c, d, a);
                if self.is_terminal_cell(next.0, next.1) {
                    continue;
                }
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        out
    }

    pub fn to_map_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# obstacle = {}", self.obstacle_kind.name());
        let _ = writeln!(out, "# crossings = {}", self.num_crossings);
        let _ = writeln!(out, "# start_dir = {}", self.start.2.name());
        let _ = writeln!(out, "{} {} {} {}", self.width, self.height, self.max_steps, self.seed);
        for r in 0..self.height {
            for c in 0..self.width {
                let ch = if (r, c) == (self.start.0, self.start.1) {
                    'S'
                } else {
                    match self.cell(r, c) {
                        CellKind::Empty => '.',
                        CellKind::Wall => '#',
                        CellKind::Lava => 'L',
                        CellKind::Goal => 'G',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text map format. Leading lines starting with `#` are metadata
    /// (`# key = value`); the first other line is `width height max_steps seed`,
    /// followed by `height` rows of cell characters.
    pub fn parse_map(text: &str) -> Result<GridSpec> {
        let ctx = "map";
        let mut lines = text.lines();
        let mut obstacle = None;
        let mut crossings = 0;
        let mut start_dir = Direction::East;
        let header = loop {
            let line = lines.next().ok_or_else(|| Error::parse(ctx, "missing header line"))?;
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    match k.trim() {
                        "obstacle" => obstacle = Some(v.parse::<ObstacleKind>()?),
                        "crossings" => {
                            crossings = v.trim().parse().map_err(|_| Error::parse(ctx, format!("bad crossings `{}`", v.trim())))?
                        }
                        "start_dir" => start_dir = v.parse()?,
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            break line;
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(ctx, format!("header needs 4 fields, found `{header}`")));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| Error::parse(ctx, format!("bad number `{s}`")));
        let width = num(fields[0])? as usize;
        let height = num(fields[1])? as usize;
        let max_steps = num(fields[2])? as usize;
        let seed = num(fields[3])?;

        let mut cells = Vec::with_capacity(width * height);
        let mut start = None;
        let mut goal = None;
        let mut has_lava = false;
        for r in 0..height {
            let row = lines.next().ok_or_else(|| Error::parse(ctx, format!("missing row {r}")))?;
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != width {
                return Err(Error::parse(ctx, format!("row {r} has {} cells, expected {width}", chars.len())));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                let kind = match ch {
                    '.' => CellKind::Empty,
                    '#' => CellKind::Wall,
                    'L' => {
                        has_lava = true;
                        CellKind::Lava
                    }
                    'G' => {
                        goal = Some((r, c));
                        CellKind::Goal
                    }
                    'S' => {
                        start = Some((r, c));
                        CellKind::Empty
                    }
                    other => return Err(Error::parse(ctx, format!("unknown cell `{other}` at ({r}, {c})"))),
                };
                cells.push(kind);
            }
        }
        let start = start.ok_or_else(|| Error::parse(ctx, "no start cell"))?;
        let goal = goal.ok_or_else(|| Error::parse(ctx, "no goal cell"))?;
        let obstacle_kind = obstacle.unwrap_or(if has_lava { ObstacleKind::Lava } else { ObstacleKind::Wall });
        Ok(GridSpec {
            width,
            height,
            cells,
            start: (start.0, start.1, start_dir),
            goal,
            max_steps,
            obstacle_kind,
            num_crossings: crossings,
            seed,
        })
    }

    /// Hex SHA-256 prefix of the map text; ties Q-tables to their layout.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_map_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_map_string())
    }
}
