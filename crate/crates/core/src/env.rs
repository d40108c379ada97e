//! Point-mass maze: deterministic dynamics, scripted waypoint collectors and
//! the stitch-maze dataset recipe.
//!
//! World coordinates put the origin at the top-left corner of the grid, with
//! `x` growing along columns and `y` growing along rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Trajectory};
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Proportional gain of the scripted controller.
pub const CONTROLLER_GAIN: f64 = 3.0;
/// Velocity damping of the scripted controller.
pub const CONTROLLER_DAMPING: f64 = 2.0;
/// Distance (world units) at which a waypoint counts as reached.
pub const CAPTURE_RADIUS: f64 = 0.25;
/// Speed below which a follower counts as stopped at a stop waypoint.
pub const STOP_SPEED: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Sparse,
    Dense,
}

/// Axis-aligned box in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let mut p = [0.0; 2];
        for i in 0..2 {
            p[i] = if self.max[i] > self.min[i] { rng.gen_range(self.min[i]..self.max[i]) } else { self.min[i] };
        }
        p
    }

    fn corners(&self) -> [[f64; 2]; 4] {
        [
            self.min,
            [self.max[0], self.min[1]],
            [self.min[0], self.max[1]],
            self.max,
        ]
    }
}

/// Physical constants shared by every layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Physics {
    pub cell_size: f64,
    /// Goal radius as a fraction of the cell size.
    pub goal_radius_cells: f64,
    /// Inset of the start box from the edges of the `S` cells, in cells.
    pub start_inset_cells: f64,
    pub reward_mode: RewardMode,
    pub max_steps: usize,
    pub dt: f64,
    pub vmax: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            goal_radius_cells: 0.5,
            start_inset_cells: 0.25,
            reward_mode: RewardMode::Sparse,
            max_steps: 300,
            dt: 0.1,
            vmax: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    /// `walls[row][col]`, true for wall cells.
    pub walls: Vec<Vec<bool>>,
    pub cell_size: f64,
    pub start: Region,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub reward_mode: RewardMode,
    pub max_steps: usize,
    pub dt: f64,
    pub vmax: f64,
}

impl MazeSpec {
    /// Parse a layout of `#` (wall), `.` (free), `S` (start) and `G` (goal)
    /// characters. The start box covers the `S` cells, inset from their
    /// edges; the goal is the center of the single `G` cell.
    pub fn from_ascii(layout: &str, physics: &Physics) -> Result<Self> {
        let rows: Vec<&str> = layout.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::Maze("empty layout".into()));
        }
        let width = rows[0].chars().count();
        let mut walls = Vec::with_capacity(rows.len());
        let mut starts = Vec::new();
        let mut goals = Vec::new();
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Maze(format!("row {r} has {} cells, expected {width}", line.chars().count())));
            }
            let mut row = Vec::with_capacity(width);
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => row.push(true),
                    '.' => row.push(false),
                    'S' => {
                        starts.push((r, c));
                        row.push(false);
                    }
                    'G' => {
                        goals.push((r, c));
                        row.push(false);
                    }
                    other => return Err(Error::Maze(format!("unknown layout character {other:?} at row {r}, column {c}"))),
                }
            }
            walls.push(row);
        }
        if starts.is_empty() {
            return Err(Error::Maze("layout has no start cell".into()));
        }
        if goals.len() != 1 {
            return Err(Error::Maze(format!("layout needs exactly one goal cell, found {}", goals.len())));
        }
        let cs = physics.cell_size;
        let inset = physics.start_inset_cells * cs;
        let (r0, r1) = (starts.iter().map(|s| s.0).min().unwrap(), starts.iter().map(|s| s.0).max().unwrap());
        let (c0, c1) = (starts.iter().map(|s| s.1).min().unwrap(), starts.iter().map(|s| s.1).max().unwrap());
        let start = Region {
            min: [c0 as f64 * cs + inset, r0 as f64 * cs + inset],
            max: [(c1 + 1) as f64 * cs - inset, (r1 + 1) as f64 * cs - inset],
        };
        let (gr, gc) = goals[0];
        let spec = Self {
            walls,
            cell_size: cs,
            start,
            goal: [(gc as f64 + 0.5) * cs, (gr as f64 + 0.5) * cs],
            goal_radius: physics.goal_radius_cells * cs,
            reward_mode: physics.reward_mode,
            max_steps: physics.max_steps,
            dt: physics.dt,
            vmax: physics.vmax,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.walls.is_empty() || self.walls[0].is_empty() || self.walls.iter().any(|r| r.len() != self.walls[0].len()) {
            return Err(Error::Maze("wall grid must be a non-empty rectangle".into()));
        }
        for (name, v) in [("cell size", self.cell_size), ("dt", self.dt), ("vmax", self.vmax), ("goal radius", self.goal_radius)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Maze(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.max_steps < 10 {
            return Err(Error::Maze(format!("max episode steps must be at least 10, got {}", self.max_steps)));
        }
        if self.start.corners().iter().any(|&p| self.is_wall(p)) {
            return Err(Error::Maze("start region overlaps a wall cell".into()));
        }
        if self.is_wall(self.goal) {
            return Err(Error::Maze("goal lies in a wall cell".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.walls.len()
    }

    pub fn cols(&self) -> usize {
        self.walls[0].len()
    }

    /// True for points inside a wall cell or outside the grid.
    pub fn is_wall(&self, p: [f64; 2]) -> bool {
        if !(p[0].is_finite() && p[1].is_finite()) || p[0] < 0.0 || p[1] < 0.0 {
            return true;
        }
        let (c, r) = ((p[0] / self.cell_size) as usize, (p[1] / self.cell_size) as usize);
        r >= self.rows() || c >= self.cols() || self.walls[r][c]
    }

    /// World position of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [(col as f64 + 0.5) * self.cell_size, (row as f64 + 0.5) * self.cell_size]
    }

    /// Box around the center of cell `(row, col)` with the given half-width
    /// in cells.
    pub fn cell_region(&self, row: usize, col: usize, half_width_cells: f64) -> Region {
        let c = self.cell_center(row, col);
        let h = half_width_cells * self.cell_size;
        Region { min: [c[0] - h, c[1] - h], max: [c[0] + h, c[1] + h] }
    }

    pub fn goal_distance(&self, p: [f64; 2]) -> f64 {
        ((p[0] - self.goal[0]).powi(2) + (p[1] - self.goal[1]).powi(2)).sqrt()
    }

    pub fn in_goal(&self, p: [f64; 2]) -> bool {
        self.goal_distance(p) <= self.goal_radius
    }

    /// At rest at a uniformly drawn point of the start region.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        EnvState { pos: self.start.sample(rng), vel: [0.0; 2], t: 0 }
    }

    pub fn check_state(&self, s: &EnvState) -> Result<()> {
        if self.is_wall(s.pos) {
            return Err(Error::InvalidState(format!("position {:?} is not inside a free cell", s.pos)));
        }
        if s.vel.iter().any(|v| !v.is_finite() || v.abs() > self.vmax + 1e-12) {
            return Err(Error::InvalidState(format!("velocity {:?} exceeds vmax {}", s.vel, self.vmax)));
        }
        if s.t >= self.max_steps {
            return Err(Error::InvalidState(format!("step index {} at or past the episode limit {}", s.t, self.max_steps)));
        }
        Ok(())
    }

    /// Advance one step. The action is clipped to [−1, 1]² first.
    pub fn step(&self, state: &EnvState, action: [f64; 2]) -> Result<StepOutcome> {
        self.check_state(state)?;
        let a = clip_action(action);
        let dt = self.dt;
        let mut vel = [0.0; 2];
        for i in 0..2 {
            vel[i] = (state.vel[i] + a[i] * dt).clamp(-self.vmax, self.vmax);
        }
        let mut pos = state.pos;
        for axis in 0..2 {
            let mut next = pos;
            next[axis] += vel[axis] * dt;
            if self.is_wall(next) {
                vel[axis] = 0.0;
            } else {
                pos = next;
            }
        }
        let t = state.t + 1;
        let reached_goal = self.in_goal(pos);
        let (reward, done) = match self.reward_mode {
            RewardMode::Sparse => (if reached_goal { 1.0 } else { 0.0 }, reached_goal || t >= self.max_steps),
            RewardMode::Dense => (-self.goal_distance(pos) * dt, t >= self.max_steps),
        };
        Ok(StepOutcome { state: EnvState { pos, vel, t }, reward, done, reached_goal })
    }
}

/// Free-function form of [`MazeSpec::step`].
pub fn step(spec: &MazeSpec, state: &EnvState, action: [f64; 2]) -> Result<(EnvState, f64, bool)> {
    let o = spec.step(state, action)?;
    Ok((o.state, o.reward, o.done))
}

pub fn clip_action(a: [f64; 2]) -> [f64; 2] {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub t: usize,
}

impl EnvState {
    /// `[x, y, vx, vy]`.
    pub fn observation(&self) -> [f64; STATE_DIM] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn from_observation(obs: &[f64], t: usize) -> Result<Self> {
        if obs.len() != STATE_DIM {
            return Err(Error::InvalidState(format!("expected {STATE_DIM} observation values, got {}", obs.len())));
        }
        Ok(Self { pos: [obs[0], obs[1]], vel: [obs[2], obs[3]], t })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub reached_goal: bool,
}

/// Damped proportional controller toward `waypoints[0]`, switching to
/// `waypoints[1]` when the first one is within the capture radius (and to
/// holding position at a final waypoint), plus uniform noise in
/// `[−noise, noise]` per component, clipped to [−1, 1]².
pub fn scripted_policy<R: Rng + ?Sized>(
    state: &EnvState,
    waypoints: &[[f64; 2]],
    noise_scale: f64,
    rng: &mut R,
) -> [f64; 2] {
    assert!(!waypoints.is_empty(), "scripted policy needs at least one waypoint");
    let target = if waypoints.len() > 1 && distance(state.pos, waypoints[0]) < CAPTURE_RADIUS {
        waypoints[1]
    } else {
        waypoints[0]
    };
    let mut a = [0.0; 2];
    for i in 0..2 {
        a[i] = CONTROLLER_GAIN * (target[i] - state.pos[i]) - CONTROLLER_DAMPING * state.vel[i];
        if noise_scale > 0.0 {
            a[i] += rng.gen_range(-noise_scale..=noise_scale);
        }
    }
    clip_action(a)
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Stateful waypoint tracker: drops reached waypoints, optionally cycling
/// back to `loop_from` after the last one. Waypoints listed in `stops` are
/// only left once the mass has come to rest on them.
#[derive(Clone, Debug)]
pub struct WaypointFollower<'a> {
    waypoints: &'a [[f64; 2]],
    loop_from: Option<usize>,
    stops: &'a [usize],
    index: usize,
}

impl<'a> WaypointFollower<'a> {
    pub fn new(waypoints: &'a [[f64; 2]], loop_from: Option<usize>) -> Self {
        Self { waypoints, loop_from, stops: &[], index: 0 }
    }

    pub fn with_stops(mut self, stops: &'a [usize]) -> Self {
        self.stops = stops;
        self
    }

    pub fn act<R: Rng + ?Sized>(&mut self, state: &EnvState, noise_scale: f64, rng: &mut R) -> [f64; 2] {
        let speed = state.vel[0].hypot(state.vel[1]);
        for _ in 0..self.waypoints.len() {
            if distance(state.pos, self.waypoints[self.index]) >= CAPTURE_RADIUS {
                break;
            }
            if self.stops.contains(&self.index) && speed >= STOP_SPEED {
                break;
            }
            if self.index + 1 < self.waypoints.len() {
                self.index += 1;
            } else if let Some(l) = self.loop_from.filter(|&l| l < self.index) {
                self.index = l;
            } else {
                break;
            }
        }
        let ahead = if self.stops.contains(&self.index) {
            &self.waypoints[self.index..=self.index]
        } else {
            &self.waypoints[self.index..]
        };
        scripted_policy(state, ahead, noise_scale, rng)
    }
}

/// One family of scripted episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub name: String,
    /// Episodes start at rest at a uniform point of this box.
    pub start: Region,
    pub waypoints: Vec<[f64; 2]>,
    /// After the last waypoint, continue from this waypoint index.
    #[serde(default)]
    pub loop_from: Option<usize>,
    /// Waypoint indices where the follower comes to rest before moving on.
    #[serde(default)]
    pub stops: Vec<usize>,
    pub count: usize,
    pub noise: f64,
}

/// Roll out one scripted episode until `done`.
pub fn rollout_route<R: Rng + ?Sized>(spec: &MazeSpec, route: &Route, rng: &mut R) -> Result<Trajectory> {
    if route.waypoints.is_empty() {
        return Err(Error::InvalidArgument(format!("route {:?} has no waypoints", route.name)));
    }
    let mut state = EnvState { pos: route.start.sample(rng), vel: [0.0; 2], t: 0 };
    spec.check_state(&state)
        .map_err(|e| Error::InvalidArgument(format!("route {:?} starts outside free space: {e}", route.name)))?;
    let mut follower = WaypointFollower::new(&route.waypoints, route.loop_from).with_stops(&route.stops);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    loop {
        let a = follower.act(&state, route.noise, rng);
        let o = spec.step(&state, a)?;
        states.extend_from_slice(&state.observation());
        actions.extend_from_slice(&a);
        rewards.push(o.reward);
        state = o.state;
        if o.done {
            return Trajectory::new(STATE_DIM, ACTION_DIM, states, actions, rewards, o.reached_goal);
        }
    }
}

/// Roll out `count` episodes of every route, in route order.
pub fn collect_dataset<R: Rng + ?Sized>(spec: &MazeSpec, routes: &[Route], rng: &mut R) -> Result<Dataset> {
    if routes.is_empty() {
        return Err(Error::InvalidArgument("no routes to collect".into()));
    }
    let mut trajectories = Vec::new();
    for route in routes {
        if route.count == 0 {
            return Err(Error::InvalidArgument(format!("route {:?} requests zero trajectories", route.name)));
        }
        for _ in 0..route.count {
            trajectories.push(rollout_route(spec, route, rng)?);
        }
    }
    log::info!("collected {} trajectories", trajectories.len());
    Dataset::new(trajectories)
}

/// Layout of the stitching maze. The start sits at the bottom of a west
/// column that climbs to a top corridor; at the junction (row 1, column 4)
/// a side corridor drops south to the goal, while the top corridor
/// continues east to a dead-end column.
pub const STITCH_MAZE_LAYOUT: &str = "\
#########
#.......#
#.##.##.#
#S##.##.#
####G##.#
#######.#
#########";

/// Junction cell of [`STITCH_MAZE_LAYOUT`] as (row, col).
pub const STITCH_JUNCTION: (usize, usize) = (1, 4);

/// Shape of the stitch-maze dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StitchRecipe {
    /// Episodes of family A (start, junction, dead-end loop).
    pub dead_end_count: usize,
    pub dead_end_noise: f64,
    /// Family A comes to rest at the junction before heading east.
    pub junction_stop: bool,
    /// Episodes of family B (junction neighborhood to goal).
    pub goal_count: usize,
    pub goal_noise: f64,
    /// Family-B start box: center offset from the junction center and
    /// half-widths, in cells.
    pub goal_start_offset: [f64; 2],
    pub goal_start_half_width: [f64; 2],
}

impl Default for StitchRecipe {
    fn default() -> Self {
        Self {
            dead_end_count: 60,
            dead_end_noise: 0.3,
            junction_stop: true,
            goal_count: 60,
            goal_noise: 0.3,
            goal_start_offset: [1.5, 0.0],
            goal_start_half_width: [0.2, 0.2],
        }
    }
}

impl StitchRecipe {
    /// Routes for the stitch maze. Family A never reaches the goal; family
    /// B starts near the junction and always does. A B start box in the top
    /// corridor routes B through the junction; one below it heads straight
    /// south.
    pub fn routes(&self, spec: &MazeSpec) -> Vec<Route> {
        let (jr, jc) = STITCH_JUNCTION;
        let junction = spec.cell_center(jr, jc);
        let cs = spec.cell_size;
        let dead_end = vec![
            spec.cell_center(1, 1),
            junction,
            spec.cell_center(1, 7),
            spec.cell_center(5, 7),
            spec.cell_center(3, 7),
            spec.cell_center(5, 7),
        ];
        let center = [junction[0] + self.goal_start_offset[0] * cs, junction[1] + self.goal_start_offset[1] * cs];
        let hw = [self.goal_start_half_width[0] * cs, self.goal_start_half_width[1] * cs];
        vec![
            Route {
                name: "dead-end".into(),
                start: spec.start,
                waypoints: dead_end,
                loop_from: Some(4),
                stops: if self.junction_stop { vec![1] } else { Vec::new() },
                count: self.dead_end_count,
                noise: self.dead_end_noise,
            },
            Route {
                name: "goal".into(),
                start: Region { min: [center[0] - hw[0], center[1] - hw[1]], max: [center[0] + hw[0], center[1] + hw[1]] },
                waypoints: if center[1] < junction[1] + 0.5 * cs {
                    vec![junction, spec.cell_center(3, jc), spec.goal]
                } else {
                    vec![spec.cell_center(3, jc), spec.goal]
                },
                loop_from: None,
                stops: Vec::new(),
                count: self.goal_count,
                noise: self.goal_noise,
            },
        ]
    }
}

/// The stitch maze with default physics.
pub fn stitch_maze() -> MazeSpec {
    MazeSpec::from_ascii(STITCH_MAZE_LAYOUT, &Physics::default()).expect("built-in layout is valid")
}

/// Waypoint route of the expert reference from the start region to the goal.
pub fn stitch_expert_route(spec: &MazeSpec, episodes: usize) -> Route {
    let (jr, jc) = STITCH_JUNCTION;
    Route {
        name: "expert".into(),
        start: spec.start,
        waypoints: vec![spec.cell_center(1, 1), spec.cell_center(jr, jc), spec.cell_center(3, jc), spec.goal],
        loop_from: None,
        stops: Vec::new(),
        count: episodes,
        noise: 0.0,
    }
}
