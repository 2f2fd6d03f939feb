use ndarray::{array, Array1};
use serde::{Deserialize, Serialize};

use crate::env::{Env, StepOut};
use crate::nn::SeededRng;

/// Standoff kept between a projected position and the wall plane.
const WALL_EPS: f64 = 1e-6;

/// Thin axis-aligned wall segment. `axis = 0` is a vertical wall blocking
/// x-motion at `x = coord` over `y in [lo, hi]`; `axis = 1` the transpose.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Wall {
    pub axis: usize,
    pub coord: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Continuous 2-D point maze on the unit square. Actions are displacements in
/// [-1, 1]^2 scaled by 0.05; collisions project movement onto the wall
/// (axis-separated, no tunneling); reward is 1 exactly when the *current*
/// position lies inside the goal disc, at which point the episode ends.
#[derive(Debug, Clone)]
pub struct PointMaze {
    pub walls: Vec<Wall>,
    pub goal: Array1<f64>,
    pub goal_radius: f64,
    pub action_scale: f64,
    pub episode_cap: usize,
    pub start: Array1<f64>,
    pub start_radius: f64,
    pos: Array1<f64>,
    steps: usize,
    clip_warnings: u64,
}

impl PointMaze {
    /// One vertical wall at x = 0.5 spanning y in [0.2, 0.8]; start near
    /// (0.1, 0.5), goal at (0.9, 0.5). Routes below and above the wall give
    /// genuinely multimodal behavior data.
    pub fn standard() -> Self {
        PointMaze {
            walls: vec![Wall { axis: 0, coord: 0.5, lo: 0.2, hi: 0.8 }],
            goal: array![0.9, 0.5],
            goal_radius: 0.08,
            action_scale: 0.05,
            episode_cap: 100,
            start: array![0.1, 0.5],
            start_radius: 0.05,
            pos: array![0.1, 0.5],
            steps: 0,
            clip_warnings: 0,
        }
    }

    pub fn at_goal(&self, pos: &Array1<f64>) -> bool {
        let d2 = (pos[0] - self.goal[0]).powi(2) + (pos[1] - self.goal[1]).powi(2);
        d2 <= self.goal_radius * self.goal_radius
    }

    pub fn position(&self) -> &Array1<f64> {
        &self.pos
    }

    /// Forces the state (dataset generation with broad coverage).
    pub fn reset_to(&mut self, pos: Array1<f64>) -> Array1<f64> {
        self.pos = pos.mapv(|v| v.clamp(0.0, 1.0));
        self.steps = 0;
        self.pos.clone()
    }

    /// Pure transition function shared by `step` and the DP oracle.
    pub fn apply_move(&self, pos: &Array1<f64>, action: &Array1<f64>) -> Array1<f64> {
        let dx = action[0].clamp(-1.0, 1.0) * self.action_scale;
        let dy = action[1].clamp(-1.0, 1.0) * self.action_scale;
        let mut p = pos.clone();

        // x first, then y; each axis projects onto the nearest blocking wall.
        p[0] = self.move_axis(&p, 0, dx);
        p[1] = self.move_axis(&p, 1, dy);
        p[0] = p[0].clamp(0.0, 1.0);
        p[1] = p[1].clamp(0.0, 1.0);
        p
    }

    fn move_axis(&self, pos: &Array1<f64>, axis: usize, delta: f64) -> f64 {
        let from = pos[axis];
        let other = pos[1 - axis];
        let mut to = from + delta;
        for w in &self.walls {
            if w.axis != axis {
                continue;
            }
            if other < w.lo || other > w.hi {
                continue;
            }
            let c = w.coord;
            let crosses = (from - c) * (to - c) < 0.0 || (to - c).abs() < WALL_EPS;
            if crosses {
                to = if from < c { c - WALL_EPS } else { c + WALL_EPS };
            }
        }
        to
    }
}

impl Env for PointMaze {
    fn name(&self) -> &'static str {
        "point-maze"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn bounded_actions(&self) -> bool {
        true
    }

    fn reset(&mut self, rng: &mut SeededRng) -> Array1<f64> {
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let radius = self.start_radius * rng.uniform().sqrt();
        self.pos = array![
            (self.start[0] + radius * angle.cos()).clamp(0.0, 1.0),
            (self.start[1] + radius * angle.sin()).clamp(0.0, 1.0)
        ];
        self.steps = 0;
        self.pos.clone()
    }

    fn step(&mut self, action: &Array1<f64>) -> StepOut {
        if action.iter().any(|v| v.abs() > 1.0) {
            self.clip_warnings += 1;
        }
        if self.at_goal(&self.pos) {
            return StepOut { next: self.pos.clone(), reward: 1.0, done: true };
        }
        self.pos = self.apply_move(&self.pos.clone(), action);
        self.steps += 1;
        let done = self.steps >= self.episode_cap;
        StepOut { next: self.pos.clone(), reward: 0.0, done }
    }

    fn clip_warnings(&self) -> u64 {
        self.clip_warnings
    }
}

/// Which side of the wall a scripted route passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteSide {
    Below,
    Above,
}

impl RouteSide {
    pub fn from_index(i: usize) -> Self {
        if i % 2 == 0 {
            RouteSide::Below
        } else {
            RouteSide::Above
        }
    }
}

/// Memoryless scripted waypoint follower for the standard maze: head for the
/// bypass corridor on the chosen side, cross the wall line, then head for the
/// goal. Full speed toward the current target, clamped to the action box.
pub fn scripted_action(maze: &PointMaze, pos: &Array1<f64>, side: RouteSide) -> Array1<f64> {
    let wall_x = maze.walls.first().map_or(0.5, |w| w.coord);
    let bypass_y = match side {
        RouteSide::Below => 0.1,
        RouteSide::Above => 0.9,
    };
    let target: Array1<f64> = if pos[0] < wall_x - 0.02 {
        if (pos[1] - bypass_y).abs() > 0.03 {
            array![pos[0] + 0.01, bypass_y]
        } else {
            array![wall_x + 0.06, bypass_y]
        }
    } else if pos[0] < wall_x + 0.04 {
        array![wall_x + 0.08, bypass_y]
    } else {
        maze.goal.clone()
    };
    let mut a = Array1::zeros(2);
    for i in 0..2 {
        a[i] = ((target[i] - pos[i]) / maze.action_scale).clamp(-1.0, 1.0);
    }
    a
}

/// The scripted policy quantized to a grid: actions depend only on the cell
/// containing the position, which lets the DP oracle evaluate exactly the
/// policy that generated the data.
pub fn scripted_action_on_grid(
    maze: &PointMaze,
    pos: &Array1<f64>,
    side: RouteSide,
    grid_n: usize,
) -> Array1<f64> {
    let cell = |v: f64| -> f64 {
        let i = ((v * grid_n as f64).floor() as isize).clamp(0, grid_n as isize - 1) as f64;
        (i + 0.5) / grid_n as f64
    };
    let center = array![cell(pos[0]), cell(pos[1])];
    scripted_action(maze, &center, side)
}
