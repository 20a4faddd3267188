//! Circular water-maze simulator.
//!
//! The pool is a disk of radius `maze_radius` whose wall carries a single
//! landmark arc in a contrasting color. The agent observes the wall through
//! a fan of sight lines (distance + color per ray), moves with four discrete
//! actions, and is rewarded for finding a hidden circular platform. Episode
//! dynamics are fully deterministic; the only randomness is the spawn angle
//! drawn at reset and the platform point sampled once per run.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 2D point / vector in maze coordinates (x right, y up, angles CCW from +x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Vec2) -> f64 {
        Vec2::new(self.x - other.x, self.y - other.y).norm()
    }

    /// Unit vector at the given angle.
    pub fn unit(angle: f64) -> Self {
        Self {
            x: angle.cos(),
            y: angle.sin(),
        }
    }
}

/// Half-open angular interval `[start, start + len)` on the wall, in radians.
#[derive(Debug, Clone, Copy)]
pub struct LandmarkArc {
    pub start: f64,
    pub len: f64,
}

impl LandmarkArc {
    pub fn contains(&self, angle: f64) -> bool {
        (angle - self.start).rem_euclid(TAU) < self.len
    }
}

/// Geometry, observation, and reward parameters of the maze.
#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub maze_radius: f64,
    pub platform_radius: f64,
    pub platform_spawn_radius: f64,
    pub landmark_arc: LandmarkArc,
    pub fov: f64,
    pub num_rays: usize,
    pub forward_step: f64,
    pub turn_step: f64,
    pub max_steps: u32,
    pub reward_platform: f64,
    pub reward_collision: f64,
    pub reward_step: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            maze_radius: 10.0,
            platform_radius: 0.75,
            platform_spawn_radius: 5.0,
            // One eighth of the circumference; absolute placement is
            // immaterial because the spawn angle is randomized.
            landmark_arc: LandmarkArc {
                start: 0.0,
                len: TAU / 8.0,
            },
            fov: 1.0,
            num_rays: 12,
            forward_step: 1.0,
            turn_step: 0.2,
            max_steps: 500,
            reward_platform: 1.0,
            reward_collision: -0.3,
            reward_step: -0.0003,
        }
    }
}

impl EnvConfig {
    /// Number of scalars per observation (distance, color per ray).
    pub fn obs_dim(&self) -> usize {
        2 * self.num_rays
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |what: &str| Err(EnvError::InvalidConfig(what.to_string()));
        if !(self.maze_radius > self.platform_radius && self.platform_radius > 0.0) {
            return fail("requires maze_radius > platform_radius > 0");
        }
        if self.platform_spawn_radius + self.platform_radius > self.maze_radius {
            return fail("platform_spawn_radius + platform_radius must not exceed maze_radius");
        }
        if self.num_rays < 2 {
            return fail("num_rays must be at least 2");
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return fail("fov must lie in (0, pi)");
        }
        if (self.landmark_arc.len - TAU / 8.0).abs() > 1e-12 {
            return fail("landmark arc must cover one eighth of the circumference");
        }
        if self.forward_step <= 0.0 || self.turn_step <= 0.0 {
            return fail("forward_step and turn_step must be positive");
        }
        if self.max_steps == 0 {
            return fail("max_steps must be positive");
        }
        Ok(())
    }
}

/// Agent position and heading. Heading is kept in `[0, 2*pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// The four discrete actions, with stable integer codes 0..3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    NoOp,
    Forward,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::NoOp,
        Action::Forward,
        Action::TurnLeft,
        Action::TurnRight,
    ];
    pub const COUNT: usize = 4;

    pub fn code(self) -> u8 {
        match self {
            Action::NoOp => 0,
            Action::Forward => 1,
            Action::TurnLeft => 2,
            Action::TurnRight => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Action::ALL.get(code as usize).copied()
    }
}

/// One ray-cast sensor reading: `2 * num_rays` scalars interleaved as
/// `(distance_k, color_k)`, ray 0 being the leftmost sight line.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    values: Vec<f64>,
}

impl Observation {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn distance(&self, ray: usize) -> f64 {
        self.values[2 * ray]
    }

    pub fn color(&self, ray: usize) -> f64 {
        self.values[2 * ray + 1]
    }
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationCause {
    PlatformReached,
    StepLimit,
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub termination_cause: Option<TerminationCause>,
    pub collided: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvError {
    InvalidConfig(String),
    /// Ray origin outside the maze circle: the ray-circle intersection has
    /// no forward solution.
    GeometryViolation,
    EpisodeFinished,
    PlatformOutsideSpawnRegion,
}

impl std::fmt::Display for EnvError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvError::InvalidConfig(msg) => write!(f, "invalid environment config: {msg}"),
            EnvError::GeometryViolation => {
                write!(f, "ray origin lies outside the maze boundary")
            }
            EnvError::EpisodeFinished => write!(f, "step called on a finished episode"),
            EnvError::PlatformOutsideSpawnRegion => {
                write!(f, "platform center outside the allowed spawn disk")
            }
        }
    }
}

impl std::error::Error for EnvError {}

/// Distance from `origin` along unit `direction` to the circle of the given
/// radius centered at the origin of coordinates.
///
/// Closed form: `t = -(o . u) + sqrt((o . u)^2 + radius^2 - |o|^2)`.
pub fn ray_distance(origin: Vec2, direction: Vec2, radius: f64) -> Result<f64, EnvError> {
    let ou = origin.dot(direction);
    let mut disc = ou * ou + radius * radius - origin.dot(origin);
    // Poses exactly on the boundary can push the discriminant a few ulps
    // below zero; clamp that noise, but keep real violations loud.
    if disc < 0.0 {
        if disc > -1e-9 * radius * radius {
            disc = 0.0;
        } else {
            return Err(EnvError::GeometryViolation);
        }
    }
    Ok(-ou + disc.sqrt())
}

/// Wall color at a boundary angle: 1 inside the landmark arc, 0 elsewhere.
pub fn boundary_color(angle: f64, arc: &LandmarkArc) -> u8 {
    arc.contains(angle.rem_euclid(TAU)) as u8
}

/// Angular offsets of the sight lines relative to the heading, leftmost
/// first: `num_rays` evenly spaced values spanning `[-fov/2, +fov/2]`.
pub fn ray_offsets(cfg: &EnvConfig) -> impl Iterator<Item = f64> + '_ {
    (0..cfg.num_rays)
        .map(move |k| cfg.fov / 2.0 - k as f64 * cfg.fov / (cfg.num_rays as f64 - 1.0))
}

/// Cast the full fan of sight lines from a pose.
pub fn cast_rays(pose: &Pose, cfg: &EnvConfig) -> Observation {
    let origin = pose.position();
    let mut values = Vec::with_capacity(cfg.obs_dim());
    for offset in ray_offsets(cfg) {
        let dir = Vec2::unit(pose.heading + offset);
        let t = ray_distance(origin, dir, cfg.maze_radius)
            .expect("pose is inside the maze by the containment invariant");
        let hit = Vec2::new(origin.x + t * dir.x, origin.y + t * dir.y);
        let angle = hit.y.atan2(hit.x).rem_euclid(TAU);
        values.push(t);
        values.push(boundary_color(angle, &cfg.landmark_arc) as f64);
    }
    Observation { values }
}

/// Spawn pose for a boundary angle: on the wall, facing the center.
pub fn spawn_pose(boundary_angle: f64, cfg: &EnvConfig) -> Pose {
    Pose {
        x: cfg.maze_radius * boundary_angle.cos(),
        y: cfg.maze_radius * boundary_angle.sin(),
        heading: (boundary_angle + PI).rem_euclid(TAU),
    }
}

/// Map two unit draws to an area-uniform point on the disk of the given
/// radius (`r = radius * sqrt(u_r)`).
pub fn disk_point(radius: f64, u_r: f64, u_theta: f64) -> Vec2 {
    let r = radius * u_r.sqrt();
    let theta = u_theta * TAU;
    Vec2::new(r * theta.cos(), r * theta.sin())
}

/// Sample the hidden platform center, area-uniform over the spawn disk.
/// The point is fixed for a whole run.
pub fn sample_platform(seed: u64, cfg: &EnvConfig) -> Vec2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_r: f64 = rng.gen();
    let u_theta: f64 = rng.gen();
    disk_point(cfg.platform_spawn_radius, u_r, u_theta)
}

/// The simulator. One instance runs one episode at a time; `reset` starts
/// the next. Instances are independent and safe to move across threads.
#[derive(Debug, Clone)]
pub struct MazeEnv {
    cfg: EnvConfig,
    platform: Vec2,
    pose: Pose,
    steps: u32,
    done: bool,
    cause: Option<TerminationCause>,
}

impl MazeEnv {
    pub fn new(cfg: EnvConfig, platform: Vec2) -> Result<Self, EnvError> {
        cfg.validate()?;
        if platform.norm() > cfg.platform_spawn_radius + 1e-12 {
            return Err(EnvError::PlatformOutsideSpawnRegion);
        }
        Ok(Self {
            cfg,
            platform,
            pose: spawn_pose(0.0, &EnvConfig::default()),
            steps: 0,
            done: true,
            cause: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn platform(&self) -> Vec2 {
        self.platform
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn steps_taken(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Start a new episode: spawn on the wall at a uniform angle, facing the
    /// center. The same seed reproduces the same episode start exactly.
    pub fn reset(&mut self, seed: u64) -> (Pose, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: f64 = rng.gen::<f64>() * TAU;
        self.pose = spawn_pose(beta, &self.cfg);
        self.steps = 0;
        self.done = false;
        self.cause = None;
        (self.pose, cast_rays(&self.pose, &self.cfg))
    }

    /// Advance one step. A forward move whose endpoint would leave the pool
    /// is rejected outright (no sliding) and counts as a collision.
    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let mut collided = false;
        match action {
            Action::NoOp => {}
            Action::TurnLeft => {
                self.pose.heading = (self.pose.heading + self.cfg.turn_step).rem_euclid(TAU);
            }
            Action::TurnRight => {
                self.pose.heading = (self.pose.heading - self.cfg.turn_step).rem_euclid(TAU);
            }
            Action::Forward => {
                let dir = Vec2::unit(self.pose.heading);
                let candidate = Vec2::new(
                    self.pose.x + self.cfg.forward_step * dir.x,
                    self.pose.y + self.cfg.forward_step * dir.y,
                );
                if candidate.norm() >= self.cfg.maze_radius {
                    collided = true;
                } else {
                    self.pose.x = candidate.x;
                    self.pose.y = candidate.y;
                }
            }
        }
        self.steps += 1;

        let reached = self.pose.position().distance(self.platform) <= self.cfg.platform_radius;
        let mut reward = self.cfg.reward_step;
        if collided {
            reward += self.cfg.reward_collision;
        }
        if reached {
            reward += self.cfg.reward_platform;
        }

        self.cause = if reached {
            Some(TerminationCause::PlatformReached)
        } else if self.steps >= self.cfg.max_steps {
            Some(TerminationCause::StepLimit)
        } else {
            None
        };
        self.done = self.cause.is_some();

        Ok(StepResult {
            observation: cast_rays(&self.pose, &self.cfg),
            reward,
            done: self.done,
            termination_cause: self.cause,
            collided,
        })
    }
}
