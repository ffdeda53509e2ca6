//! Benchmark scenario generators.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Obstacle, World, WorldConfig};
use crate::state::{AgentState, Vec2};

/// Clearance added to the no-overlap test for generated starts.
pub const START_MARGIN: f64 = 1e-6;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Circle,
    Swap,
    GridFormation,
    Random,
    StaticObstacleSwap,
}

impl Family {
    pub const ALL: [Family; 5] =
        [Family::Circle, Family::Swap, Family::GridFormation, Family::Random, Family::StaticObstacleSwap];

    pub fn name(self) -> &'static str {
        match self {
            Family::Circle => "circle",
            Family::Swap => "swap",
            Family::GridFormation => "grid_formation",
            Family::Random => "random",
            Family::StaticObstacleSwap => "static_obstacle_swap",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "circle" => Ok(Family::Circle),
            "swap" => Ok(Family::Swap),
            "grid" | "grid_formation" => Ok(Family::GridFormation),
            "random" => Ok(Family::Random),
            "obstacles" | "static_obstacle_swap" => Ok(Family::StaticObstacleSwap),
            other => Err(Error::Config(format!("unknown scenario family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusSpec {
    Fixed(f64),
    /// Uniform in `[lo, hi]`.
    Range(f64, f64),
}

impl RadiusSpec {
    pub fn max(self) -> f64 {
        match self {
            RadiusSpec::Fixed(r) => r,
            RadiusSpec::Range(_, hi) => hi,
        }
    }

    fn draw(self, rng: &mut impl Rng) -> f64 {
        match self {
            RadiusSpec::Fixed(r) => r,
            RadiusSpec::Range(lo, hi) if hi > lo => rng.gen_range(lo..=hi),
            RadiusSpec::Range(lo, _) => lo,
        }
    }
}

/// Geometry knobs. `None` fields take family defaults derived from the
/// agent count and radius.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    /// Circle radius; default keeps the arc spacing ≥ 4·r (and ≥ 3 m).
    pub circle_radius: Option<f64>,
    /// Distance between swap columns (default 4 m).
    pub swap_gap: Option<f64>,
    /// Row spacing in swap columns and grids (default max(4·r, 1 m)).
    pub spacing: Option<f64>,
    /// Half-width of the square workspace of the random family (default
    /// grows with the agent count, at least 3 m).
    pub half_width: Option<f64>,
    /// Minimum start-to-goal distance in the random family (default 2 m).
    pub min_travel: Option<f64>,
    /// Number of disk obstacles in the obstacle family (default 1).
    pub n_obstacles: Option<usize>,
    pub obstacle_radius: Option<f64>,
    /// Uniform start jitter (m); goals are jittered identically.
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub family: Family,
    pub n_agents: usize,
    pub radius: RadiusSpec,
    pub v_pref: f64,
    pub geometry: Geometry,
    pub seed: u64,
}

impl Scenario {
    pub fn new(family: Family, n_agents: usize, radius: RadiusSpec, seed: u64) -> Self {
        Scenario { family, n_agents, radius, v_pref: 1.0, geometry: Geometry::default(), seed }
    }

    /// Fixed radius 0.2 m for structured families, `[0.2, 0.4]` for random.
    pub fn standard(family: Family, n_agents: usize, seed: u64) -> Self {
        let radius = match family {
            Family::Random => RadiusSpec::Range(0.2, 0.4),
            _ => RadiusSpec::Fixed(0.2),
        };
        Scenario::new(family, n_agents, radius, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Scenario { seed, ..self.clone() }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.family, self.n_agents)
    }

    pub fn circle_radius(&self) -> f64 {
        let r = self.radius.max();
        self.geometry
            .circle_radius
            .unwrap_or_else(|| (2.0 * self.n_agents as f64 * r / PI).max(3.0))
    }

    fn spacing(&self) -> f64 {
        self.geometry.spacing.unwrap_or_else(|| (4.0 * self.radius.max()).max(1.0))
    }
}

/// Builds the initial world of `spec`.
pub fn gen_scenario(spec: &Scenario, config: &WorldConfig) -> Result<World> {
    if spec.n_agents == 0 {
        return Err(Error::Scenario("need at least one agent".into()));
    }
    if !(spec.v_pref > 0.0) {
        return Err(Error::Scenario("v_pref must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_agents;
    let radii: Vec<f64> = (0..n).map(|_| spec.radius.draw(&mut rng)).collect();
    let mut obstacles = Vec::new();
    let (starts, goals) = match spec.family {
        Family::Circle => {
            let r = spec.circle_radius();
            let starts: Vec<Vec2> = (0..n).map(|k| Vec2::from_angle(2.0 * PI * k as f64 / n as f64) * r).collect();
            let goals = starts.iter().map(|&s| -s).collect();
            (starts, goals)
        }
        Family::Swap | Family::StaticObstacleSwap => {
            let (starts, goals) = swap_layout(n, spec.geometry.swap_gap.unwrap_or(4.0), spec.spacing());
            if spec.family == Family::StaticObstacleSwap {
                let count = spec.geometry.n_obstacles.unwrap_or(1);
                let radius = spec.geometry.obstacle_radius.unwrap_or(0.3);
                let pitch = spec.spacing().max(2.0 * radius + 4.0 * spec.radius.max());
                obstacles = (0..count)
                    .map(|i| Obstacle {
                        center: Vec2::new(0.0, (i as f64 - (count as f64 - 1.0) / 2.0) * pitch),
                        radius,
                    })
                    .collect();
            }
            (starts, goals)
        }
        Family::GridFormation => {
            let m = (n as f64).sqrt().ceil() as usize;
            let s = spec.spacing();
            let cell = |row: usize, col: usize| {
                let c = (m as f64 + 1.0) / 2.0;
                Vec2::new((col as f64 - c) * s, (c - row as f64) * s)
            };
            (0..n)
                .map(|k| {
                    let (row, col) = (k / m + 1, k % m + 1);
                    (cell(row, col), cell(m - row + 1, m - col + 1))
                })
                .unzip()
        }
        Family::Random => random_layout(spec, &radii, &mut rng)?,
    };
    let (starts, goals) = jitter(starts, goals, spec.geometry.jitter, &mut rng);
    let agents: Vec<AgentState> = (0..n)
        .map(|k| AgentState::new(k, starts[k], goals[k], radii[k], spec.v_pref))
        .collect();
    validate_layout(&agents, &obstacles)?;
    World::new(config.clone(), agents, obstacles)
}

fn swap_layout(n: usize, gap: f64, spacing: f64) -> (Vec<Vec2>, Vec<Vec2>) {
    let left = n.div_ceil(2);
    let rows = left;
    let y = |i: usize| (i as f64 - (rows as f64 - 1.0) / 2.0) * spacing;
    let mut starts = Vec::with_capacity(n);
    let mut goals = Vec::with_capacity(n);
    for k in 0..n {
        let (side, row) = if k < left { (-1.0, k) } else { (1.0, k - left) };
        starts.push(Vec2::new(side * gap / 2.0, y(row)));
        goals.push(Vec2::new(-side * gap / 2.0, y(row)));
    }
    (starts, goals)
}

fn random_layout(spec: &Scenario, radii: &[f64], rng: &mut impl Rng) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
    let n = radii.len();
    let rmax = spec.radius.max();
    let half = spec.geometry.half_width.unwrap_or_else(|| (1.5 * (n as f64).sqrt() * 4.0 * rmax).max(3.0));
    let min_travel = spec.geometry.min_travel.unwrap_or(2.0).min(half);
    let place = |rng: &mut dyn rand::RngCore, placed: &[(Vec2, f64)], r: f64| -> Option<Vec2> {
        (0..MAX_ATTEMPTS).find_map(|_| {
            let p = Vec2::new(rng.gen_range(-half + r..=half - r), rng.gen_range(-half + r..=half - r));
            placed.iter().all(|&(q, rq)| (p - q).norm() >= r + rq + 0.1).then_some(p)
        })
    };
    let mut starts: Vec<(Vec2, f64)> = Vec::new();
    let mut goals: Vec<(Vec2, f64)> = Vec::new();
    for &r in radii {
        let s = place(rng, &starts, r).ok_or_else(|| Error::Scenario("could not place random starts".into()))?;
        let g = (0..MAX_ATTEMPTS)
            .find_map(|_| place(rng, &goals, r).filter(|g| (*g - s).norm() >= min_travel))
            .ok_or_else(|| Error::Scenario("could not place random goals".into()))?;
        starts.push((s, r));
        goals.push((g, r));
    }
    Ok((starts.into_iter().map(|p| p.0).collect(), goals.into_iter().map(|p| p.0).collect()))
}

fn jitter(starts: Vec<Vec2>, goals: Vec<Vec2>, amount: f64, rng: &mut impl Rng) -> (Vec<Vec2>, Vec<Vec2>) {
    if amount <= 0.0 {
        return (starts, goals);
    }
    starts
        .into_iter()
        .zip(goals)
        .map(|(s, g)| {
            let d = Vec2::new(rng.gen_range(-amount..=amount), rng.gen_range(-amount..=amount));
            let e = Vec2::new(rng.gen_range(-amount..=amount), rng.gen_range(-amount..=amount));
            (s + d, g + e)
        })
        .unzip()
}

/// Rejects layouts where starts overlap each other or an obstacle, or a
/// goal lies inside an obstacle.
pub fn validate_layout(agents: &[AgentState], obstacles: &[Obstacle]) -> Result<()> {
    for (i, a) in agents.iter().enumerate() {
        for b in &agents[i + 1..] {
            if (a.p - b.p).norm() < a.r + b.r + START_MARGIN {
                return Err(Error::Scenario(format!("agents {} and {} start in contact", a.id, b.id)));
            }
        }
        for o in obstacles {
            if (a.p - o.center).norm() < a.r + o.radius + START_MARGIN
                || (a.g - o.center).norm() < a.r + o.radius + START_MARGIN
            {
                return Err(Error::Scenario(format!("agent {} start or goal touches an obstacle", a.id)));
            }
        }
    }
    Ok(())
}
