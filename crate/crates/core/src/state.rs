//! Agent state, ego frames, and the per-agent observation vectors.
//!
//! Every learned input is expressed in the ego frame: origin at the agent's
//! position, x-axis pointing at its goal. Ego-frame quantities are therefore
//! invariant to rotating or translating the whole world.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Below this goal distance the frame falls back to the agent's heading.
pub const AT_GOAL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Vec2 { x, y }
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        Vec2::new(angle.cos(), angle.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Unit vector in the same direction, or zero for the zero vector.
    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    /// Counter-clockwise rotation by `angle`.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(−π, π]`; exactly `±π` maps to `+π`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: usize,
    pub p: Vec2,
    pub v: Vec2,
    pub psi: f64,
    pub r: f64,
    pub v_pref: f64,
    pub g: Vec2,
}

impl AgentState {
    /// A stationary agent facing its goal.
    pub fn new(id: usize, p: Vec2, g: Vec2, r: f64, v_pref: f64) -> Self {
        let psi = if (g - p).norm() < AT_GOAL_EPS { 0.0 } else { (g - p).angle() };
        AgentState { id, p, v: Vec2::ZERO, psi, r, v_pref, g }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.r > 0.0) {
            return Err(format!("agent {}: radius must be > 0", self.id));
        }
        if !(self.v_pref > 0.0) {
            return Err(format!("agent {}: v_pref must be > 0", self.id));
        }
        if !(self.p.is_finite() && self.v.is_finite() && self.g.is_finite() && self.psi.is_finite()) {
            return Err(format!("agent {}: non-finite state", self.id));
        }
        if self.psi.abs() > PI {
            return Err(format!("agent {}: heading {} outside (−π, π]", self.id, self.psi));
        }
        if self.v.norm() > self.v_pref + 1e-9 {
            return Err(format!("agent {}: speed exceeds v_pref", self.id));
        }
        Ok(())
    }

    pub fn hidden(&self) -> HiddenState {
        HiddenState { g: self.g, v_pref: self.v_pref, psi: self.psi }
    }

    pub fn goal_distance(&self) -> f64 {
        (self.g - self.p).norm()
    }

    /// Unit vector toward the goal times `v_pref` (zero at the goal).
    pub fn preferred_velocity(&self) -> Vec2 {
        (self.g - self.p).normalized() * self.v_pref
    }
}

/// The ego agent's own observation (distance to goal, preferred speed,
/// frame-relative heading, radius).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoInput {
    pub d_goal: f64,
    pub v_pref: f64,
    pub psi_rel: f64,
    pub r: f64,
}

impl EgoInput {
    pub const LEN: usize = 4;

    pub fn to_array(self) -> [f64; 4] {
        [self.d_goal, self.v_pref, self.psi_rel, self.r]
    }
}

/// Observable state of another body in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborObs {
    pub p_rel: Vec2,
    pub v_rel: Vec2,
    pub r_j: f64,
    /// Center-to-center distance.
    pub d_a: f64,
    pub r_sum: f64,
}

impl NeighborObs {
    pub const LEN: usize = 7;

    pub fn to_array(self) -> [f64; 7] {
        [self.p_rel.x, self.p_rel.y, self.v_rel.x, self.v_rel.y, self.r_j, self.d_a, self.r_sum]
    }

    /// Surface-to-surface distance.
    pub fn clearance(&self) -> f64 {
        self.d_a - self.r_sum
    }
}

/// Private intent that only travels over a granted link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub g: Vec2,
    pub v_pref: f64,
    pub psi: f64,
}

/// What the ego agent derives from a neighbor's hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommState {
    pub d_goal_j: f64,
    pub dv_pref: f64,
    pub dpsi: f64,
}

impl CommState {
    pub const LEN: usize = 3;

    pub fn to_array(self) -> [f64; 3] {
        [self.d_goal_j, self.dv_pref, self.dpsi]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub speed: f64,
    pub psi_cmd: f64,
}

impl Action {
    pub const STOP: Action = Action { speed: 0.0, psi_cmd: 0.0 };
}

/// A 2D rigid frame: `origin` in world coordinates and the world angle of
/// its x-axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub origin: Vec2,
    pub angle: f64,
}

impl Frame {
    pub fn point_to_local(&self, p: Vec2) -> Vec2 {
        (p - self.origin).rotate(-self.angle)
    }

    pub fn point_to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.angle) + self.origin
    }

    pub fn vector_to_local(&self, v: Vec2) -> Vec2 {
        v.rotate(-self.angle)
    }

    pub fn vector_to_world(&self, v: Vec2) -> Vec2 {
        v.rotate(self.angle)
    }
}

pub fn ego_frame(ego: &AgentState) -> Frame {
    let to_goal = ego.g - ego.p;
    let angle = if to_goal.norm() < AT_GOAL_EPS { ego.psi } else { to_goal.angle() };
    Frame { origin: ego.p, angle }
}

pub fn ego_input(ego: &AgentState) -> EgoInput {
    let frame = ego_frame(ego);
    EgoInput {
        d_goal: ego.goal_distance(),
        v_pref: ego.v_pref,
        psi_rel: wrap_angle(ego.psi - frame.angle),
        r: ego.r,
    }
}

/// Observation of a body at `p` moving with `v`, radius `r`, seen by `ego`.
pub fn observe_body(ego: &AgentState, frame: &Frame, p: Vec2, v: Vec2, r: f64) -> NeighborObs {
    NeighborObs {
        p_rel: frame.point_to_local(p),
        v_rel: frame.vector_to_local(v),
        r_j: r,
        d_a: (p - ego.p).norm(),
        r_sum: ego.r + r,
    }
}

pub fn to_ego_frame(ego: &AgentState, nb: &AgentState) -> NeighborObs {
    observe_body(ego, &ego_frame(ego), nb.p, nb.v, nb.r)
}

/// The ego agent's own observable state as an attention token.
pub fn ego_self_obs(ego: &AgentState) -> NeighborObs {
    let frame = ego_frame(ego);
    NeighborObs {
        p_rel: Vec2::ZERO,
        v_rel: frame.vector_to_local(ego.v),
        r_j: ego.r,
        d_a: 0.0,
        r_sum: 2.0 * ego.r,
    }
}

pub fn comm_state(ego: &AgentState, nb_hidden: &HiddenState) -> CommState {
    CommState {
        d_goal_j: (nb_hidden.g - ego.p).norm(),
        dv_pref: nb_hidden.v_pref - ego.v_pref,
        dpsi: wrap_angle(nb_hidden.psi - ego.psi),
    }
}
