//! Reciprocal half-plane collision avoidance (ORCA).
//!
//! Each neighbor contributes one half-plane of permitted velocities. The
//! velocity closest to the preferred one inside every half-plane and the
//! speed disk is found with an incremental 2D linear program; when the
//! constraints are infeasible a second program minimizes the largest
//! violation.

use crate::sim::{Status, World};
use crate::state::{wrap_angle, Action, AgentState, Vec2};

const LP_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrcaConfig {
    /// Time horizon of the velocity obstacles (s).
    pub tau: f64,
    /// Preferred-velocity rotation that breaks exact symmetry (rad).
    pub tie_break: f64,
    /// Bodies closer than this constrain the agent (m).
    pub neighbor_dist: f64,
    /// Added to every radius sum so that small constraint violations in
    /// crowded, infeasible situations do not become contact (m).
    pub safety_margin: f64,
}

impl Default for OrcaConfig {
    fn default() -> Self {
        OrcaConfig { tau: 5.0, tie_break: 1e-3, neighbor_dist: 10.0, safety_margin: 0.05 }
    }
}

/// Velocities `v` with `(v − point)·normal ≥ 0` are permitted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfPlane {
    pub point: Vec2,
    /// Unit boundary direction; the permitted side is on its left.
    pub direction: Vec2,
}

impl HalfPlane {
    pub fn normal(&self) -> Vec2 {
        self.direction.perp()
    }

    /// Signed distance of `v` into the permitted side.
    pub fn margin(&self, v: Vec2) -> f64 {
        self.direction.cross(v - self.point)
    }
}

/// The smallest change `u` to the relative velocity `v_ego − v_nb` that
/// moves it onto the boundary of the truncated velocity obstacle, together
/// with the boundary direction at that point (outside of the obstacle on
/// its left). Overlapping disks use a
/// cone truncated at one step `dt`, which pushes them apart.
pub fn vo_escape(rel_pos: Vec2, rel_vel: Vec2, r_sum: f64, tau: f64, dt: f64) -> (Vec2, Vec2) {
    let dist_sq = rel_pos.norm_sq();
    let r_sq = r_sum * r_sum;
    if dist_sq > r_sq {
        let inv_tau = 1.0 / tau;
        let w = rel_vel - rel_pos * inv_tau;
        let w_len_sq = w.norm_sq();
        let dot1 = w.dot(rel_pos);
        if dot1 < 0.0 && dot1 * dot1 > r_sq * w_len_sq {
            // Closest boundary point lies on the cut-off circle.
            let w_len = w_len_sq.sqrt();
            let unit_w = w * (1.0 / w_len);
            (unit_w * (r_sum * inv_tau - w_len), Vec2::new(unit_w.y, -unit_w.x))
        } else {
            // Closest boundary point lies on a leg.
            let leg = (dist_sq - r_sq).sqrt();
            let dir = if rel_pos.cross(w) > 0.0 {
                Vec2::new(rel_pos.x * leg - rel_pos.y * r_sum, rel_pos.x * r_sum + rel_pos.y * leg) * (1.0 / dist_sq)
            } else {
                -Vec2::new(rel_pos.x * leg + rel_pos.y * r_sum, -rel_pos.x * r_sum + rel_pos.y * leg) * (1.0 / dist_sq)
            };
            let u = dir * rel_vel.dot(dir) - rel_vel;
            (u, dir)
        }
    } else {
        let inv_dt = 1.0 / dt;
        let w = rel_vel - rel_pos * inv_dt;
        let w_len = w.norm();
        let unit_w = if w_len > 0.0 { w * (1.0 / w_len) } else { -rel_pos.normalized() };
        (unit_w * (r_sum * inv_dt - w_len), Vec2::new(unit_w.y, -unit_w.x))
    }
}

/// Half-plane for `ego` against a body at `p` moving with `v`, radius `r`.
/// `share` is the fraction of the avoidance effort `ego` takes on: ½ for a
/// reciprocating agent, 1 for a static or frozen body.
pub fn halfplane_against(ego: &AgentState, p: Vec2, v: Vec2, r: f64, share: f64, tau: f64, dt: f64) -> HalfPlane {
    let (u, direction) = vo_escape(p - ego.p, ego.v - v, ego.r + r, tau, dt);
    HalfPlane { point: ego.v + u * share, direction }
}

/// Reciprocal half-plane of `ego` induced by `nb`.
pub fn orca_halfplane(ego: &AgentState, nb: &AgentState, tau: f64, dt: f64) -> HalfPlane {
    halfplane_against(ego, nb.p, nb.v, nb.r, 0.5, tau, dt)
}

/// Optimizes along the boundary of half-plane `k` subject to planes `0..k`
/// and the disk of radius `radius`.
fn lp1(planes: &[HalfPlane], k: usize, radius: f64, opt: Vec2, direction_opt: bool) -> Option<Vec2> {
    let line = planes[k];
    let dot = line.point.dot(line.direction);
    let disc = dot * dot + radius * radius - line.point.norm_sq();
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (mut t_left, mut t_right) = (-dot - sq, -dot + sq);
    for other in &planes[..k] {
        let denom = line.direction.cross(other.direction);
        let numer = other.direction.cross(line.point - other.point);
        if denom.abs() <= LP_EPS {
            if numer < 0.0 {
                return None;
            }
            continue;
        }
        let t = numer / denom;
        if denom >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return None;
        }
    }
    let t = if direction_opt {
        if opt.dot(line.direction) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        line.direction.dot(opt - line.point).clamp(t_left, t_right)
    };
    Some(line.point + line.direction * t)
}

/// Incremental LP. Returns the optimum and the index of the first plane
/// that could not be satisfied (`planes.len()` on success).
fn lp2(planes: &[HalfPlane], radius: f64, opt: Vec2, direction_opt: bool) -> (Vec2, usize) {
    let mut result = if direction_opt {
        opt * radius
    } else if opt.norm_sq() > radius * radius {
        opt.normalized() * radius
    } else {
        opt
    };
    for k in 0..planes.len() {
        if planes[k].margin(result) < 0.0 {
            match lp1(planes, k, radius, opt, direction_opt) {
                Some(v) => result = v,
                None => return (result, k),
            }
        }
    }
    (result, planes.len())
}

/// Minimizes the largest violation of planes `begin..`, starting from the
/// partial result of [`lp2`].
fn lp3(planes: &[HalfPlane], begin: usize, radius: f64, mut result: Vec2) -> Vec2 {
    let mut distance = 0.0;
    for i in begin..planes.len() {
        if -planes[i].margin(result) > distance {
            let pi = planes[i];
            let mut proj = Vec::with_capacity(i);
            for pj in &planes[..i] {
                let det = pi.direction.cross(pj.direction);
                let point = if det.abs() <= LP_EPS {
                    if pi.direction.dot(pj.direction) > 0.0 {
                        continue;
                    }
                    (pi.point + pj.point) * 0.5
                } else {
                    pi.point + pi.direction * (pj.direction.cross(pi.point - pj.point) / det)
                };
                proj.push(HalfPlane { point, direction: (pj.direction - pi.direction).normalized() });
            }
            let (candidate, fail) = lp2(&proj, radius, pi.normal(), true);
            if fail == proj.len() {
                result = candidate;
            }
            distance = -pi.margin(result);
        }
    }
    result
}

/// Velocity closest to `v_pref_vec` inside every half-plane and the disk
/// `‖v‖ ≤ v_max`, or the least-violating velocity when infeasible.
pub fn solve(planes: &[HalfPlane], v_max: f64, v_pref_vec: Vec2) -> Vec2 {
    let (result, fail) = lp2(planes, v_max, v_pref_vec, false);
    if fail < planes.len() {
        lp3(planes, fail, v_max, result)
    } else {
        result
    }
}

/// Preferred velocity, rotated by the tie-break angle.
pub fn preferred_velocity(ego: &AgentState, cfg: &OrcaConfig) -> Vec2 {
    ego.preferred_velocity().rotate(cfg.tie_break)
}

/// New velocity of agent index `k` given everything it senses. Active
/// agents reciprocate; frozen agents and obstacles are treated as static.
pub fn orca_velocity(world: &World, k: usize, cfg: &OrcaConfig) -> Vec2 {
    let planes = orca_planes(world, k, cfg);
    solve(&planes, world.agents[k].v_pref, preferred_velocity(&world.agents[k], cfg))
}

/// Half-planes of agent index `k` against every body it senses.
pub fn orca_planes(world: &World, k: usize, cfg: &OrcaConfig) -> Vec<HalfPlane> {
    let ego = &world.agents[k];
    let dt = world.config.dt;
    let r2 = cfg.neighbor_dist * cfg.neighbor_dist;
    let mut planes = Vec::new();
    for (j, nb) in world.agents.iter().enumerate() {
        if j == k || (nb.p - ego.p).norm_sq() >= r2 {
            continue;
        }
        let share = if world.status[j] == Status::Active { 0.5 } else { 1.0 };
        planes.push(halfplane_against(ego, nb.p, nb.v, nb.r + cfg.safety_margin, share, cfg.tau, dt));
    }
    for o in &world.obstacles {
        if (o.center - ego.p).norm_sq() < r2 {
            planes.push(halfplane_against(ego, o.center, Vec2::ZERO, o.radius + cfg.safety_margin, 1.0, cfg.tau, dt));
        }
    }
    planes
}

/// Converts a holonomic velocity into a unicycle command: steer toward the
/// velocity direction and command the speed component that is achievable
/// along the heading reached after this step's turn limit.
pub fn to_unicycle(ego: &AgentState, v: Vec2, max_dpsi: f64) -> Action {
    to_unicycle_within(ego, v, max_dpsi, &[])
}

/// Like [`to_unicycle`], but the speed along the reachable heading is kept
/// inside the half-planes `planes` when some speed in `[0, v_pref]` is; if
/// none is, the speed with the smallest worst violation is used.
pub fn to_unicycle_within(ego: &AgentState, v: Vec2, max_dpsi: f64, planes: &[HalfPlane]) -> Action {
    let psi_cmd = if v.norm() < 1e-12 { ego.psi } else { v.angle() };
    let turn = wrap_angle(psi_cmd - ego.psi).clamp(-max_dpsi, max_dpsi);
    let heading = Vec2::from_angle(wrap_angle(ego.psi + turn));
    let target = v.dot(heading).clamp(0.0, ego.v_pref);
    // Plane k requires a_k·s ≥ b_k along the heading ray.
    let coeffs: Vec<(f64, f64)> =
        planes.iter().map(|pl| (pl.direction.cross(heading), pl.direction.cross(pl.point))).collect();
    let (mut lo, mut hi) = (0.0f64, ego.v_pref);
    let mut feasible = true;
    for &(a, b) in &coeffs {
        if a > LP_EPS {
            lo = lo.max(b / a);
        } else if a < -LP_EPS {
            hi = hi.min(b / a);
        } else if b > 0.0 {
            feasible = false;
        }
    }
    let speed = if feasible && lo <= hi {
        target.clamp(lo, hi)
    } else {
        let worst = |s: f64| coeffs.iter().map(|&(a, b)| b - a * s).fold(f64::NEG_INFINITY, f64::max);
        let mut candidates = vec![0.0, target, ego.v_pref];
        candidates.extend(coeffs.iter().filter(|(a, _)| a.abs() > LP_EPS).map(|&(a, b)| b / a));
        candidates
            .into_iter()
            .filter(|s| (0.0..=ego.v_pref).contains(s))
            .min_by(|&x, &y| worst(x).total_cmp(&worst(y)).then((x - target).abs().total_cmp(&(y - target).abs())))
            .unwrap_or(0.0)
    };
    Action { speed, psi_cmd }
}

/// ORCA actions for every active agent of `world`.
pub fn orca_actions(world: &World, cfg: &OrcaConfig) -> Vec<Option<Action>> {
    (0..world.agents.len())
        .map(|k| {
            world.is_active(k).then(|| {
                let planes = orca_planes(world, k, cfg);
                let ego = &world.agents[k];
                let v = solve(&planes, ego.v_pref, preferred_velocity(ego, cfg)).rotate(cfg.tie_break);
                to_unicycle_within(ego, v, world.config.max_dpsi, &planes)
            })
        })
        .collect()
}
