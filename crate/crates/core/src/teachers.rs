//! Scripted privileged pushing policies used to guide exploration.
//!
//! Each teacher plans a waypoint path from the current state and walks it
//! with clamped steps, replanning with fresh randomness when the path is
//! exhausted. The straight teacher pushes along a random chord through the
//! target center; the zig-zag teacher overlays a triangular lateral offset
//! on that chord; the spiral teacher moves to the target and spirals
//! outward.

use crate::geom::{Rect, Vec2};
use crate::world::{Action, WorldState, MAX_ACTION};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Straight,
    ZigZag,
    Spiral,
}

impl TeacherKind {
    pub const ALL: [TeacherKind; 3] = [
        TeacherKind::Straight,
        TeacherKind::ZigZag,
        TeacherKind::Spiral,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            TeacherKind::Straight => "straight",
            TeacherKind::ZigZag => "zigzag",
            TeacherKind::Spiral => "spiral",
        }
    }

    pub fn parse(tag: &str) -> Option<TeacherKind> {
        match tag {
            "straight" => Some(TeacherKind::Straight),
            "zigzag" => Some(TeacherKind::ZigZag),
            "spiral" => Some(TeacherKind::Spiral),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherParams {
    /// Push chord half-length beyond the target center, meters.
    pub overshoot: f64,
    /// Zig-zag lateral amplitude, meters.
    pub zigzag_amplitude: f64,
    /// Zig-zag period along the chord, meters.
    pub zigzag_period: f64,
    /// Spiral growth rate, meters per radian.
    pub spiral_pitch: f64,
    /// Spiral stop radius, meters.
    pub spiral_max_radius: f64,
    /// Waypoint arrival tolerance, meters.
    pub waypoint_tolerance: f64,
    /// Path discretization step, meters (kept under the action clamp).
    pub segment_length: f64,
}

impl Default for TeacherParams {
    fn default() -> Self {
        TeacherParams {
            overshoot: 0.10,
            zigzag_amplitude: 0.02,
            zigzag_period: 0.04,
            spiral_pitch: 0.006,
            spiral_max_radius: 0.12,
            waypoint_tolerance: 1e-3,
            segment_length: 0.04,
        }
    }
}

/// A planned waypoint path. Consecutive waypoints are at most one action
/// apart; `cursor` indexes the next waypoint to reach.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPlan {
    pub kind: TeacherKind,
    pub waypoints: Vec<Vec2>,
    pub cursor: usize,
}

/// Appends points along `from -> to` every `seg` meters (exclusive of
/// `from`, inclusive of `to`), clamped to the workspace.
fn discretize_into(out: &mut Vec<Vec2>, from: Vec2, to: Vec2, seg: f64, workspace: Rect) {
    let d = to - from;
    let len = d.norm();
    let n = (len / seg).ceil().max(1.0) as usize;
    for k in 1..=n {
        out.push(workspace.clamp(from + d * (k as f64 / n as f64)));
    }
}

/// Triangular wave with unit period and unit amplitude, zero at phase 0.
fn triangle(phase: f64) -> f64 {
    let f = phase - phase.floor();
    if f < 0.25 {
        4.0 * f
    } else if f < 0.75 {
        2.0 - 4.0 * f
    } else {
        4.0 * f - 4.0
    }
}

fn chord_waypoints(
    ee: Vec2,
    target: Vec2,
    theta: f64,
    lateral_amp: f64,
    period: f64,
    params: &TeacherParams,
    workspace: Rect,
) -> Vec<Vec2> {
    let u = Vec2::unit(theta);
    let start = target - u * params.overshoot;
    let end = target + u * params.overshoot;
    let mut wp = Vec::new();
    discretize_into(&mut wp, ee, start, params.segment_length, workspace);
    if lateral_amp == 0.0 {
        discretize_into(&mut wp, start, end, params.segment_length, workspace);
    } else {
        // Sample the chord finely so the triangular offset is resolved.
        let len = 2.0 * params.overshoot;
        let n = (len / 0.01).ceil() as usize;
        let lat = u.perp();
        for k in 1..=n {
            let s = len * k as f64 / n as f64;
            let p = start + u * s + lat * (lateral_amp * triangle(s / period));
            wp.push(workspace.clamp(p));
        }
    }
    wp
}

fn spiral_waypoints(ee: Vec2, target: Vec2, theta0: f64, params: &TeacherParams, workspace: Rect) -> Vec<Vec2> {
    let mut wp = Vec::new();
    discretize_into(&mut wp, ee, target, params.segment_length, workspace);
    let b = params.spiral_pitch;
    let phi_max = params.spiral_max_radius / b;
    let mut phi = 0.0;
    while phi < phi_max {
        let r = b * phi;
        let dphi = (params.segment_length / r.max(1e-3)).min(0.5);
        phi = (phi + dphi).min(phi_max);
        wp.push(workspace.clamp(target + Vec2::unit(theta0 + phi) * (b * phi)));
    }
    wp
}

/// Plans a fresh waypoint path for `kind` from the current state.
pub fn plan(
    kind: TeacherKind,
    state: &WorldState,
    params: &TeacherParams,
    rng: &mut impl Rng,
) -> TeacherPlan {
    let target = state.target().center;
    let theta = std::f64::consts::TAU * rng.gen::<f64>();
    let waypoints = match kind {
        TeacherKind::Straight => {
            chord_waypoints(state.ee, target, theta, 0.0, 1.0, params, state.workspace)
        }
        TeacherKind::ZigZag => chord_waypoints(
            state.ee,
            target,
            theta,
            params.zigzag_amplitude,
            params.zigzag_period,
            params,
            state.workspace,
        ),
        TeacherKind::Spiral => spiral_waypoints(state.ee, target, theta, params, state.workspace),
    };
    TeacherPlan {
        kind,
        waypoints,
        cursor: 0,
    }
}

/// One teacher: a kind plus its active plan.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub kind: TeacherKind,
    pub params: TeacherParams,
    plan: Option<TeacherPlan>,
}

impl Teacher {
    pub fn new(kind: TeacherKind, params: TeacherParams) -> Self {
        Teacher {
            kind,
            params,
            plan: None,
        }
    }

    /// Drops the active plan (call at episode boundaries).
    pub fn reset(&mut self) {
        self.plan = None;
    }

    pub fn plan_ref(&self) -> Option<&TeacherPlan> {
        self.plan.as_ref()
    }

    /// Clamped step toward the next waypoint; waypoints within tolerance are
    /// consumed first, and an exhausted plan is replaced using fresh
    /// randomness.
    pub fn next_action(&mut self, state: &WorldState, rng: &mut impl Rng) -> Action {
        for _ in 0..2 {
            let plan = self
                .plan
                .get_or_insert_with(|| plan(self.kind, state, &self.params, rng));
            while plan.cursor < plan.waypoints.len()
                && state.ee.dist(plan.waypoints[plan.cursor]) < self.params.waypoint_tolerance
            {
                plan.cursor += 1;
            }
            if plan.cursor >= plan.waypoints.len() {
                self.plan = None;
                continue;
            }
            let to = plan.waypoints[plan.cursor] - state.ee;
            let len = to.norm();
            let step = if len > MAX_ACTION {
                to * (MAX_ACTION / len)
            } else {
                to
            };
            return Action::from_vec(step);
        }
        Action::new(0.0, 0.0)
    }
}
