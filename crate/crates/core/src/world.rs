//! Deterministic 2D quasi-static pushing world.
//!
//! Objects are discs lying on a table. Each disc carries a z-rank (drop
//! order); a disc is occluded where a higher-ranked disc overlaps it in the
//! plane. The end effector is a smaller disc that slides along the table and
//! shoves objects out of its way. Overlaps that existed before a push (the
//! resting "stack") are preserved as slack: pushing can shrink them but the
//! resolver never lets a pair penetrate deeper than it already did.

use crate::geom::{Rect, Vec2};
use crate::heapgen::HeapSpec;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard cap on action components in meters.
pub const MAX_ACTION: f64 = 0.05;

/// Per-object vertical extent used to derive top heights from drop order.
pub const OBJECT_THICKNESS: f64 = 0.01;

/// Sample lattice side for the visibility estimator (21x21 = 441 points).
const VIS_LATTICE: usize = 21;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("no such object")]
    NoSuchObject,
    #[error("episode finished")]
    EpisodeFinished,
    #[error("workspace too small")]
    WorkspaceTooSmall,
}

/// Fixed parameters of the pushing world.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    /// Episode step limit.
    pub max_steps: u32,
    /// End-effector translation per collision substep, meters.
    pub substep: f64,
    /// Position projection sweep cap per substep.
    pub projection_iters: u32,
    /// Accepted residual pair overlap at the iteration cap, meters.
    pub overlap_tol: f64,
    /// Target visibility that terminates the episode.
    pub done_visibility: f64,
    /// End-effector disc radius, meters.
    pub ee_radius: f64,
    /// Minimum start distance from the target at reset, meters.
    pub min_start_distance: f64,
    /// Workspace width and height, meters.
    pub workspace_w: f64,
    pub workspace_h: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            max_steps: 50,
            substep: 0.005,
            projection_iters: 16,
            overlap_tol: 1e-4,
            done_visibility: 0.99,
            ee_radius: 0.01,
            min_start_distance: 0.2,
            workspace_w: 0.6,
            workspace_h: 0.6,
        }
    }
}

impl WorldParams {
    pub fn workspace(&self) -> Rect {
        Rect::from_size(self.workspace_w, self.workspace_h)
    }
}

/// One tabletop object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDisc {
    pub id: u32,
    pub center: Vec2,
    pub radius: f64,
    /// Drop order; higher ranks rest on top and occlude lower ones.
    pub z_rank: u32,
    /// Top height in meters, derived from z_rank.
    pub height: f64,
}

impl ObjectDisc {
    pub fn top_height(z_rank: u32) -> f64 {
        OBJECT_THICKNESS * (z_rank as f64 + 1.0)
    }
}

/// Full MDP state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: Vec<ObjectDisc>,
    pub target_id: u32,
    pub ee: Vec2,
    pub ee_radius: f64,
    pub workspace: Rect,
    pub step_count: u32,
}

/// End-effector displacement command, clamped on entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    delta: Vec2,
}

impl Action {
    /// Clamps each component to the +-MAX_ACTION box.
    pub fn new(dx: f64, dy: f64) -> Self {
        Action {
            delta: Vec2::new(
                dx.clamp(-MAX_ACTION, MAX_ACTION),
                dy.clamp(-MAX_ACTION, MAX_ACTION),
            ),
        }
    }

    pub fn from_vec(v: Vec2) -> Self {
        Action::new(v.x, v.y)
    }

    pub fn delta(&self) -> Vec2 {
        self.delta
    }
}

/// Reward terms for one step. `total` is always the exact sum of the five
/// component terms; `c`, `m_t` and `sum_m_o` are the raw quantities they
/// were computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub uncover: f64,
    pub heap_move_penalty: f64,
    pub target_move_penalty: f64,
    pub workspace_penalty: f64,
    pub idleness_penalty: f64,
    pub total: f64,
    pub c: f64,
    pub m_t: f64,
    pub sum_m_o: f64,
}

impl RewardBreakdown {
    pub fn zero() -> Self {
        RewardBreakdown {
            uncover: 0.0,
            heap_move_penalty: 0.0,
            target_move_penalty: 0.0,
            workspace_penalty: 0.0,
            idleness_penalty: 0.0,
            total: 0.0,
            c: 0.0,
            m_t: 0.0,
            sum_m_o: 0.0,
        }
    }
}

/// Reward function: 2.5*c, minus the heap-movement term (75/N * sum of
/// non-target displacements, gated on c < 0.05), minus 75 * target
/// displacement, minus 0.5 when the end effector was clamped at the
/// workspace boundary, minus a constant 0.5 per step.
pub fn compute_reward(
    c: f64,
    m_t: f64,
    sum_m_o: f64,
    n_nontarget: usize,
    boundary_clamped: bool,
) -> RewardBreakdown {
    let uncover = 2.5 * c;
    let heap_move_penalty = if c < 0.05 && n_nontarget > 0 {
        -(75.0 / n_nontarget as f64) * sum_m_o
    } else {
        0.0
    };
    let target_move_penalty = -75.0 * m_t;
    let workspace_penalty = if boundary_clamped { -0.5 } else { 0.0 };
    let idleness_penalty = -0.5;
    let total =
        uncover + heap_move_penalty + target_move_penalty + workspace_penalty + idleness_penalty;
    RewardBreakdown {
        uncover,
        heap_move_penalty,
        target_move_penalty,
        workspace_penalty,
        idleness_penalty,
        total,
        c,
        m_t,
        sum_m_o,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    pub reward: RewardBreakdown,
    pub done: bool,
}

/// Fraction of the disc's area not covered by any strictly higher-ranked
/// disc, estimated on a fixed 21x21 lattice clipped to the disc.
pub fn visibility_of(objects: &[ObjectDisc], object_id: u32) -> Result<f64, WorldError> {
    let obj = objects
        .iter()
        .find(|o| o.id == object_id)
        .ok_or(WorldError::NoSuchObject)?;
    let occluders: Vec<&ObjectDisc> = objects
        .iter()
        .filter(|o| {
            o.z_rank > obj.z_rank && o.center.dist(obj.center) < o.radius + obj.radius
        })
        .collect();
    let r = obj.radius;
    let r_sq = r * r;
    let mut inside = 0u32;
    let mut open = 0u32;
    for i in 0..VIS_LATTICE {
        let px = obj.center.x - r + 2.0 * r * i as f64 / (VIS_LATTICE - 1) as f64;
        for j in 0..VIS_LATTICE {
            let py = obj.center.y - r + 2.0 * r * j as f64 / (VIS_LATTICE - 1) as f64;
            let p = Vec2::new(px, py);
            if (p - obj.center).norm_sq() > r_sq {
                continue;
            }
            inside += 1;
            let covered = occluders
                .iter()
                .any(|o| (p - o.center).norm_sq() <= o.radius * o.radius);
            if !covered {
                open += 1;
            }
        }
    }
    Ok(open as f64 / inside as f64)
}

impl WorldState {
    /// Builds the initial state for a heap: objects loaded verbatim, the end
    /// effector rejection-sampled uniformly over the workspace at least
    /// `min_start_distance` from the target center and clear of every object
    /// disc.
    pub fn reset(
        heap: &HeapSpec,
        params: &WorldParams,
        rng: &mut impl Rng,
    ) -> Result<WorldState, WorldError> {
        let workspace = params.workspace();
        let objects: Vec<ObjectDisc> = heap
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| ObjectDisc {
                id: i as u32,
                center: Vec2::new(o.x, o.y),
                radius: o.r,
                z_rank: o.z,
                height: ObjectDisc::top_height(o.z),
            })
            .collect();
        let target = objects
            .iter()
            .find(|o| o.id == heap.target_id)
            .ok_or(WorldError::NoSuchObject)?;
        let target_center = target.center;

        let mut ee = None;
        for _ in 0..1000 {
            let p = Vec2::new(
                workspace.min.x + rng.gen::<f64>() * workspace.width(),
                workspace.min.y + rng.gen::<f64>() * workspace.height(),
            );
            if p.dist(target_center) < params.min_start_distance {
                continue;
            }
            let clear = objects
                .iter()
                .all(|o| p.dist(o.center) >= params.ee_radius + o.radius);
            if clear {
                ee = Some(p);
                break;
            }
        }
        let ee = ee.ok_or(WorldError::WorkspaceTooSmall)?;

        Ok(WorldState {
            objects,
            target_id: heap.target_id,
            ee,
            ee_radius: params.ee_radius,
            workspace,
            step_count: 0,
        })
    }

    pub fn visibility(&self, object_id: u32) -> Result<f64, WorldError> {
        visibility_of(&self.objects, object_id)
    }

    pub fn target_visibility(&self) -> f64 {
        visibility_of(&self.objects, self.target_id).expect("target exists")
    }

    pub fn target(&self) -> &ObjectDisc {
        self.objects
            .iter()
            .find(|o| o.id == self.target_id)
            .expect("target exists")
    }

    pub fn is_done(&self, params: &WorldParams) -> bool {
        self.step_count >= params.max_steps
            || self.target_visibility() >= params.done_visibility
    }

    /// Advances the episode by one action: the end effector translates along
    /// `delta` in substeps with collision resolution, then the reward is
    /// computed from the occlusion change and object displacements.
    pub fn step(&mut self, action: Action, params: &WorldParams) -> Result<StepResult, WorldError> {
        let vis_before = self.target_visibility();
        if self.step_count >= params.max_steps || vis_before >= params.done_visibility {
            return Err(WorldError::EpisodeFinished);
        }
        let occ_prev = 1.0 - vis_before;
        let before: Vec<Vec2> = self.objects.iter().map(|o| o.center).collect();

        let delta = action.delta();
        let length = delta.norm();
        let n_sub = ((length / params.substep).ceil() as usize).max(1);
        let start = self.ee;
        let mut clamped = false;
        for k in 1..=n_sub {
            let t = k as f64 / n_sub as f64;
            let desired = start + delta * t;
            let inside = self.workspace.clamp(desired);
            if inside != desired {
                clamped = true;
            }
            self.resolve_push(inside, params);
        }

        let vis_now = self.target_visibility();
        let occ_now = 1.0 - vis_now;
        let c = if occ_prev < 1e-6 {
            0.0
        } else {
            (occ_prev - occ_now) / occ_prev
        };

        let mut m_t = 0.0;
        let mut sum_m_o = 0.0;
        let mut n_nontarget = 0usize;
        for (obj, prev) in self.objects.iter().zip(&before) {
            let moved = obj.center.dist(*prev);
            if obj.id == self.target_id {
                m_t = moved;
            } else {
                sum_m_o += moved;
                n_nontarget += 1;
            }
        }

        let reward = compute_reward(c, m_t, sum_m_o, n_nontarget, clamped);
        self.step_count += 1;
        let done = vis_now >= params.done_visibility || self.step_count >= params.max_steps;
        Ok(StepResult { reward, done })
    }

    /// Moves the end effector to `ee_target` (at most one substep away) and
    /// resolves collisions: objects overlapping the end effector are pushed
    /// to exact tangency along the contact normal; object pairs may keep the
    /// overlap they had before the move (resting stacks) but any excess is
    /// removed by symmetric position projection. Object centers are clamped
    /// to the workspace throughout.
    pub fn resolve_push(&mut self, ee_target: Vec2, params: &WorldParams) {
        let n = self.objects.len();
        // Pre-move overlap is permitted slack for each pair; it can only
        // shrink over time.
        let mut allowed = vec![0.0f64; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &self.objects[i];
                let b = &self.objects[j];
                let overlap = a.radius + b.radius - a.center.dist(b.center);
                if overlap > 0.0 {
                    allowed[i * n + j] = overlap;
                }
            }
        }
        let fallback = (ee_target - self.ee).normalize_or(Vec2::new(1.0, 0.0));
        self.ee = self.workspace.clamp(ee_target);

        for _ in 0..params.projection_iters {
            let mut moved = self.ee_pass(fallback);
            moved |= self.pair_pass(&allowed, fallback);
            if !moved {
                break;
            }
        }
        // Leave the end effector exactly tangent where possible.
        self.ee_pass(fallback);

        // If an object is pinned (workspace clamp kept it inside the end
        // effector), retreat the end effector instead.
        for _ in 0..8 {
            let mut worst = 1e-9;
            let mut hit = None;
            for o in &self.objects {
                let depth = self.ee_radius + o.radius - o.center.dist(self.ee);
                if depth > worst {
                    worst = depth;
                    hit = Some((o.center, o.radius));
                }
            }
            let Some((center, radius)) = hit else { break };
            let away = (self.ee - center).normalize_or(-fallback);
            self.ee = self
                .workspace
                .clamp(center + away * (self.ee_radius + radius));
        }
    }

    /// Push every object overlapping the end effector to exact tangency.
    fn ee_pass(&mut self, fallback: Vec2) -> bool {
        let mut moved = false;
        let ee = self.ee;
        let ee_r = self.ee_radius;
        let workspace = self.workspace;
        for o in &mut self.objects {
            let sep = o.center - ee;
            let dist = sep.norm();
            let min_dist = ee_r + o.radius;
            if dist < min_dist - 1e-12 {
                let normal = sep.normalize_or(fallback);
                o.center = workspace.clamp(ee + normal * min_dist);
                moved = true;
            }
        }
        moved
    }

    /// Symmetric projection of pair overlaps beyond their permitted slack.
    fn pair_pass(&mut self, allowed: &[f64], fallback: Vec2) -> bool {
        let n = self.objects.len();
        let mut moved = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (&self.objects[i], &self.objects[j]);
                let min_dist = a.radius + b.radius - allowed[i * n + j];
                if min_dist <= 0.0 {
                    continue;
                }
                let sep = b.center - a.center;
                let dist = sep.norm();
                if dist >= min_dist - 1e-12 {
                    continue;
                }
                let normal = sep.normalize_or(fallback);
                let push = 0.5 * (min_dist - dist);
                let (ca, cb) = (a.center, b.center);
                self.objects[i].center = self.workspace.clamp(ca - normal * push);
                self.objects[j].center = self.workspace.clamp(cb + normal * push);
                moved = true;
            }
        }
        moved
    }
}
