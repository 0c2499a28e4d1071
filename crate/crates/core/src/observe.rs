//! Actor observations and the critic's privileged state.
//!
//! The actor sees a top-height image, a target-masked position image whose
//! channels hold metric offsets from the end effector, and the normalized
//! end-effector pose. The critic sees ground-truth object positions relative
//! to the end effector.

use crate::geom::Vec2;
use crate::world::WorldState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObserveError {
    #[error("exceeds max_objects")]
    ExceedsMaxObjects,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserveConfig {
    /// Image side length in cells.
    pub grid: usize,
    /// Zero the position-offset channels (mask stays): the "no pose input"
    /// ablation.
    pub zero_position_channels: bool,
    /// Privileged vector capacity for non-target objects.
    pub max_objects: usize,
    /// Height normalization divisor, meters.
    pub height_scale: f64,
}

impl Default for ObserveConfig {
    fn default() -> Self {
        ObserveConfig {
            grid: 32,
            zero_position_channels: false,
            max_objects: 20,
            height_scale: 0.1,
        }
    }
}

/// Actor input: `height` is row-major G*G, `position` channel-major 3*G*G
/// (dx, dy, mask), `ee_pose` normalized to [-1, 1] over the workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub grid: usize,
    pub height: Vec<f64>,
    pub position: Vec<f64>,
    pub ee_pose: [f64; 2],
}

/// Critic input: target offset, per-object offsets sorted by distance to the
/// end effector (zero-padded to 2*max_objects), and the normalized pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivilegedState {
    pub target_rel: [f64; 2],
    pub others_rel: Vec<f64>,
    pub ee_pose: [f64; 2],
}

fn normalized_pose(state: &WorldState) -> [f64; 2] {
    let w = state.workspace;
    [
        2.0 * (state.ee.x - w.min.x) / w.width() - 1.0,
        2.0 * (state.ee.y - w.min.y) / w.height() - 1.0,
    ]
}

/// Renders the observation. Cell (i, j) covers the point at column j, row i;
/// the height image holds the top height (normalized) of the highest disc
/// covering the cell center; position channels are set only where the target
/// is the topmost disc.
pub fn render(state: &WorldState, cfg: &ObserveConfig) -> Observation {
    let g = cfg.grid;
    let w = state.workspace;
    let cell_w = w.width() / g as f64;
    let cell_h = w.height() / g as f64;
    let cells = g * g;

    // Topmost disc per cell, painted in ascending z-rank.
    let mut top_z = vec![-1i64; cells];
    let mut top_height = vec![0.0f64; cells];
    let mut top_id = vec![u32::MAX; cells];
    let mut order: Vec<usize> = (0..state.objects.len()).collect();
    order.sort_by_key(|&k| state.objects[k].z_rank);
    for k in order {
        let o = &state.objects[k];
        let j0 = (((o.center.x - o.radius - w.min.x) / cell_w - 0.5).floor()).max(0.0) as usize;
        let i0 = (((o.center.y - o.radius - w.min.y) / cell_h - 0.5).floor()).max(0.0) as usize;
        let j1 = ((((o.center.x + o.radius - w.min.x) / cell_w + 0.5).ceil()) as usize).min(g);
        let i1 = ((((o.center.y + o.radius - w.min.y) / cell_h + 0.5).ceil()) as usize).min(g);
        let r_sq = o.radius * o.radius;
        for i in i0..i1 {
            let cy = w.min.y + (i as f64 + 0.5) * cell_h;
            for j in j0..j1 {
                let cx = w.min.x + (j as f64 + 0.5) * cell_w;
                let d = Vec2::new(cx, cy) - o.center;
                if d.norm_sq() <= r_sq && (o.z_rank as i64) > top_z[i * g + j] {
                    top_z[i * g + j] = o.z_rank as i64;
                    top_height[i * g + j] = o.height;
                    top_id[i * g + j] = o.id;
                }
            }
        }
    }

    let mut height = vec![0.0f64; cells];
    let mut position = vec![0.0f64; 3 * cells];
    for i in 0..g {
        let cy = w.min.y + (i as f64 + 0.5) * cell_h;
        for j in 0..g {
            let idx = i * g + j;
            height[idx] = top_height[idx] / cfg.height_scale;
            if top_id[idx] == state.target_id {
                let cx = w.min.x + (j as f64 + 0.5) * cell_w;
                if !cfg.zero_position_channels {
                    position[idx] = cx - state.ee.x;
                    position[cells + idx] = cy - state.ee.y;
                }
                position[2 * cells + idx] = 1.0;
            }
        }
    }

    Observation {
        grid: g,
        height,
        position,
        ee_pose: normalized_pose(state),
    }
}

/// Builds the privileged vector; non-target objects are sorted by distance
/// to the end effector (ties by id) and zero-padded to capacity.
pub fn privileged(state: &WorldState, cfg: &ObserveConfig) -> Result<PrivilegedState, ObserveError> {
    let target = state.target();
    let mut others: Vec<&crate::world::ObjectDisc> = state
        .objects
        .iter()
        .filter(|o| o.id != state.target_id)
        .collect();
    if others.len() > cfg.max_objects {
        return Err(ObserveError::ExceedsMaxObjects);
    }
    others.sort_by(|a, b| {
        let da = a.center.dist(state.ee);
        let db = b.center.dist(state.ee);
        da.partial_cmp(&db).unwrap().then(a.id.cmp(&b.id))
    });
    let mut others_rel = vec![0.0f64; 2 * cfg.max_objects];
    for (k, o) in others.iter().enumerate() {
        others_rel[2 * k] = o.center.x - state.ee.x;
        others_rel[2 * k + 1] = o.center.y - state.ee.y;
    }
    Ok(PrivilegedState {
        target_rel: [target.center.x - state.ee.x, target.center.y - state.ee.y],
        others_rel,
        ee_pose: normalized_pose(state),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rect;
    use crate::world::ObjectDisc;

    fn disc(id: u32, x: f64, y: f64, r: f64, z: u32) -> ObjectDisc {
        ObjectDisc {
            id,
            center: Vec2::new(x, y),
            radius: r,
            z_rank: z,
            height: ObjectDisc::top_height(z),
        }
    }

    fn state(objects: Vec<ObjectDisc>, target_id: u32, ee: Vec2) -> WorldState {
        WorldState {
            objects,
            target_id,
            ee,
            ee_radius: 0.01,
            workspace: Rect::from_size(0.6, 0.6),
            step_count: 0,
        }
    }

    #[test]
    fn position_channels_are_offsets_from_ee() {
        let s = state(
            vec![disc(0, 0.309375, 0.309375, 0.03, 0)],
            0,
            Vec2::new(0.1, 0.1),
        );
        let cfg = ObserveConfig::default();
        let obs = render(&s, &cfg);
        let g = cfg.grid;
        let cells = g * g;
        // Cell (16,16) center is exactly (0.309375, 0.309375) = the target
        // center, so it is masked and carries the metric offset.
        let idx = 16 * g + 16;
        assert_eq!(obs.position[2 * cells + idx], 1.0);
        assert!((obs.position[idx] - (0.309375 - 0.1)).abs() < 1e-12);
        assert!((obs.position[cells + idx] - (0.309375 - 0.1)).abs() < 1e-12);
        // Off-mask cells carry exact zeros in all channels.
        let far = 0;
        assert_eq!(obs.position[far], 0.0);
        assert_eq!(obs.position[cells + far], 0.0);
        assert_eq!(obs.position[2 * cells + far], 0.0);
    }

    #[test]
    fn fully_covered_target_has_empty_mask() {
        let s = state(
            vec![disc(0, 0.3, 0.3, 0.03, 0), disc(1, 0.3, 0.3, 0.04, 1)],
            0,
            Vec2::new(0.1, 0.1),
        );
        let obs = render(&s, &ObserveConfig::default());
        let cells = obs.grid * obs.grid;
        assert!(obs.position[2 * cells..].iter().all(|&m| m == 0.0));
        // Height image still sees the occluder.
        assert!(obs.height.iter().any(|&h| h > 0.0));
    }

    #[test]
    fn mask_cell_count_matches_disc_area() {
        let s = state(vec![disc(0, 0.3, 0.3, 0.03, 0)], 0, Vec2::new(0.1, 0.1));
        let cfg = ObserveConfig::default();
        let obs = render(&s, &cfg);
        let g = cfg.grid;
        let cells = g * g;
        let count: f64 = obs.position[2 * cells..].iter().sum();
        // pi * r^2 * G^2 / W^2 ~ 8.04 for r = 0.03 on a 0.6 m workspace.
        let expected = std::f64::consts::PI * 0.03 * 0.03 * (g * g) as f64 / (0.6 * 0.6);
        assert!(
            (count - expected).abs() <= 4.0,
            "mask count {count} vs {expected}"
        );
        // Independent recount from cell-center geometry.
        let mut recount = 0;
        for i in 0..g {
            for j in 0..g {
                let c = Vec2::new((j as f64 + 0.5) * 0.6 / g as f64, (i as f64 + 0.5) * 0.6 / g as f64);
                if c.dist(Vec2::new(0.3, 0.3)) <= 0.03 {
                    recount += 1;
                }
            }
        }
        assert_eq!(count as usize, recount);
    }

    #[test]
    fn height_image_takes_topmost_height() {
        let s = state(
            vec![disc(0, 0.3, 0.3, 0.03, 0), disc(1, 0.3, 0.3, 0.02, 1)],
            0,
            Vec2::new(0.1, 0.1),
        );
        let cfg = ObserveConfig::default();
        let obs = render(&s, &cfg);
        let g = cfg.grid;
        // Center cell shows the higher disc's top height (2 * thickness).
        let idx = (g / 2) * g + g / 2;
        assert!((obs.height[idx] - 0.02 / 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_position_ablation_keeps_mask() {
        let s = state(vec![disc(0, 0.3, 0.3, 0.03, 0)], 0, Vec2::new(0.1, 0.1));
        let cfg = ObserveConfig {
            zero_position_channels: true,
            ..ObserveConfig::default()
        };
        let obs = render(&s, &cfg);
        let cells = obs.grid * obs.grid;
        assert!(obs.position[..2 * cells].iter().all(|&v| v == 0.0));
        assert!(obs.position[2 * cells..].iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn render_is_pure() {
        let s = state(
            vec![disc(0, 0.31, 0.29, 0.03, 0), disc(1, 0.28, 0.33, 0.025, 1)],
            0,
            Vec2::new(0.44, 0.12),
        );
        let cfg = ObserveConfig::default();
        assert_eq!(render(&s, &cfg), render(&s, &cfg));
    }

    #[test]
    fn mask_fraction_tracks_visibility() {
        let mut rng = crate::rng::seeded(31);
        let cfg = ObserveConfig::default();
        for _ in 0..50 {
            use rand::Rng;
            let r = 0.0375 + 0.06 * rng.gen::<f64>();
            let rb = 0.02 + 0.06 * rng.gen::<f64>();
            let d = rng.gen::<f64>() * (r + rb);
            let s = state(
                vec![disc(0, 0.3, 0.3, r, 0), disc(1, 0.3 + d, 0.3, rb, 1)],
                0,
                Vec2::new(0.1, 0.1),
            );
            let obs = render(&s, &cfg);
            let g = cfg.grid;
            let cells = g * g;
            let mask: f64 = obs.position[2 * cells..].iter().sum();
            let mut covered = 0.0;
            for i in 0..g {
                for j in 0..g {
                    let c = Vec2::new(
                        (j as f64 + 0.5) * 0.6 / g as f64,
                        (i as f64 + 0.5) * 0.6 / g as f64,
                    );
                    if c.dist(Vec2::new(0.3, 0.3)) <= r {
                        covered += 1.0;
                    }
                }
            }
            let vis = s.visibility(0).unwrap();
            assert!(
                (mask / covered - vis).abs() <= 0.1,
                "r={r} rb={rb} d={d}: mask/covered {} vs vis {vis}",
                mask / covered
            );
        }
    }

    #[test]
    fn privileged_offsets_and_padding() {
        let s = state(
            vec![
                disc(0, 0.2, 0.2, 0.03, 0),
                disc(1, 0.30, 0.2, 0.03, 1),
                disc(2, 0.25, 0.2, 0.02, 2),
                disc(3, 0.5, 0.5, 0.02, 3),
            ],
            0,
            Vec2::new(0.2, 0.2),
        );
        let cfg = ObserveConfig::default();
        let p = privileged(&s, &cfg).unwrap();
        // EE coincides with the target center.
        assert_eq!(p.target_rel, [0.0, 0.0]);
        // Nearest non-target first: object 2 at distance 0.05 beats 1 at 0.10.
        assert!((p.others_rel[0] - 0.05).abs() < 1e-15);
        assert_eq!(p.others_rel[1], 0.0);
        assert!((p.others_rel[2] - 0.10).abs() < 1e-15);
        // 3 non-targets with capacity 20: 40 - 6 = 34 trailing zeros.
        assert!(p.others_rel[6..].iter().all(|&v| v == 0.0));
        assert_eq!(p.others_rel.len(), 40);
    }

    #[test]
    fn privileged_is_permutation_invariant() {
        let objs = vec![
            disc(0, 0.2, 0.2, 0.03, 0),
            disc(1, 0.30, 0.2, 0.03, 1),
            disc(2, 0.25, 0.2, 0.02, 2),
        ];
        let cfg = ObserveConfig::default();
        let a = privileged(&state(objs.clone(), 0, Vec2::new(0.4, 0.4)), &cfg).unwrap();
        let mut rev = objs;
        rev.reverse();
        let b = privileged(&state(rev, 0, Vec2::new(0.4, 0.4)), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn privileged_rejects_overflow() {
        let objs: Vec<ObjectDisc> = (0..6)
            .map(|k| disc(k, 0.1 + 0.05 * k as f64, 0.3, 0.02, k))
            .collect();
        let cfg = ObserveConfig {
            max_objects: 4,
            ..ObserveConfig::default()
        };
        assert_eq!(
            privileged(&state(objs, 0, Vec2::new(0.1, 0.1)), &cfg),
            Err(ObserveError::ExceedsMaxObjects)
        );
    }
}
