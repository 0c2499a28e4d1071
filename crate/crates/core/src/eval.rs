//! Rollout execution, episode metrics, and the geometric graspability proxy.

use crate::geom::Vec2;
use crate::heapgen::HeapSpec;
use crate::metrics::MetricsRow;
use crate::nn::{self, Network, NnError, Tensor};
use crate::observe::{render, ObserveConfig};
use crate::rng::{self, stream};
use crate::teachers::{Teacher, TeacherKind, TeacherParams};
use crate::world::{Action, RewardBreakdown, WorldError, WorldParams, WorldState};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Antipodal grasp axes tested by the graspability proxy.
pub const GRASP_AXES: usize = 16;
pub const FINGER_RADIUS: f64 = 0.008;
pub const FINGER_CLEARANCE: f64 = 0.002;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("network: {0}")]
    Nn(#[from] NnError),
    #[error("unknown policy tag `{0}`")]
    UnknownPolicy(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Policy under evaluation.
pub enum RolloutPolicy<'a> {
    Random,
    Teacher(TeacherKind),
    Actor {
        network: &'a Network,
        observe: &'a ObserveConfig,
        tag: String,
    },
}

impl RolloutPolicy<'_> {
    pub fn tag(&self) -> String {
        match self {
            RolloutPolicy::Random => "random".into(),
            RolloutPolicy::Teacher(kind) => format!("teacher:{}", kind.tag()),
            RolloutPolicy::Actor { tag, .. } => tag.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub ee: Vec2,
    pub action: Vec2,
    pub reward: RewardBreakdown,
    pub visibility: f64,
    pub objects: Vec<Vec2>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GraspPair {
    pub initial: f64,
    pub r#final: f64,
}

/// One evaluated episode. `steps[0]` is the initial snapshot (zero action
/// and reward); each later record captures the state after one action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub format_version: u32,
    pub config_hash: String,
    pub heap_id: u32,
    pub policy: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub graspability: GraspPair,
    pub termination: String,
}

impl EpisodeTrace {
    pub fn episode_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward.total).sum()
    }

    pub fn visibility_change(&self) -> f64 {
        let first = self.steps.first().map(|s| s.visibility).unwrap_or(0.0);
        let last = self.steps.last().map(|s| s.visibility).unwrap_or(0.0);
        last - first
    }

    pub fn action_count(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(std::fs::write(path, bytes)?)
    }

    pub fn load(path: &Path) -> Result<EpisodeTrace, EvalError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Graspability proxy: target visibility times the fraction of antipodal
/// finger placements that fit inside the workspace without touching any
/// non-target object. Axis k puts both fingers at
/// target_center +- (R + finger + clearance) * u(k*pi/16).
pub fn graspability(state: &WorldState) -> f64 {
    let target = state.target();
    let reach = target.radius + FINGER_RADIUS + FINGER_CLEARANCE;
    let inner = state.workspace.inset(FINGER_RADIUS);
    let mut feasible = 0usize;
    for k in 0..GRASP_AXES {
        let theta = k as f64 * std::f64::consts::PI / GRASP_AXES as f64;
        let offset = Vec2::unit(theta) * reach;
        let fingers = [target.center + offset, target.center - offset];
        let ok = fingers.iter().all(|f| {
            inner.contains(*f)
                && state
                    .objects
                    .iter()
                    .filter(|o| o.id != state.target_id)
                    .all(|o| f.dist(o.center) >= FINGER_RADIUS + o.radius)
        });
        if ok {
            feasible += 1;
        }
    }
    state.target_visibility() * feasible as f64 / GRASP_AXES as f64
}

/// Runs one episode (at most `params.max_steps` actions) and records the
/// full trace. The rng stream is derived from (seed, heap_id), so a rollout
/// is reproducible from its tag line alone.
pub fn rollout(
    policy: &RolloutPolicy,
    heap: &HeapSpec,
    params: &WorldParams,
    teacher_params: &TeacherParams,
    seed: u64,
    config_hash: &str,
) -> Result<EpisodeTrace, EvalError> {
    let mut rng = rng::stream_rng(seed, stream::ROLLOUT, heap.heap_id as u64, 0);
    let mut state = WorldState::reset(heap, params, &mut rng)?;
    let initial_grasp = graspability(&state);

    let mut teacher = match policy {
        RolloutPolicy::Teacher(kind) => Some(Teacher::new(*kind, teacher_params.clone())),
        _ => None,
    };

    let mut steps = vec![StepRecord {
        ee: state.ee,
        action: Vec2::ZERO,
        reward: RewardBreakdown::zero(),
        visibility: state.target_visibility(),
        objects: state.objects.iter().map(|o| o.center).collect(),
    }];

    let mut termination = "step_limit";
    loop {
        if state.step_count >= params.max_steps {
            break;
        }
        let action = match policy {
            RolloutPolicy::Random => Action::new(
                (rng.gen::<f64>() * 2.0 - 1.0) * crate::world::MAX_ACTION,
                (rng.gen::<f64>() * 2.0 - 1.0) * crate::world::MAX_ACTION,
            ),
            RolloutPolicy::Teacher(_) => {
                teacher.as_mut().expect("teacher").next_action(&state, &mut rng)
            }
            RolloutPolicy::Actor { network, observe, .. } => {
                actor_action(network, &state, observe)?
            }
        };
        let out = state.step(action, params)?;
        steps.push(StepRecord {
            ee: state.ee,
            action: action.delta(),
            reward: out.reward,
            visibility: state.target_visibility(),
            objects: state.objects.iter().map(|o| o.center).collect(),
        });
        if out.done {
            if state.target_visibility() >= params.done_visibility {
                termination = "target_visible";
            }
            break;
        }
    }

    Ok(EpisodeTrace {
        format_version: TRACE_FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        heap_id: heap.heap_id,
        policy: policy.tag(),
        seed,
        graspability: GraspPair {
            initial: initial_grasp,
            r#final: graspability(&state),
        },
        termination: termination.to_string(),
        steps,
    })
}

/// Deterministic noise-free actor action for one state.
pub fn actor_action(
    network: &Network,
    state: &WorldState,
    observe: &ObserveConfig,
) -> Result<Action, NnError> {
    let obs = render(state, observe);
    let heads = observation_tensors(&obs);
    let refs: Vec<&Tensor> = heads.iter().collect();
    let fwd = network.forward(&refs, None)?;
    let out = fwd.output().data();
    Ok(Action::new(out[0], out[1]))
}

/// Actor head tensors for a single observation: position image [1,3,G,G],
/// height image [1,1,G,G], pose [1,2].
pub fn observation_tensors(obs: &crate::observe::Observation) -> [Tensor; 3] {
    let g = obs.grid;
    [
        Tensor::from_vec(&[1, 3, g, g], obs.position.clone()),
        Tensor::from_vec(&[1, 1, g, g], obs.height.clone()),
        Tensor::from_vec(&[1, 2], obs.ee_pose.to_vec()),
    ]
}

/// Per-heap and aggregate means over a set of traces.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub per_heap: Vec<(u32, HeapMetrics)>,
    pub mean_reward: f64,
    pub mean_visibility_change: f64,
    pub mean_steps: f64,
    pub mean_graspability_change: f64,
    pub mean_heap_disturbance: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct HeapMetrics {
    pub reward: f64,
    pub visibility_change: f64,
    pub steps: f64,
    pub graspability_change: f64,
    pub heap_disturbance: f64,
}

/// Mean displacement of non-target objects from the first to the last
/// record of the trace.
fn heap_disturbance(trace: &EpisodeTrace, heap: &HeapSpec) -> f64 {
    let first = &trace.steps.first().expect("non-empty trace").objects;
    let last = &trace.steps.last().expect("non-empty trace").objects;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (id, (a, b)) in first.iter().zip(last).enumerate() {
        if id as u32 != heap.target_id {
            sum += a.dist(*b);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates traces into per-heap means, then averages the per-heap values.
/// Traces must carry heap ids present in `heaps`.
pub fn summarize(traces: &[EpisodeTrace], heaps: &[&HeapSpec]) -> EvalSummary {
    let by_id: BTreeMap<u32, &HeapSpec> = heaps.iter().map(|h| (h.heap_id, *h)).collect();
    let mut grouped: BTreeMap<u32, Vec<&EpisodeTrace>> = BTreeMap::new();
    for t in traces {
        grouped.entry(t.heap_id).or_default().push(t);
    }
    let mut per_heap = Vec::new();
    for (heap_id, group) in &grouped {
        let heap = by_id[heap_id];
        let n = group.len() as f64;
        let mut m = HeapMetrics::default();
        for t in group {
            m.reward += t.episode_reward() / n;
            m.visibility_change += t.visibility_change() / n;
            m.steps += t.action_count() as f64 / n;
            m.graspability_change += (t.graspability.r#final - t.graspability.initial) / n;
            m.heap_disturbance += heap_disturbance(t, heap) / n;
        }
        per_heap.push((*heap_id, m));
    }
    let n = per_heap.len().max(1) as f64;
    let mut summary = EvalSummary {
        episodes: traces.len(),
        mean_reward: 0.0,
        mean_visibility_change: 0.0,
        mean_steps: 0.0,
        mean_graspability_change: 0.0,
        mean_heap_disturbance: 0.0,
        per_heap,
    };
    for (_, m) in &summary.per_heap {
        summary.mean_reward += m.reward / n;
        summary.mean_visibility_change += m.visibility_change / n;
        summary.mean_steps += m.steps / n;
        summary.mean_graspability_change += m.graspability_change / n;
        summary.mean_heap_disturbance += m.heap_disturbance / n;
    }
    summary
}

impl EvalSummary {
    pub fn to_metrics_row(&self, step: u64, actor_fraction: f64, wall_seconds: f64) -> MetricsRow {
        MetricsRow {
            step,
            mean_reward: self.mean_reward,
            mean_visibility_change: self.mean_visibility_change,
            mean_steps: self.mean_steps,
            mean_graspability_change: self.mean_graspability_change,
            mean_heap_disturbance: self.mean_heap_disturbance,
            actor_fraction,
            wall_seconds,
        }
    }
}

/// Parses a policy tag: `random`, `teacher:<kind>`, or `actor:<checkpoint>`.
/// For actor tags the checkpoint is loaded and verified against the
/// expected architecture for `observe`.
pub fn load_policy(
    tag: &str,
    observe: &ObserveConfig,
) -> Result<LoadedPolicy, EvalError> {
    if tag == "random" {
        return Ok(LoadedPolicy::Random);
    }
    if let Some(kind) = tag.strip_prefix("teacher:") {
        let kind = TeacherKind::parse(kind).ok_or_else(|| EvalError::UnknownPolicy(tag.into()))?;
        return Ok(LoadedPolicy::Teacher(kind));
    }
    if let Some(path) = tag.strip_prefix("actor:") {
        let (nets, _) = nn::load_checkpoint(Path::new(path))?;
        let network = nn::take_named(nets, "actor", &nn::actor_spec(observe.grid))?;
        return Ok(LoadedPolicy::Actor {
            network: Box::new(network),
            tag: tag.to_string(),
        });
    }
    Err(EvalError::UnknownPolicy(tag.into()))
}

/// Owned version of `RolloutPolicy` produced by `load_policy`.
pub enum LoadedPolicy {
    Random,
    Teacher(TeacherKind),
    Actor { network: Box<Network>, tag: String },
}

impl LoadedPolicy {
    pub fn as_rollout<'a>(&'a self, observe: &'a ObserveConfig) -> RolloutPolicy<'a> {
        match self {
            LoadedPolicy::Random => RolloutPolicy::Random,
            LoadedPolicy::Teacher(kind) => RolloutPolicy::Teacher(*kind),
            LoadedPolicy::Actor { network, tag } => RolloutPolicy::Actor {
                network,
                observe,
                tag: tag.clone(),
            },
        }
    }
}
