//! Teacher-guided asymmetric actor-critic training: replay buffer, critic
//! ensemble with Thompson-draw behavior selection, DDPG losses, and the
//! training loop.

pub mod losses;
pub mod train;

pub use losses::{actor_loss, assemble_batch, critic_loss, critic_loss_with, Batch};
pub use train::{train, TrainOutcome, TrainSetup};

use crate::nn::{InitOptions, Network, NetworkSpec, NnError, Tensor};
use crate::observe::{Observation, ObserveError, PrivilegedState};
use crate::rng::{self, stream};
use crate::teachers::Teacher;
use crate::world::{Action, WorldError, WorldState};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("observe: {0}")]
    Observe(#[from] ObserveError),
    #[error("network: {0}")]
    Nn(#[from] NnError),
    #[error("evaluation: {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("metrics: {0}")]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("divergence detected at env step {step}")]
    Divergence { step: u64 },
    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,
    #[error("dataset has no {0} heaps")]
    EmptySplit(&'static str),
    #[error("dataset workspace {got:?} does not match world params {want:?}")]
    WorkspaceMismatch { got: (f64, f64), want: (f64, f64) },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch: usize,
    pub warmup_steps: u64,
    /// Gaussian exploration noise on the actor candidate, meters.
    pub noise_sigma: f64,
    /// Steps a Thompson draw is held before redrawing.
    pub commit_window: u64,
    pub max_env_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub replay_capacity: usize,
    /// Critic ensemble size.
    pub ensemble: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            batch: 64,
            warmup_steps: 500,
            noise_sigma: 0.005,
            commit_window: 4,
            max_env_steps: 8000,
            eval_every: 500,
            seed: 0,
            replay_capacity: 50_000,
            ensemble: 5,
        }
    }
}

/// Ablation toggles.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Drop teacher candidates from behavior selection.
    pub no_teachers: bool,
    /// Critic consumes the actor's observation instead of privileged state.
    pub no_asymmetry: bool,
    /// Zero the position-offset channels of the observation.
    pub no_pose: bool,
}

/// One stored interaction. Observations are shared between consecutive
/// transitions, so the buffer costs one observation per step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Arc<Observation>,
    pub priv_state: Arc<PrivilegedState>,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_obs: Arc<Observation>,
    pub next_priv: Arc<PrivilegedState>,
    pub done: bool,
}

/// Fixed-capacity FIFO ring.
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            data: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            cursor: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.data[idx]
    }

    /// Uniform sample with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>, RlError> {
        if self.data.is_empty() {
            return Err(RlError::EmptyBuffer);
        }
        Ok((0..batch).map(|_| rng.gen_range(0..self.data.len())).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }
}

/// What the critic consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticInputKind {
    Privileged,
    Observation,
}

/// E critics plus E target critics sharing one architecture, independently
/// initialized.
pub struct CriticEnsemble {
    pub members: Vec<Network>,
    pub targets: Vec<Network>,
    pub kind: CriticInputKind,
}

impl CriticEnsemble {
    pub fn init(
        spec: NetworkSpec,
        size: usize,
        kind: CriticInputKind,
        master_seed: u64,
        value_prior: Option<f64>,
    ) -> Result<CriticEnsemble, NnError> {
        let mut members = Vec::with_capacity(size);
        let opts = InitOptions {
            output_bias: value_prior,
            ..InitOptions::default()
        };
        for e in 0..size {
            let mut rng = rng::stream_rng(master_seed, stream::CRITIC_INIT, e as u64, 0);
            members.push(Network::init(spec.clone(), opts, &mut rng)?);
        }
        let targets = members.clone();
        Ok(CriticEnsemble {
            members,
            targets,
            kind,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Discounted idle-policy return (the unconditional -0.5 idleness penalty
/// only), averaged over a uniform time-in-episode. Value heads start here
/// instead of zero, which removes the long transient where every Q estimate
/// drifts toward the return scale at the optimizer's step size.
pub fn idle_value_prior(gamma: f64, max_steps: u32) -> f64 {
    let mut total = 0.0;
    for t in 0..max_steps {
        let remaining = (max_steps - t) as i32;
        total += -0.5 * (1.0 - gamma.powi(remaining)) / (1.0 - gamma);
    }
    total / max_steps.max(1) as f64
}

/// Thompson-draw commitment: the sampled member is held for
/// `commit_window` consecutive steps within an episode.
#[derive(Debug, Clone, Copy)]
pub struct CommitState {
    pub member: usize,
    pub steps_in_episode: u64,
}

impl CommitState {
    pub fn new_episode() -> Self {
        CommitState {
            member: 0,
            steps_in_episode: 0,
        }
    }
}

/// Which candidate the behavior policy executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSource {
    Actor,
    Teacher(usize),
}

/// Greedy candidate choice; ties keep the earlier index, so the actor
/// (index 0) wins ties, then the lowest teacher index.
pub fn pick_best(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Builds the critic head tensors for `n` copies of one state.
fn critic_heads_single(
    kind: CriticInputKind,
    obs: &Observation,
    priv_state: &PrivilegedState,
    n: usize,
) -> [Tensor; 3] {
    match kind {
        CriticInputKind::Privileged => {
            let m = priv_state.others_rel.len();
            let mut target = Vec::with_capacity(n * 2);
            let mut others = Vec::with_capacity(n * m);
            let mut pose = Vec::with_capacity(n * 2);
            for _ in 0..n {
                target.extend_from_slice(&priv_state.target_rel);
                others.extend_from_slice(&priv_state.others_rel);
                pose.extend_from_slice(&priv_state.ee_pose);
            }
            [
                Tensor::from_vec(&[n, 2], target),
                Tensor::from_vec(&[n, m], others),
                Tensor::from_vec(&[n, 2], pose),
            ]
        }
        CriticInputKind::Observation => {
            let cells = obs.grid * obs.grid;
            let mut pos = Vec::with_capacity(n * 3 * cells);
            let mut height = Vec::with_capacity(n * cells);
            let mut pose = Vec::with_capacity(n * 2);
            for _ in 0..n {
                pos.extend_from_slice(&obs.position);
                height.extend_from_slice(&obs.height);
                pose.extend_from_slice(&obs.ee_pose);
            }
            [
                Tensor::from_vec(&[n, 3 * cells], pos),
                Tensor::from_vec(&[n, cells], height),
                Tensor::from_vec(&[n, 2], pose),
            ]
        }
    }
}

/// Behavior policy: the actor's noisy action competes against each
/// teacher's suggestion under a Thompson-sampled ensemble member; the
/// highest-scoring candidate is executed.
#[allow(clippy::too_many_arguments)]
pub fn select_behavior_action(
    obs: &Observation,
    priv_state: &PrivilegedState,
    state: &WorldState,
    actor: &Network,
    ensemble: &CriticEnsemble,
    teachers: &mut [Teacher],
    cfg: &TrainConfig,
    commit: &mut CommitState,
    rng: &mut impl Rng,
) -> Result<(Action, ActionSource), RlError> {
    // Redraw the committed member on the window boundary.
    if !teachers.is_empty() && commit.steps_in_episode.is_multiple_of(cfg.commit_window) {
        commit.member = rng.gen_range(0..ensemble.size());
    }
    commit.steps_in_episode += 1;

    // Actor candidate with exploration noise.
    let heads = crate::eval::observation_tensors(obs);
    let refs: Vec<&Tensor> = heads.iter().collect();
    let fwd = actor.forward(&refs, None)?;
    let out = fwd.output().data();
    let (n1, n2) = rng::gauss2(rng);
    let actor_action = Action::new(
        out[0] + cfg.noise_sigma * n1,
        out[1] + cfg.noise_sigma * n2,
    );

    if teachers.is_empty() {
        return Ok((actor_action, ActionSource::Actor));
    }

    let mut candidates = vec![actor_action];
    for t in teachers.iter_mut() {
        candidates.push(t.next_action(state, rng));
    }

    let n = candidates.len();
    let critic_heads = critic_heads_single(ensemble.kind, obs, priv_state, n);
    let head_refs: Vec<&Tensor> = critic_heads.iter().collect();
    let mut actions = Tensor::zeros(&[n, 2]);
    for (i, a) in candidates.iter().enumerate() {
        actions.data_mut()[2 * i] = a.delta().x;
        actions.data_mut()[2 * i + 1] = a.delta().y;
    }
    let q = ensemble.members[commit.member].forward(&head_refs, Some(&actions))?;
    let best = pick_best(q.output().data());
    let source = if best == 0 {
        ActionSource::Actor
    } else {
        ActionSource::Teacher(best - 1)
    };
    Ok((candidates[best], source))
}
