//! Minibatch assembly and the DDPG losses.
//!
//! The critic minimizes the squared Bellman residual
//! (r + gamma * Q'(s', pi'(s')) - Q(s, a))^2 with per-member target
//! networks; the actor minimizes -Q(s, pi(s)) averaged over the ensemble,
//! with gradients flowing through the critics' action input only.

use super::{CriticInputKind, RlError, TrainConfig, Transition};
use crate::nn::{Gradients, Network, Tensor};

/// Stacked minibatch tensors. Images are kept flat; `actor_heads` reshapes
/// to the conv layout on demand.
pub struct Batch {
    pub size: usize,
    pub grid: usize,
    pub pos_img: Tensor,
    pub height_img: Tensor,
    pub pose: Tensor,
    pub next_pos_img: Tensor,
    pub next_height_img: Tensor,
    pub next_pose: Tensor,
    pub priv_target: Tensor,
    pub priv_others: Tensor,
    pub priv_pose: Tensor,
    pub next_priv_target: Tensor,
    pub next_priv_others: Tensor,
    pub next_priv_pose: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

pub fn assemble_batch(transitions: &[&Transition]) -> Batch {
    let size = transitions.len();
    assert!(size > 0, "empty batch");
    let grid = transitions[0].obs.grid;
    let cells = grid * grid;
    let m = transitions[0].priv_state.others_rel.len();

    let mut pos_img = Vec::with_capacity(size * 3 * cells);
    let mut height_img = Vec::with_capacity(size * cells);
    let mut pose = Vec::with_capacity(size * 2);
    let mut next_pos_img = Vec::with_capacity(size * 3 * cells);
    let mut next_height_img = Vec::with_capacity(size * cells);
    let mut next_pose = Vec::with_capacity(size * 2);
    let mut priv_target = Vec::with_capacity(size * 2);
    let mut priv_others = Vec::with_capacity(size * m);
    let mut priv_pose = Vec::with_capacity(size * 2);
    let mut next_priv_target = Vec::with_capacity(size * 2);
    let mut next_priv_others = Vec::with_capacity(size * m);
    let mut next_priv_pose = Vec::with_capacity(size * 2);
    let mut actions = Vec::with_capacity(size * 2);
    let mut rewards = Vec::with_capacity(size);
    let mut dones = Vec::with_capacity(size);

    for t in transitions {
        pos_img.extend_from_slice(&t.obs.position);
        height_img.extend_from_slice(&t.obs.height);
        pose.extend_from_slice(&t.obs.ee_pose);
        next_pos_img.extend_from_slice(&t.next_obs.position);
        next_height_img.extend_from_slice(&t.next_obs.height);
        next_pose.extend_from_slice(&t.next_obs.ee_pose);
        priv_target.extend_from_slice(&t.priv_state.target_rel);
        priv_others.extend_from_slice(&t.priv_state.others_rel);
        priv_pose.extend_from_slice(&t.priv_state.ee_pose);
        next_priv_target.extend_from_slice(&t.next_priv.target_rel);
        next_priv_others.extend_from_slice(&t.next_priv.others_rel);
        next_priv_pose.extend_from_slice(&t.next_priv.ee_pose);
        actions.extend_from_slice(&t.action);
        rewards.push(t.reward);
        dones.push(t.done);
    }

    Batch {
        size,
        grid,
        pos_img: Tensor::from_vec(&[size, 3 * cells], pos_img),
        height_img: Tensor::from_vec(&[size, cells], height_img),
        pose: Tensor::from_vec(&[size, 2], pose),
        next_pos_img: Tensor::from_vec(&[size, 3 * cells], next_pos_img),
        next_height_img: Tensor::from_vec(&[size, cells], next_height_img),
        next_pose: Tensor::from_vec(&[size, 2], next_pose),
        priv_target: Tensor::from_vec(&[size, 2], priv_target),
        priv_others: Tensor::from_vec(&[size, m], priv_others),
        priv_pose: Tensor::from_vec(&[size, 2], priv_pose),
        next_priv_target: Tensor::from_vec(&[size, 2], next_priv_target),
        next_priv_others: Tensor::from_vec(&[size, m], next_priv_others),
        next_priv_pose: Tensor::from_vec(&[size, 2], next_priv_pose),
        actions: Tensor::from_vec(&[size, 2], actions),
        rewards,
        dones,
    }
}

impl Batch {
    /// Actor head tensors ([B,3,G,G], [B,1,G,G], [B,2]).
    pub fn actor_heads(&self, next: bool) -> [Tensor; 3] {
        let (p, h, e) = if next {
            (&self.next_pos_img, &self.next_height_img, &self.next_pose)
        } else {
            (&self.pos_img, &self.height_img, &self.pose)
        };
        let g = self.grid;
        [
            Tensor::from_vec(&[self.size, 3, g, g], p.data().to_vec()),
            Tensor::from_vec(&[self.size, 1, g, g], h.data().to_vec()),
            e.clone(),
        ]
    }

    /// Critic head tensors for the given input kind.
    pub fn critic_heads(&self, kind: CriticInputKind, next: bool) -> [Tensor; 3] {
        match (kind, next) {
            (CriticInputKind::Privileged, false) => [
                self.priv_target.clone(),
                self.priv_others.clone(),
                self.priv_pose.clone(),
            ],
            (CriticInputKind::Privileged, true) => [
                self.next_priv_target.clone(),
                self.next_priv_others.clone(),
                self.next_priv_pose.clone(),
            ],
            (CriticInputKind::Observation, false) => [
                self.pos_img.clone(),
                self.height_img.clone(),
                self.pose.clone(),
            ],
            (CriticInputKind::Observation, true) => [
                self.next_pos_img.clone(),
                self.next_height_img.clone(),
                self.next_pose.clone(),
            ],
        }
    }
}

/// Target-actor actions for the batch's next observations.
pub fn target_actor_actions(actor_target: &Network, batch: &Batch) -> Result<Tensor, RlError> {
    let heads = batch.actor_heads(true);
    let refs: Vec<&Tensor> = heads.iter().collect();
    Ok(actor_target.forward(&refs, None)?.output().clone())
}

/// Bellman residual loss and gradients for one ensemble member, recomputing
/// the target-actor actions internally.
pub fn critic_loss(
    batch: &Batch,
    member: &Network,
    member_target: &Network,
    actor_target: &Network,
    kind: CriticInputKind,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients), RlError> {
    let next_actions = target_actor_actions(actor_target, batch)?;
    critic_loss_with(batch, member, member_target, &next_actions, kind, cfg)
}

/// Bellman residual loss with precomputed target-actor actions (shared
/// across ensemble members).
pub fn critic_loss_with(
    batch: &Batch,
    member: &Network,
    member_target: &Network,
    next_actions: &Tensor,
    kind: CriticInputKind,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients), RlError> {
    let b = batch.size;
    let next_heads = batch.critic_heads(kind, true);
    let next_refs: Vec<&Tensor> = next_heads.iter().collect();
    let q_next = member_target.forward(&next_refs, Some(next_actions))?;

    let heads = batch.critic_heads(kind, false);
    let refs: Vec<&Tensor> = heads.iter().collect();
    let fwd = member.forward(&refs, Some(&batch.actions))?;

    let mut loss = 0.0;
    let mut upstream = Tensor::zeros(&[b, 1]);
    for i in 0..b {
        let bootstrap = if batch.dones[i] { 0.0 } else { cfg.gamma * q_next.output().data()[i] };
        let y = batch.rewards[i] + bootstrap;
        let resid = fwd.output().data()[i] - y;
        loss += resid * resid / b as f64;
        upstream.data_mut()[i] = 2.0 * resid / b as f64;
    }
    if !loss.is_finite() {
        return Err(RlError::Nn(crate::nn::NnError::Divergence));
    }
    let grads = member.backward(&fwd, &upstream, false)?;
    Ok((loss, grads))
}

/// Deterministic policy-gradient loss: -mean over the batch of the
/// ensemble-mean Q at the actor's current actions. Returns the actor
/// gradients; critic parameters are left untouched.
pub fn actor_loss(
    batch: &Batch,
    ensemble: &[Network],
    kind: CriticInputKind,
    actor: &Network,
) -> Result<(f64, Gradients), RlError> {
    let b = batch.size;
    let e = ensemble.len();
    let heads = batch.actor_heads(false);
    let refs: Vec<&Tensor> = heads.iter().collect();
    let afwd = actor.forward(&refs, None)?;
    let actions = afwd.output().clone();

    let critic_heads = batch.critic_heads(kind, false);
    let critic_refs: Vec<&Tensor> = critic_heads.iter().collect();
    let mut upstream = Tensor::zeros(&[b, 1]);
    for v in upstream.data_mut() {
        *v = -1.0 / (b as f64 * e as f64);
    }

    let mut loss = 0.0;
    let mut g_action = Tensor::zeros(&[b, 2]);
    for member in ensemble {
        let cfwd = member.forward(&critic_refs, Some(&actions))?;
        for q in cfwd.output().data() {
            loss -= q / (b as f64 * e as f64);
        }
        let g = member.backward(&cfwd, &upstream, true)?;
        let extra = g.extra_input.expect("critic action gradient");
        for (acc, v) in g_action.data_mut().iter_mut().zip(extra.data()) {
            *acc += v;
        }
    }
    if !loss.is_finite() {
        return Err(RlError::Nn(crate::nn::NnError::Divergence));
    }
    let grads = actor.backward(&afwd, &g_action, false)?;
    Ok((loss, grads))
}
