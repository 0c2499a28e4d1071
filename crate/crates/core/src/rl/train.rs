//! The training loop: per-episode heap sampling, per-step behavior
//! selection and replay insertion, one critic update per ensemble member
//! plus one actor update and soft target updates per env step after warmup,
//! and periodic noise-free teacher-free evaluation on the held-out heaps.

use super::losses::{actor_loss, assemble_batch, critic_loss_with, target_actor_actions};
use super::{
    select_behavior_action, Ablations, ActionSource, CommitState, CriticEnsemble,
    CriticInputKind, ReplayBuffer, RlError, TrainConfig, Transition,
};
use crate::eval::{self, RolloutPolicy};
use crate::heapgen::{self, HeapDataset, HeapSpec};
use crate::metrics::{write_metrics, MetricsRow};
use crate::nn::{self, adam_step, soft_update, Network, NnError};
use crate::observe::{privileged, render, ObserveConfig};
use crate::rng::{self, stream};
use crate::teachers::{Teacher, TeacherKind, TeacherParams};
use crate::world::{WorldParams, WorldState};
use rand::Rng;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub config: TrainConfig,
    pub ablations: Ablations,
    pub world: WorldParams,
    pub observe: ObserveConfig,
    pub teacher_params: TeacherParams,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

struct Nets {
    actor: Network,
    actor_target: Network,
    ensemble: CriticEnsemble,
}

impl Nets {
    fn checkpoint_list(&self) -> Vec<(String, &Network)> {
        let mut list = vec![
            ("actor".to_string(), &self.actor),
            ("actor_target".to_string(), &self.actor_target),
        ];
        for (e, (m, t)) in self
            .ensemble
            .members
            .iter()
            .zip(&self.ensemble.targets)
            .enumerate()
        {
            list.push((format!("critic_{e}"), m));
            list.push((format!("critic_target_{e}"), t));
        }
        list
    }
}

fn save_nets(path: &std::path::Path, nets: &Nets, step: u64, setup: &TrainSetup) -> Result<(), RlError> {
    let list = nets.checkpoint_list();
    let refs: Vec<(&str, &Network)> = list.iter().map(|(n, net)| (n.as_str(), *net)).collect();
    nn::save_checkpoint(path, &refs, step, setup.config.seed, &setup.config_hash)?;
    Ok(())
}

fn run_eval(
    nets: &Nets,
    eval_heaps: &[&HeapSpec],
    observe_cfg: &ObserveConfig,
    setup: &TrainSetup,
) -> Result<eval::EvalSummary, RlError> {
    let policy = RolloutPolicy::Actor {
        network: &nets.actor,
        observe: observe_cfg,
        tag: "actor:train".into(),
    };
    let mut traces = Vec::with_capacity(eval_heaps.len());
    for heap in eval_heaps {
        traces.push(eval::rollout(
            &policy,
            heap,
            &setup.world,
            &setup.teacher_params,
            setup.config.seed,
            &setup.config_hash,
        )?);
    }
    Ok(eval::summarize(&traces, eval_heaps))
}

fn update_networks(
    nets: &mut Nets,
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    replay_rng: &mut impl Rng,
) -> Result<(), RlError> {
    let indices = buffer.sample_indices(cfg.batch, replay_rng)?;
    let transitions: Vec<&Transition> = indices.iter().map(|&i| buffer.get(i)).collect();
    let batch = assemble_batch(&transitions);
    let kind = nets.ensemble.kind;

    let next_actions = target_actor_actions(&nets.actor_target, &batch)?;
    let mut closs_sum = 0.0;
    for e in 0..nets.ensemble.size() {
        let (closs, grads) = critic_loss_with(
            &batch,
            &nets.ensemble.members[e],
            &nets.ensemble.targets[e],
            &next_actions,
            kind,
            cfg,
        )?;
        closs_sum += closs;
        adam_step(&mut nets.ensemble.members[e], &grads, cfg.lr_critic)?;
    }

    let (aloss, actor_grads) = actor_loss(&batch, &nets.ensemble.members, kind, &nets.actor)?;
    if std::env::var_os("VMMS_TRACE_LOSSES").is_some() {
        let ga: f64 = actor_grads.params.iter().map(|g| g.max_abs()).fold(0.0, f64::max);
        eprintln!(
            "update: critic_loss {:.4} actor_loss {:.4} max|dactor| {:.2e}",
            closs_sum / nets.ensemble.size() as f64,
            aloss,
            ga
        );
    }
    adam_step(&mut nets.actor, &actor_grads, cfg.lr_actor)?;

    soft_update(&mut nets.actor_target, &nets.actor, cfg.tau)?;
    for e in 0..nets.ensemble.size() {
        soft_update(&mut nets.ensemble.targets[e], &nets.ensemble.members[e], cfg.tau)?;
    }
    Ok(())
}

/// Runs the full training procedure, writing `metrics.csv`, a rolling
/// `latest.json` checkpoint at each evaluation point, and `final.json` at
/// the end of training. Non-finite losses abort with a `diverged.json`
/// checkpoint.
pub fn train(dataset: &HeapDataset, setup: &TrainSetup) -> Result<TrainOutcome, RlError> {
    let start = Instant::now();
    let cfg = &setup.config;
    let mut observe_cfg = setup.observe.clone();
    if setup.ablations.no_pose {
        observe_cfg.zero_position_channels = true;
    }

    let got = (dataset.workspace.w, dataset.workspace.h);
    let want = (setup.world.workspace_w, setup.world.workspace_h);
    if (got.0 - want.0).abs() > 1e-9 || (got.1 - want.1).abs() > 1e-9 {
        return Err(RlError::WorkspaceMismatch { got, want });
    }

    std::fs::create_dir_all(&setup.out_dir)?;
    let metrics_path = setup.out_dir.join("metrics.csv");
    let latest_path = setup.out_dir.join("latest.json");
    let final_path = setup.out_dir.join("final.json");

    let (train_ids, eval_ids) = heapgen::split(dataset);
    if train_ids.is_empty() {
        return Err(RlError::EmptySplit("train"));
    }
    if eval_ids.is_empty() {
        return Err(RlError::EmptySplit("eval"));
    }
    let train_heaps: Vec<&HeapSpec> = train_ids.iter().map(|&i| &dataset.heaps[i as usize]).collect();
    let eval_heaps: Vec<&HeapSpec> = eval_ids.iter().map(|&i| &dataset.heaps[i as usize]).collect();

    let kind = if setup.ablations.no_asymmetry {
        CriticInputKind::Observation
    } else {
        CriticInputKind::Privileged
    };
    let critic_arch = match kind {
        CriticInputKind::Privileged => nn::critic_spec(observe_cfg.max_objects),
        CriticInputKind::Observation => nn::image_critic_spec(observe_cfg.grid),
    };
    let mut actor_rng = rng::stream_rng(cfg.seed, stream::ACTOR_INIT, 0, 0);
    let actor = Network::init(nn::actor_spec(observe_cfg.grid), nn::ACTOR_INIT_OPTS, &mut actor_rng)?;
    let actor_target = actor.clone();
    let value_prior = super::idle_value_prior(cfg.gamma, setup.world.max_steps);
    let ensemble = CriticEnsemble::init(critic_arch, cfg.ensemble, kind, cfg.seed, Some(value_prior))?;
    let mut nets = Nets {
        actor,
        actor_target,
        ensemble,
    };

    let mut teachers: Vec<Teacher> = if setup.ablations.no_teachers {
        Vec::new()
    } else {
        TeacherKind::ALL
            .iter()
            .map(|k| Teacher::new(*k, setup.teacher_params.clone()))
            .collect()
    };

    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut behavior_rng = rng::stream_rng(cfg.seed, stream::BEHAVIOR, 0, 0);
    let mut episode_rng = rng::stream_rng(cfg.seed, stream::EPISODE, 0, 0);
    let mut replay_rng = rng::stream_rng(cfg.seed, stream::REPLAY, 0, 0);

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut window_actor = 0u64;
    let mut window_total = 0u64;

    let initial = run_eval(&nets, &eval_heaps, &observe_cfg, setup)?;
    rows.push(initial.to_metrics_row(0, 0.0, start.elapsed().as_secs_f64()));
    write_metrics(&metrics_path, &rows, &setup.config_hash)?;
    save_nets(&latest_path, &nets, 0, setup)?;

    let mut global_step: u64 = 0;
    let mut episode_index: u64 = 0;
    while global_step < cfg.max_env_steps {
        let heap = train_heaps[episode_rng.gen_range(0..train_heaps.len())];
        let mut reset_rng = rng::stream_rng(cfg.seed, stream::RESET, episode_index, 0);
        let mut state = WorldState::reset(heap, &setup.world, &mut reset_rng)?;
        episode_index += 1;
        for t in &mut teachers {
            t.reset();
        }
        let mut commit = CommitState::new_episode();
        let mut obs = Arc::new(render(&state, &observe_cfg));
        let mut priv_state = Arc::new(privileged(&state, &observe_cfg)?);

        loop {
            let (action, source) = select_behavior_action(
                &obs,
                &priv_state,
                &state,
                &nets.actor,
                &nets.ensemble,
                &mut teachers,
                cfg,
                &mut commit,
                &mut behavior_rng,
            )?;
            let out = state.step(action, &setup.world)?;
            let next_obs = Arc::new(render(&state, &observe_cfg));
            let next_priv = Arc::new(privileged(&state, &observe_cfg)?);
            buffer.push(Transition {
                obs: Arc::clone(&obs),
                priv_state: Arc::clone(&priv_state),
                action: [action.delta().x, action.delta().y],
                reward: out.reward.total,
                next_obs: Arc::clone(&next_obs),
                next_priv: Arc::clone(&next_priv),
                done: out.done,
            });
            obs = next_obs;
            priv_state = next_priv;
            global_step += 1;
            window_total += 1;
            if source == ActionSource::Actor {
                window_actor += 1;
            }

            if global_step > cfg.warmup_steps {
                if let Err(err) = update_networks(&mut nets, &buffer, cfg, &mut replay_rng) {
                    if matches!(err, RlError::Nn(NnError::Divergence)) {
                        save_nets(&setup.out_dir.join("diverged.json"), &nets, global_step, setup)?;
                        write_metrics(&metrics_path, &rows, &setup.config_hash)?;
                        return Err(RlError::Divergence { step: global_step });
                    }
                    return Err(err);
                }
            }

            if cfg.eval_every > 0 && global_step.is_multiple_of(cfg.eval_every) {
                let summary = run_eval(&nets, &eval_heaps, &observe_cfg, setup)?;
                let fraction = if window_total > 0 {
                    window_actor as f64 / window_total as f64
                } else {
                    0.0
                };
                rows.push(summary.to_metrics_row(
                    global_step,
                    fraction,
                    start.elapsed().as_secs_f64(),
                ));
                write_metrics(&metrics_path, &rows, &setup.config_hash)?;
                save_nets(&latest_path, &nets, global_step, setup)?;
                window_actor = 0;
                window_total = 0;
            }

            if global_step >= cfg.max_env_steps || out.done {
                break;
            }
        }
    }

    // Final evaluation when training stopped between evaluation points.
    if rows.last().map(|r| r.step) != Some(global_step) {
        let summary = run_eval(&nets, &eval_heaps, &observe_cfg, setup)?;
        let fraction = if window_total > 0 {
            window_actor as f64 / window_total as f64
        } else {
            0.0
        };
        rows.push(summary.to_metrics_row(global_step, fraction, start.elapsed().as_secs_f64()));
        write_metrics(&metrics_path, &rows, &setup.config_hash)?;
    }
    save_nets(&final_path, &nets, global_step, setup)?;

    Ok(TrainOutcome {
        rows,
        metrics_path,
        final_checkpoint: final_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heapgen::{generate_dataset, GeneratorConfig, HeapCondition, WorkspaceSize};
    use crate::metrics::read_metrics;

    fn tiny_dataset(seed: u64) -> HeapDataset {
        let cfg = GeneratorConfig::new(HeapCondition::Single, 4, seed);
        let (ds, _) = generate_dataset(WorkspaceSize { w: 0.6, h: 0.6 }, &cfg).unwrap();
        ds
    }

    fn tiny_setup(dir: &std::path::Path, seed: u64, max_steps: u64) -> TrainSetup {
        TrainSetup {
            config: TrainConfig {
                max_env_steps: max_steps,
                warmup_steps: 10,
                batch: 8,
                eval_every: 20,
                ensemble: 2,
                seed,
                ..TrainConfig::default()
            },
            ablations: Ablations::default(),
            world: WorldParams::default(),
            observe: ObserveConfig {
                grid: 16,
                ..ObserveConfig::default()
            },
            teacher_params: TeacherParams::default(),
            out_dir: dir.to_path_buf(),
            config_hash: "test".into(),
        }
    }

    #[test]
    fn zero_steps_writes_only_initial_row() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(5);
        let setup = tiny_setup(dir.path(), 1, 0);
        let outcome = train(&ds, &setup).unwrap();
        assert_eq!(outcome.rows.len(), 1);
        assert_eq!(outcome.rows[0].step, 0);
        let rows = read_metrics(&outcome.metrics_path).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(outcome.final_checkpoint.exists());
    }

    #[test]
    fn short_run_is_deterministic_modulo_wall_time() {
        let ds = tiny_dataset(6);
        let run = |dir: &std::path::Path| {
            let setup = tiny_setup(dir, 3, 40);
            train(&ds, &setup).unwrap()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run(dir_a.path());
        let b = run(dir_b.path());
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.step, rb.step);
            assert_eq!(ra.mean_reward, rb.mean_reward);
            assert_eq!(ra.mean_visibility_change, rb.mean_visibility_change);
            assert_eq!(ra.mean_steps, rb.mean_steps);
            assert_eq!(ra.mean_graspability_change, rb.mean_graspability_change);
            assert_eq!(ra.mean_heap_disturbance, rb.mean_heap_disturbance);
            assert_eq!(ra.actor_fraction, rb.actor_fraction);
        }
        // Final networks are bitwise identical.
        let (nets_a, _) = nn::load_checkpoint(&a.final_checkpoint).unwrap();
        let (nets_b, _) = nn::load_checkpoint(&b.final_checkpoint).unwrap();
        assert_eq!(nets_a.len(), nets_b.len());
        for ((na, neta), (nb, netb)) in nets_a.iter().zip(&nets_b) {
            assert_eq!(na, nb);
            assert_eq!(neta, netb, "network {na} differs");
        }
    }

    #[test]
    fn eval_rows_appear_on_schedule_and_fractions_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(7);
        let setup = tiny_setup(dir.path(), 2, 40);
        let outcome = train(&ds, &setup).unwrap();
        let steps: Vec<u64> = outcome.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 20, 40]);
        for r in &outcome.rows {
            assert!((0.0..=1.0).contains(&r.actor_fraction));
            assert!(r.mean_steps <= 50.0);
        }
    }

    #[test]
    fn ablation_flags_select_image_critic_and_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(8);
        let mut setup = tiny_setup(dir.path(), 4, 25);
        setup.ablations = Ablations {
            no_teachers: true,
            no_asymmetry: true,
            no_pose: true,
        };
        setup.config.ensemble = 1;
        let outcome = train(&ds, &setup).unwrap();
        assert!(outcome.rows.len() >= 2);
        // The checkpoint's critic descriptor is the image critic.
        let (nets, _) = nn::load_checkpoint(&outcome.final_checkpoint).unwrap();
        let critic = nets.iter().find(|(n, _)| n == "critic_0").unwrap();
        assert_eq!(critic.1.spec(), &nn::image_critic_spec(16));
    }
}
