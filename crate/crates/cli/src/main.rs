//! Command-line entry point: heap generation, training, evaluation,
//! rollouts, and cross-seed reporting.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical
//! divergence.

mod config;
mod report;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use std::path::PathBuf;
use std::time::Instant;
use vmms_core::eval::{self, EvalError, LoadedPolicy};
use vmms_core::heapgen::{self, HeapCondition, HeapDataset, HeapSpec};
use vmms_core::metrics::{write_metrics, MetricsRow};
use vmms_core::rl::{self, RlError, TrainSetup};

#[derive(Parser)]
#[command(name = "vmms", version, about = "2D mechanical-search workbench")]
struct Cli {
    /// TOML run configuration; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Dual,
}

impl From<ModeArg> for HeapCondition {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => HeapCondition::Single,
            ModeArg::Dual => HeapCondition::Dual,
        }
    }
}

// Flag values follow the documented ablation names (no-teachers, ...).
#[allow(clippy::enum_variant_names)]
#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    NoTeachers,
    NoAsymmetry,
    NoPose,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a heap dataset file.
    GenHeaps {
        #[arg(long, value_enum, default_value = "single")]
        mode: ModeArg,
        /// Number of heaps (default 300 single / 120 dual).
        #[arg(long)]
        count: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Object counts cycled across single-condition heaps, e.g. "5" or
        /// "5,10,15" (each must be 5, 10 or 15).
        #[arg(long, value_delimiter = ',')]
        objects: Vec<u32>,
        /// Worker threads for generation (deterministic at any value).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train an agent on a heap dataset.
    Train {
        #[arg(long)]
        heaps: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run this many sequential seeds into seed<k>/ subdirectories.
        #[arg(long)]
        seeds: Option<u32>,
        #[arg(long)]
        max_env_steps: Option<u64>,
        #[arg(long)]
        eval_every: Option<u64>,
        /// Critic ensemble size override.
        #[arg(long)]
        ensemble: Option<usize>,
        /// Ablation toggles (repeatable).
        #[arg(long, value_enum)]
        ablation: Vec<AblationArg>,
    },
    /// Evaluate a policy over heap episodes and write a summary CSV.
    Eval {
        /// Policy tag: random, teacher:straight|zigzag|spiral, actor:<ckpt>.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        heaps: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        episodes: u32,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Which half of the dataset to roll out on.
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Worker threads for rollouts (deterministic at any value).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run one episode and write its full trace as JSON.
    Rollout {
        #[arg(long)]
        policy: String,
        #[arg(long)]
        heaps: Option<PathBuf>,
        #[arg(long)]
        heap_id: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Merge per-seed metrics CSVs into a mean +- sd table.
    Report {
        /// Run directory containing seed*/metrics.csv (or one metrics.csv).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        let code = if err.chain().any(|c| c.downcast_ref::<UsageError>().is_some()) {
            2
        } else if err.chain().any(|c| {
            matches!(c.downcast_ref::<RlError>(), Some(RlError::Divergence { .. }))
        }) {
            4
        } else {
            3
        };
        std::process::exit(code);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Seed precedence: --seed flag, then VMMS_SEED, then the config file.
fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> u64 {
    flag.or_else(|| {
            std::env::var("VMMS_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(cfg.train.seed)
}

fn load_dataset(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<(HeapDataset, PathBuf)> {
    let path = flag
        .clone()
        .or_else(|| cfg.paths.heaps.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage("no heap dataset: pass --heaps or set [paths] heaps"))?;
    let ds = HeapDataset::load(&path)
        .with_context(|| format!("loading heap dataset {}", path.display()))?;
    Ok((ds, path))
}

fn check_workspace(ds: &HeapDataset, cfg: &RunConfig) -> Result<()> {
    if (ds.workspace.w - cfg.world.workspace_w).abs() > 1e-9
        || (ds.workspace.h - cfg.world.workspace_h).abs() > 1e-9
    {
        bail!(
            "dataset workspace {}x{} does not match configured world {}x{}",
            ds.workspace.w,
            ds.workspace.h,
            cfg.world.workspace_w,
            cfg.world.workspace_h
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::GenHeaps { mode, count, seed, out, objects, jobs } => {
            cmd_gen_heaps(cfg, mode, count, seed, out, objects, jobs)
        }
        Cmd::Train { heaps, out, seed, seeds, max_env_steps, eval_every, ensemble, ablation } => {
            cmd_train(cfg, heaps, out, seed, seeds, max_env_steps, eval_every, ensemble, ablation)
        }
        Cmd::Eval { policy, heaps, episodes, csv, seed, split, jobs } => {
            cmd_eval(cfg, policy, heaps, episodes, csv, seed, split, jobs)
        }
        Cmd::Rollout { policy, heaps, heap_id, seed, trace } => {
            cmd_rollout(cfg, policy, heaps, heap_id, seed, trace)
        }
        Cmd::Report { run, csv } => report::cmd_report(&run, csv.as_deref()),
    }
}

fn cmd_gen_heaps(
    cfg: RunConfig,
    mode: ModeArg,
    count: Option<u32>,
    seed: Option<u64>,
    out: PathBuf,
    objects: Vec<u32>,
    jobs: usize,
) -> Result<()> {
    let mode: HeapCondition = mode.into();
    let count = count.unwrap_or(match mode {
        HeapCondition::Single => 300,
        HeapCondition::Dual => 120,
    });
    if count < 2 {
        return Err(usage("--count must be at least 2 (the train/eval split needs both halves)"));
    }
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    if !objects.iter().all(|n| [5, 10, 15].contains(n)) {
        return Err(usage("--objects entries must be 5, 10 or 15"));
    }
    let mut gen_cfg = cfg.heapgen.clone();
    gen_cfg.mode = mode;
    gen_cfg.count = count;
    if !objects.is_empty() {
        gen_cfg.single_counts = objects;
    }
    gen_cfg.seed = seed
        .or_else(|| std::env::var("VMMS_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(cfg.heapgen.seed);
    let workspace = heapgen::WorkspaceSize {
        w: cfg.world.workspace_w,
        h: cfg.world.workspace_h,
    };
    let t0 = Instant::now();
    let (ds, stats) = heapgen::generate_dataset_jobs(workspace, &gen_cfg, jobs)?;
    ds.save(&out)?;
    println!(
        "wrote {} {} heaps to {} (acceptance rate {:.3}: {} accepted / {} attempts, {:.2}s)",
        ds.heaps.len(),
        gen_cfg.mode,
        out.display(),
        stats.rate(),
        stats.accepted,
        stats.attempts,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    mut cfg: RunConfig,
    heaps: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    seeds: Option<u32>,
    max_env_steps: Option<u64>,
    eval_every: Option<u64>,
    ensemble: Option<usize>,
    ablation: Vec<AblationArg>,
) -> Result<()> {
    if let Some(steps) = max_env_steps {
        cfg.train.max_env_steps = steps;
    }
    if let Some(every) = eval_every {
        cfg.train.eval_every = every;
    }
    if let Some(e) = ensemble {
        if e == 0 {
            return Err(usage("--ensemble must be at least 1"));
        }
        cfg.train.ensemble = e;
    }
    for a in ablation {
        match a {
            AblationArg::NoTeachers => cfg.ablations.no_teachers = true,
            AblationArg::NoAsymmetry => cfg.ablations.no_asymmetry = true,
            AblationArg::NoPose => cfg.ablations.no_pose = true,
        }
    }
    let (ds, heaps_path) = load_dataset(&heaps, &cfg)?;
    check_workspace(&ds, &cfg)?;
    let out = out
        .or_else(|| cfg.paths.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage("no run directory: pass --out or set [paths] out"))?;
    let seed_count = seeds.unwrap_or(1);
    if seed_count == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let base_seed = resolve_seed(seed, &cfg);

    for k in 0..seed_count {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = base_seed + k as u64;
        run_cfg.paths.heaps = Some(heaps_path.display().to_string());
        let dir = if seed_count == 1 {
            out.clone()
        } else {
            out.join(format!("seed{k}"))
        };
        run_cfg.paths.out = Some(dir.display().to_string());
        let hash = run_cfg.emit(&dir)?;
        let setup = TrainSetup {
            config: run_cfg.train.clone(),
            ablations: run_cfg.ablations,
            world: run_cfg.world.clone(),
            observe: run_cfg.observe.clone(),
            teacher_params: run_cfg.teachers.clone(),
            out_dir: dir.clone(),
            config_hash: hash,
        };
        let outcome = rl::train(&ds, &setup)?;
        let last = outcome.rows.last().expect("at least the initial row");
        println!(
            "seed {}: {} env steps, eval visibility change {:.4}, reward {:.3}, {:.1}s -> {}",
            run_cfg.train.seed,
            last.step,
            last.mean_visibility_change,
            last.mean_reward,
            last.wall_seconds,
            dir.display()
        );
    }
    Ok(())
}

fn select_ids(ds: &HeapDataset, split: SplitArg) -> Vec<u32> {
    let (train, eval) = heapgen::split(ds);
    match split {
        SplitArg::Train => train,
        SplitArg::Eval => eval,
        SplitArg::All => (0..ds.heaps.len() as u32).collect(),
    }
}

fn map_policy_err(err: EvalError) -> anyhow::Error {
    match err {
        EvalError::UnknownPolicy(tag) => usage(format!("unknown policy tag `{tag}`")),
        other => other.into(),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: RunConfig,
    policy: String,
    heaps: Option<PathBuf>,
    episodes: u32,
    csv: Option<PathBuf>,
    seed: Option<u64>,
    split: SplitArg,
    jobs: usize,
) -> Result<()> {
    if episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let (ds, _) = load_dataset(&heaps, &cfg)?;
    check_workspace(&ds, &cfg)?;
    let ids = select_ids(&ds, split);
    if ids.is_empty() {
        bail!("selected split contains no heaps");
    }
    let loaded = eval::load_policy(&policy, &cfg.observe).map_err(map_policy_err)?;
    let base_seed = resolve_seed(seed, &cfg);
    let hash = cfg.hash()?;

    let t0 = Instant::now();
    // episode r runs heap ids[r % n] with seed base + r.
    let episode_args: Vec<(u32, u64)> = (0..episodes)
        .map(|r| (ids[(r as usize) % ids.len()], base_seed + r as u64))
        .collect();
    let traces = run_rollouts(&loaded, &cfg, &ds, &episode_args, jobs)?;
    let heap_refs: Vec<&HeapSpec> = ds.heaps.iter().collect();
    let summary = eval::summarize(&traces, &heap_refs);
    let actor_fraction = if policy.starts_with("actor:") { 1.0 } else { 0.0 };
    let row = summary.to_metrics_row(0, actor_fraction, t0.elapsed().as_secs_f64());
    println!(
        "{} episodes of `{}`: reward {:.3}, visibility change {:.4}, steps {:.1}, graspability change {:.4}, disturbance {:.5}",
        traces.len(),
        policy,
        row.mean_reward,
        row.mean_visibility_change,
        row.mean_steps,
        row.mean_graspability_change,
        row.mean_heap_disturbance
    );
    if let Some(path) = csv {
        write_metrics(&path, &[row], &hash)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_rollouts(
    loaded: &LoadedPolicy,
    cfg: &RunConfig,
    ds: &HeapDataset,
    episode_args: &[(u32, u64)],
    jobs: usize,
) -> Result<Vec<eval::EpisodeTrace>> {
    let hash = cfg.hash()?;
    let rollout_one = |&(heap_id, seed): &(u32, u64)| -> Result<eval::EpisodeTrace, EvalError> {
        let heap = ds.heap(heap_id).expect("heap id in range");
        eval::rollout(
            &loaded.as_rollout(&cfg.observe),
            heap,
            &cfg.world,
            &cfg.teachers,
            seed,
            &hash,
        )
    };
    if jobs <= 1 {
        let mut traces = Vec::with_capacity(episode_args.len());
        for args in episode_args {
            traces.push(rollout_one(args)?);
        }
        return Ok(traces);
    }
    // Rollouts are independent; merge preserves episode order.
    let mut results: Vec<Option<Result<eval::EpisodeTrace, EvalError>>> =
        (0..episode_args.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = episode_args.len().div_ceil(jobs);
        for (outs, args) in results.chunks_mut(chunk).zip(episode_args.chunks(chunk)) {
            let rollout_one = &rollout_one;
            scope.spawn(move || {
                for (o, a) in outs.iter_mut().zip(args) {
                    *o = Some(rollout_one(a));
                }
            });
        }
    });
    let mut traces = Vec::with_capacity(episode_args.len());
    for r in results {
        traces.push(r.expect("rollout completed")?);
    }
    Ok(traces)
}

fn cmd_rollout(
    cfg: RunConfig,
    policy: String,
    heaps: Option<PathBuf>,
    heap_id: u32,
    seed: Option<u64>,
    trace: PathBuf,
) -> Result<()> {
    let (ds, _) = load_dataset(&heaps, &cfg)?;
    check_workspace(&ds, &cfg)?;
    let heap = ds
        .heap(heap_id)
        .ok_or_else(|| usage(format!("heap id {heap_id} out of range (dataset has {})", ds.heaps.len())))?;
    let loaded = eval::load_policy(&policy, &cfg.observe).map_err(map_policy_err)?;
    let seed = resolve_seed(seed, &cfg);
    let hash = cfg.hash()?;
    let t = eval::rollout(
        &loaded.as_rollout(&cfg.observe),
        heap,
        &cfg.world,
        &cfg.teachers,
        seed,
        &hash,
    )?;
    t.save(&trace)?;
    println!(
        "heap {} `{}` seed {}: {} actions, visibility {:.3} -> {:.3}, termination {} -> {}",
        heap_id,
        policy,
        seed,
        t.action_count(),
        t.steps.first().map(|s| s.visibility).unwrap_or(0.0),
        t.steps.last().map(|s| s.visibility).unwrap_or(0.0),
        t.termination,
        trace.display()
    );
    Ok(())
}

/// Metric columns in header order, shared with the report module.
pub(crate) fn row_metrics(row: &MetricsRow) -> [f64; 7] {
    [
        row.mean_reward,
        row.mean_visibility_change,
        row.mean_steps,
        row.mean_graspability_change,
        row.mean_heap_disturbance,
        row.actor_fraction,
        row.wall_seconds,
    ]
}
