//! Rough throughput probe for one training step at production sizes.
use std::time::Instant;
use vmms_core::heapgen::{generate_dataset, GeneratorConfig, HeapCondition, WorkspaceSize};
use vmms_core::observe::ObserveConfig;
use vmms_core::rl::{train, Ablations, TrainConfig, TrainSetup};
use vmms_core::teachers::TeacherParams;
use vmms_core::world::WorldParams;

fn main() {
    let gen_cfg = GeneratorConfig::new(HeapCondition::Single, 12, 7);
    let (ds, _) = generate_dataset(WorkspaceSize { w: 0.6, h: 0.6 }, &gen_cfg).unwrap();
    let dir = std::env::temp_dir().join("vmms_bench");
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(120);
    let no_asym = std::env::args().nth(2).map(|s| s == "noasym").unwrap_or(false);
    let setup = TrainSetup {
        config: TrainConfig {
            max_env_steps: steps,
            warmup_steps: 20,
            eval_every: 0,
            seed: 3,
            ..TrainConfig::default()
        },
        ablations: Ablations { no_asymmetry: no_asym, ..Ablations::default() },
        world: WorldParams::default(),
        observe: ObserveConfig::default(),
        teacher_params: TeacherParams::default(),
        out_dir: dir,
        config_hash: "bench".into(),
    };
    let t0 = Instant::now();
    let out = train(&ds, &setup).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{} env steps in {:.2}s -> {:.1} ms/step (rows {})",
        steps,
        dt,
        1000.0 * dt / steps as f64,
        out.rows.len()
    );
}
