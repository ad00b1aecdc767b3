//! Sweeps task size and intensity for the rule-based policies and flags
//! any point where success rises with difficulty beyond seed noise.
//!
//! cargo run --release --example robustness_sweep -- [seeds]

use edge_offload::harness::{self, ExperimentConfig, SweepAxes};

fn main() -> anyhow::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let cfg = ExperimentConfig {
        policies: ["local_only", "greedy", "ratc", "agsp"].map(String::from).to_vec(),
        seeds: (0..seeds).collect(),
        eval_episodes: 2,
        sweep: SweepAxes {
            task_size_kb: vec![2000.0, 3000.0, 4000.0],
            intensity: vec![800.0, 1600.0, 2400.0],
            link_fail_scale: vec![0.0, 2.0, 4.0],
            exec_fail_scale: vec![],
            topology: vec![],
            nodes: vec![],
        },
        ..ExperimentConfig::default()
    };
    let res = harness::sweep(&cfg, "example")?;
    print!("{}", harness::sweep_table(&res.cells));
    for f in &res.flags {
        println!("non-monotone: {} {} {}->{} +{:.3} (pooled std {:.3})", f.policy, f.axis, f.from, f.to, f.increase, f.pooled_std);
    }
    if res.flags.is_empty() {
        println!("every curve is non-increasing within seed noise");
    }
    Ok(())
}
