//! Per-decision wall-clock cost of each controller family, with the
//! guidance share split out for the fused policy.

use edge_offload::env::Env;
use edge_offload::harness::{self, ExperimentConfig, PolicyKind};

fn main() -> anyhow::Result<()> {
    let cfg = ExperimentConfig::default();
    let mut env = Env::new(cfg.env.clone(), 0)?;
    println!("{:>10} {:>10} {:>10} {:>10} {:>10}", "policy", "mean us", "p99 us", "guide us", "net us");
    for name in ["local_only", "greedy", "ratc", "agsp", "mappo", "ledrl"] {
        let kind = PolicyKind::parse(name)?;
        let mut ctl = harness::fresh_controller(&cfg, &env, kind, 0)?;
        let s = harness::measure_latency(name, ctl.as_mut(), &mut env, cfg.latency_steps, 0)?;
        println!(
            "{:>10} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
            name,
            s.mean_s * 1e6,
            s.p99_s * 1e6,
            s.guidance_mean_s * 1e6,
            s.network_mean_s * 1e6
        );
    }
    Ok(())
}
