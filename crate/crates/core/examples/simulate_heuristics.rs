//! Runs every rule-based policy on the default 10-node network.
//!
//! cargo run --release --example simulate_heuristics -- [episodes]

use edge_offload::env::Env;
use edge_offload::harness::{self, ExperimentConfig, HeuristicController};
use edge_offload::heuristics::HeuristicKind;

fn main() -> anyhow::Result<()> {
    let episodes: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let cfg = ExperimentConfig::default();
    println!("{:>10} {:>9} {:>9} {:>9} {:>9}", "policy", "success", "deadline", "reliab.", "rate");
    for h in HeuristicKind::ALL {
        let mut env = Env::new(cfg.env.clone(), 0)?;
        let mut ctl = HeuristicController::new(h, cfg.heuristics, 0);
        let s = harness::run_episodes(&mut env, &mut ctl, &harness::eval_seeds(0, episodes))?;
        println!(
            "{:>10} {:>9} {:>9} {:>9} {:>8.1}%",
            h.name(),
            s.success,
            s.deadline_violations,
            s.reliability_violations,
            100.0 * s.success_rate()
        );
    }
    Ok(())
}
