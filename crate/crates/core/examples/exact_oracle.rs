//! Solves a small static instance exactly and compares the heuristics
//! against the optimum; then checks a bin-packing instance.

use edge_offload::heuristics::{HeuristicConfig, HeuristicKind};
use edge_offload::model::{LinkSpec, NodeSpec};
use edge_offload::oracle::{self, BinPackingInstance, StaticInstance, StaticTask};
use rand::SeedableRng;

fn node(id: usize, ghz: f64) -> NodeSpec {
    NodeSpec { id, compute_capacity: ghz * 1e9, memory: 1e10, arrival_prob: 0.0, sw_fail_rate: 0.01, hw_fail_rate: 0.005, alive: true }
}

fn main() -> anyhow::Result<()> {
    let task = |origin, mbit: f64, intensity, deadline| StaticTask {
        origin,
        size: mbit * 1e6,
        intensity,
        deadline,
        reliability_floor: 0.9,
        slot: 0,
    };
    let inst = StaticInstance {
        nodes: vec![node(0, 0.5), node(1, 3.0), node(2, 1.0)],
        links: vec![LinkSpec::new(0, 1, 20e6, 0.05)?, LinkSpec::new(1, 2, 10e6, 0.1)?],
        slot_duration: 0.5,
        horizon: 40,
        tasks: vec![
            task(0, 2.0, 900.0, 1.5),
            task(0, 1.0, 800.0, 1.2),
            task(2, 3.0, 400.0, 1.0),
            task(1, 2.0, 600.0, 1.2),
            task(2, 1.0, 500.0, 1.4),
        ],
    };
    let best = oracle::solve_exact(&inst)?;
    println!("optimum {:.2} with executors {:?} ({} nodes explored)", best.success_rate, best.assignment, best.explored);
    let cfg = HeuristicConfig::default();
    for h in HeuristicKind::ALL {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ev = oracle::evaluate_policy(&inst, |o, m| h.decide(o, m, &cfg, &mut rng))?;
        let outcomes: Vec<&str> = ev.outcomes.iter().map(|o| o.label()).collect();
        println!("{:>10}: {:.2} executors {:?} {:?}", h.name(), ev.success_rate, ev.executors, outcomes);
    }

    let bp = BinPackingInstance { items: vec![4.0, 3.0, 3.0, 2.0, 2.0, 2.0], bins: 2, capacity: 8.0 };
    let s = oracle::solve_exact(&oracle::reduce_binpacking(&bp)?)?;
    println!("bin packing {:?} into {} bins of {}: {}", bp.items, bp.bins, bp.capacity, if s.feasible { "packable" } else { "not packable" });
    Ok(())
}
