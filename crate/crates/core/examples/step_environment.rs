//! Steps the environment by hand: observations, masks, actions and the
//! per-task resolutions behind each team reward.

use edge_offload::config::EnvConfig;
use edge_offload::env::{Action, Env};

fn main() -> anyhow::Result<()> {
    let cfg = EnvConfig { nodes: 4, horizon: 12, ..EnvConfig::default() };
    let mut env = Env::new(cfg, 7)?;
    env.set_drain(true);
    env.reset(7)?;
    for (i, l) in env.topology().links.iter().enumerate() {
        println!("link {i}: {:?} rate {:.1} Mbit/s fail {:.3}/s", l.endpoints, l.rate / 1e6, l.fail_rate);
    }
    while !env.is_done() {
        // forward to the first allowed neighbour when possible, else run locally
        let actions: Vec<Action> = env
            .masks()
            .iter()
            .map(|m| match (m.idle(), m.forward_slots().first()) {
                (true, _) => Action::Idle,
                (false, Some(&k)) if env.slot() % 2 == 0 => Action::Forward(k),
                _ => Action::Local,
            })
            .collect();
        let rec = env.step(&actions)?;
        let res: Vec<String> = rec
            .resolutions
            .iter()
            .map(|r| format!("task {} {} ({:?}, {:.2}s, rel {:.3})", r.task_id, r.outcome.label(), r.cause, r.delay, r.reliability))
            .collect();
        println!("slot {:>2} reward {:+} {}", rec.slot, rec.reward as i64, res.join("; "));
    }
    let s = env.stats();
    println!("generated {} success {} violations {} rate {:.3}", s.generated, s.success, s.violations(), s.success_rate());
    Ok(())
}
