//! Trains the plain multi-agent PPO baseline and prints its learning curve.
//!
//! cargo run --release --example train_mappo -- [iterations] [seed]

use edge_offload::env::Env;
use edge_offload::mappo::{MappoTrainer, PpoConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut env = Env::new(Default::default(), seed)?;
    let mut tr = MappoTrainer::new(env.nodes(), PpoConfig::default(), seed)?;
    for _ in 0..iterations {
        let s = tr.train_iteration(&mut env)?;
        if let Some(e) = s.eval_success_rate {
            println!(
                "iter {:>4} train {:.3} eval {:.3} policy {:+.4} value {:.4} entropy {:.3}",
                s.iteration, s.train_success_rate, e, s.losses.policy_loss, s.losses.value_loss, s.losses.entropy
            );
        }
    }
    Ok(())
}
