//! Trains the guidance-fused policy with the rule-based provider and
//! reports the blend weight and guidance validity alongside success.
//!
//! cargo run --release --example train_ledrl -- [iterations] [seed]

use edge_offload::env::Env;
use edge_offload::fusion::{LedrlConfig, LedrlTrainer};
use edge_offload::guidance::ScriptedProvider;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut env = Env::new(Default::default(), seed)?;
    let mut tr = LedrlTrainer::new(&env, LedrlConfig::default(), seed, Some(Box::new(ScriptedProvider::new(seed))))?;
    for _ in 0..iterations {
        let s = tr.train_iteration(&mut env)?;
        if let Some(e) = s.eval_success_rate {
            println!(
                "iter {:>4} train {:.3} eval {:.3} lambda {:.3} validity {:.2} align {:.4}",
                s.iteration,
                s.train_success_rate,
                e,
                s.lambda.unwrap_or(0.0),
                s.guidance_validity.unwrap_or(0.0),
                s.losses.hybrid_loss
            );
        }
    }
    let memory = tr.guide.as_ref().map_or(0, |g| g.memory.len());
    println!("guide memory holds {memory} items after training");
    Ok(())
}
