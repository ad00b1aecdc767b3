use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use edge_offload::env::Env;
use edge_offload::harness::{self, Checkpoint, ExperimentConfig, PolicyKind, ProviderKind};
use edge_offload::oracle::{self, BinPackingInstance, StaticInstance};

#[derive(Parser)]
#[command(name = "edge-offload", version, about = "Edge offloading simulator and policy trainer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; EDGE_OFFLOAD_* variables override keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// run a single seed instead of the configured list
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// comma-separated policies: random, local_only, greedy, ratc, agsp, mappo, ledrl
    #[arg(long, global = true)]
    policy: Option<String>,
    /// output directory for CSVs, checkpoints and the resolved config
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// guidance source for ledrl: scripted, http or off
    #[arg(long, global = true)]
    provider: Option<ProviderKind>,
    /// URL of the HTTP guidance service
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// guidance query timeout
    #[arg(long, global = true)]
    timeout_ms: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run episodes of heuristic or checkpointed policies
    Simulate {
        /// directory written by `train`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train learning policies and save checkpoints
    Train {
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate policies; learners are trained first unless a checkpoint is given
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Solve a static instance or a bin-packing instance exactly
    Oracle {
        /// JSON file holding a static instance or {items, bins, capacity}
        instance: PathBuf,
    },
    /// Robustness sweep over the configured axes
    Sweep,
    /// Per-decision latency of each policy
    Latency {
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(c.config.as_deref(), std::env::vars())?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(p) = &c.policy {
        cfg.policies = p.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(k) = c.provider {
        cfg.provider.kind = k;
    }
    if let Some(e) = &c.endpoint {
        cfg.provider.endpoint = Some(e.clone());
    }
    if let Some(t) = c.timeout_ms {
        cfg.ledrl.guidance.timeout_ms = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_config(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn checkpoint_dir(out: &Path, policy: PolicyKind, seed: u64) -> PathBuf {
    out.join("checkpoints").join(policy.name()).join(format!("seed-{seed}"))
}

/// Evaluates every policy from a checkpoint (learners) or directly (heuristics).
fn evaluate_with_checkpoint(cfg: &ExperimentConfig, dir: &Path, kind: &str) -> Result<Vec<harness::MetricsRow>> {
    let ck = Checkpoint::load(dir)?;
    let mut rows = Vec::new();
    for p in cfg.policy_kinds()? {
        for &seed in &cfg.seeds {
            let mut env = Env::new(cfg.env.clone(), seed)?;
            let mut ctl = match p {
                PolicyKind::Heuristic(h) => Box::new(harness::HeuristicController::new(h, cfg.heuristics, seed)) as Box<dyn edge_offload::mappo::Controller>,
                _ if p == ck.policy => ck.controller(cfg, &env, seed, cfg.ledrl.ppo.eval_greedy)?,
                _ => bail!("checkpoint holds {}, not {}", ck.policy.name(), p.name()),
            };
            let s = harness::run_episodes(&mut env, ctl.as_mut(), &harness::eval_seeds(seed, cfg.eval_episodes))?;
            rows.push(s.row("checkpoint", kind, p.name(), seed));
        }
    }
    Ok(rows)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::Simulate { checkpoint, episodes } => {
            if let Some(e) = episodes {
                cfg.eval_episodes = e;
            }
            let rows = match checkpoint {
                Some(dir) => evaluate_with_checkpoint(&cfg, &dir, "simulate")?,
                None => {
                    if let Some(p) = cfg.policy_kinds()?.into_iter().find(|p| p.learns()) {
                        bail!("{} needs --checkpoint for simulate; use train or evaluate", p.name());
                    }
                    harness::evaluate_all(&cfg, &cfg.env, "simulate", "simulate")?
                }
            };
            save_config(&cfg)?;
            harness::write_csv(&cfg.out.join("simulate.csv"), &rows)?;
            print!("{}", harness::summary(&rows, "simulate"));
        }
        Cmd::Train { iterations } => {
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            let kinds = cfg.policy_kinds()?;
            if kinds.iter().any(|k| !k.learns()) {
                bail!("train accepts only mappo and ledrl");
            }
            save_config(&cfg)?;
            let mut rows = Vec::new();
            for k in kinds {
                for &seed in &cfg.seeds {
                    let mut run = harness::train(&cfg, &cfg.env, k, seed, "train")?;
                    run.checkpoint.save(&checkpoint_dir(&cfg.out, k, seed))?;
                    let mut env = Env::new(cfg.env.clone(), seed)?;
                    let s = harness::run_episodes(&mut env, run.controller.as_mut(), &harness::eval_seeds(seed, cfg.eval_episodes))?;
                    rows.append(&mut run.rows);
                    rows.push(s.row("train", "final", k.name(), seed));
                }
            }
            harness::write_csv(&cfg.out.join("train.csv"), &rows)?;
            print!("{}", harness::summary(&rows, "final"));
        }
        Cmd::Evaluate { checkpoint } => {
            let rows = match checkpoint {
                Some(dir) => evaluate_with_checkpoint(&cfg, &dir, "evaluate")?,
                None => harness::evaluate_all(&cfg, &cfg.env, "evaluate", "evaluate")?,
            };
            save_config(&cfg)?;
            harness::write_csv(&cfg.out.join("evaluate.csv"), &rows)?;
            print!("{}", harness::summary(&rows, "evaluate"));
        }
        Cmd::Oracle { instance } => {
            let text = std::fs::read_to_string(&instance).with_context(|| format!("reading {}", instance.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let inst = if value.get("items").is_some() {
                let bp: BinPackingInstance = serde_json::from_value(value)?;
                oracle::reduce_binpacking(&bp)?
            } else {
                serde_json::from_value::<StaticInstance>(value)?
            };
            let s = oracle::solve_exact(&inst)?;
            if s.feasible {
                println!("feasible: success rate {:.4} ({} of {} tasks)", s.success_rate, s.successes, inst.tasks.len());
            } else {
                println!("infeasible");
            }
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Sweep => {
            save_config(&cfg)?;
            let r = harness::sweep(&cfg, "sweep")?;
            harness::write_csv(&cfg.out.join("sweep.csv"), &r.rows)?;
            print!("{}", harness::sweep_table(&r.cells));
            for f in &r.flags {
                println!(
                    "non-monotone: {} {} rose {:.2} pp from {} to {} (pooled std {:.2} pp)",
                    f.policy,
                    f.axis,
                    100.0 * f.increase,
                    f.from,
                    f.to,
                    100.0 * f.pooled_std
                );
            }
            if r.flags.is_empty() {
                println!("all ordered axes non-increasing within one pooled std");
            }
        }
        Cmd::Latency { steps } => {
            if let Some(s) = steps {
                cfg.latency_steps = s;
            }
            let seed = cfg.seeds[0];
            println!("{:>10} {:>10} {:>12} {:>12} {:>12} {:>12}", "policy", "decisions", "mean_ms", "p95_ms", "guide_ms", "net_ms");
            let mut all = Vec::new();
            for p in cfg.policy_kinds()? {
                let mut env = Env::new(cfg.env.clone(), seed)?;
                let mut ctl = harness::fresh_controller(&cfg, &env, p, seed)?;
                let l = harness::measure_latency(p.name(), ctl.as_mut(), &mut env, cfg.latency_steps, seed)?;
                println!(
                    "{:>10} {:>10} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                    l.policy,
                    l.decisions,
                    1e3 * l.mean_s,
                    1e3 * l.p95_s,
                    1e3 * l.guidance_mean_s,
                    1e3 * l.network_mean_s
                );
                all.push(l);
            }
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join("latency.json"), serde_json::to_string_pretty(&all)?)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
