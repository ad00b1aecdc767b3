//! Experiment driver: configuration, seeded runs, sweeps, latency
//! measurement and CSV output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{EnvConfig, TopologyKind};
use crate::env::{Action, Env};
use crate::fusion::{FusionNet, LedrlConfig, LedrlPolicy, LedrlTrainer};
use crate::guidance::{Guide, HttpProvider, Provider, ScriptedProvider, Watchdog};
use crate::heuristics::{HeuristicConfig, HeuristicKind};
use crate::mappo::{self, ActorCritic, Controller, IterationStats, MappoPolicy, MappoTrainer};
use crate::rng::{self, StreamRng};
use crate::tensor::ParamSet;

/// Version of every CSV written by the harness.
pub const SCHEMA_VERSION: u32 = 1;
/// Prefix of environment variables that override configuration keys.
/// `EDGE_OFFLOAD_ENV__NODES=20` sets `env.nodes`.
pub const ENV_PREFIX: &str = "EDGE_OFFLOAD_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Scripted,
    Http,
    Off,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "http" => Ok(Self::Http),
            "off" => Ok(Self::Off),
            o => Err(format!("unknown provider {o}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    /// probability that the scripted provider emits malformed output
    pub noise: f64,
    /// JSON-lines audit log of HTTP exchanges
    pub replay: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::Scripted, endpoint: None, noise: 0.0, replay: None }
    }
}

/// Builds the configured provider; `None` when guidance is off.
pub fn make_provider(cfg: &ProviderConfig, retries: u32, seed: u64) -> Result<Option<Box<dyn Provider>>> {
    Ok(match cfg.kind {
        ProviderKind::Off => None,
        ProviderKind::Scripted => Some(Box::new(ScriptedProvider::noisy(seed, cfg.noise))),
        ProviderKind::Http => {
            let ep = cfg.endpoint.as_deref().ok_or_else(|| anyhow!("http provider needs an endpoint"))?;
            let mut p = HttpProvider::new(ep);
            p.retries = retries;
            if let Some(path) = &cfg.replay {
                p = p.with_replay(path.clone())?;
            }
            Some(Box::new(Watchdog::new(p)))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    Heuristic(HeuristicKind),
    Mappo,
    Ledrl,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mappo" => Ok(Self::Mappo),
            "ledrl" => Ok(Self::Ledrl),
            other => HeuristicKind::parse(other).map(Self::Heuristic).ok_or_else(|| anyhow!("unknown policy `{other}`")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Heuristic(h) => h.name(),
            Self::Mappo => "mappo",
            Self::Ledrl => "ledrl",
        }
    }

    pub fn learns(self) -> bool {
        !matches!(self, Self::Heuristic(_))
    }
}

/// Sweep axes; an empty axis is skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    /// task size in KB; each value fixes the size range to that point
    pub task_size_kb: Vec<f64>,
    /// intensity in cycles/bit, fixed per point
    pub intensity: Vec<f64>,
    /// multiplier on both execution failure-rate ranges
    pub exec_fail_scale: Vec<f64>,
    /// multiplier on the link failure-rate range
    pub link_fail_scale: Vec<f64>,
    pub topology: Vec<TopologyKind>,
    pub nodes: Vec<usize>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            task_size_kb: vec![2000.0, 3000.0, 4000.0],
            intensity: vec![800.0, 1600.0, 2400.0],
            exec_fail_scale: vec![0.0, 1.0, 2.0, 4.0],
            link_fail_scale: vec![0.0, 1.0, 2.0, 4.0],
            topology: vec![TopologyKind::Random, TopologyKind::Ring],
            nodes: vec![10, 20],
        }
    }
}

/// One point on a sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AxisPoint {
    TaskSize(f64),
    Intensity(f64),
    ExecFail(f64),
    LinkFail(f64),
    Topology(TopologyKind),
    Nodes(usize),
}

impl AxisPoint {
    pub fn axis(&self) -> &'static str {
        match self {
            Self::TaskSize(_) => "task_size_kb",
            Self::Intensity(_) => "intensity",
            Self::ExecFail(_) => "exec_fail_scale",
            Self::LinkFail(_) => "link_fail_scale",
            Self::Topology(_) => "topology",
            Self::Nodes(_) => "nodes",
        }
    }

    pub fn value(&self) -> String {
        match self {
            Self::TaskSize(x) | Self::Intensity(x) | Self::ExecFail(x) | Self::LinkFail(x) => x.to_string(),
            Self::Topology(t) => format!("{t:?}").to_lowercase(),
            Self::Nodes(n) => n.to_string(),
        }
    }

    /// Whether later points on this axis are harder.
    pub fn ordered(&self) -> bool {
        !matches!(self, Self::Topology(_) | Self::Nodes(_))
    }

    pub fn apply(&self, env: &EnvConfig) -> EnvConfig {
        let mut e = env.clone();
        match *self {
            Self::TaskSize(x) => e.task_size_kb = crate::config::Range::fixed(x),
            Self::Intensity(x) => e.intensity_cycles_per_bit = crate::config::Range::fixed(x),
            Self::ExecFail(s) => {
                e.sw_fail_rate = crate::config::Range::new(e.sw_fail_rate.lo * s, e.sw_fail_rate.hi * s);
                e.hw_fail_rate = crate::config::Range::new(e.hw_fail_rate.lo * s, e.hw_fail_rate.hi * s);
            }
            Self::LinkFail(s) => e.link_fail_rate = crate::config::Range::new(e.link_fail_rate.lo * s, e.link_fail_rate.hi * s),
            Self::Topology(t) => e.topology = t,
            Self::Nodes(n) => e.nodes = n,
        }
        e
    }
}

impl SweepAxes {
    pub fn points(&self) -> Vec<Vec<AxisPoint>> {
        let mut out = Vec::new();
        let mut push = |v: Vec<AxisPoint>| {
            if !v.is_empty() {
                out.push(v)
            }
        };
        push(self.task_size_kb.iter().map(|&x| AxisPoint::TaskSize(x)).collect());
        push(self.intensity.iter().map(|&x| AxisPoint::Intensity(x)).collect());
        push(self.exec_fail_scale.iter().map(|&x| AxisPoint::ExecFail(x)).collect());
        push(self.link_fail_scale.iter().map(|&x| AxisPoint::LinkFail(x)).collect());
        push(self.topology.iter().map(|&x| AxisPoint::Topology(x)).collect());
        push(self.nodes.iter().map(|&x| AxisPoint::Nodes(x)).collect());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub policies: Vec<String>,
    pub heuristics: HeuristicConfig,
    pub ledrl: LedrlConfig,
    pub provider: ProviderConfig,
    pub seeds: Vec<u64>,
    /// PPO update iterations for learning policies
    pub iterations: usize,
    /// evaluation episodes per seed for `simulate`, `evaluate` and `sweep`
    pub eval_episodes: usize,
    pub sweep: SweepAxes,
    pub latency_steps: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            policies: vec!["random".into()],
            heuristics: HeuristicConfig::default(),
            ledrl: LedrlConfig::default(),
            provider: ProviderConfig::default(),
            seeds: (0..10).collect(),
            iterations: 300,
            eval_episodes: 5,
            sweep: SweepAxes::default(),
            latency_steps: 1000,
            out: PathBuf::from("runs"),
        }
    }
}

/// Sets `path` (keys separated by `__`, case-insensitive) to `raw`,
/// parsed as JSON when possible and as a string otherwise.
pub fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<String> = path.split("__").map(str::to_lowercase).collect();
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| anyhow!("`{}` is not an object", keys[..i].join(".")))?;
        if !obj.contains_key(k) {
            bail!("unknown config key `{}`", keys[..=i].join("."));
        }
        if i + 1 == keys.len() {
            obj.insert(k.clone(), value);
            return Ok(());
        }
        cur = obj.get_mut(k).expect("checked");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("need at least one seed");
        }
        if self.policies.is_empty() {
            bail!("need at least one policy");
        }
        for p in &self.policies {
            PolicyKind::parse(p)?;
        }
        self.env.validate()?;
        self.heuristics.validate().map_err(|e| anyhow!(e))?;
        self.ledrl.ppo.validate()?;
        self.ledrl.fusion.schedule.validate().map_err(|e| anyhow!(e))?;
        self.ledrl.guidance.validate().map_err(|e| anyhow!(e))?;
        Ok(())
    }

    /// Defaults, then the optional JSON file, then environment overrides.
    pub fn load(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            merge(&mut v, file);
        }
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, raw) in vars {
            set_path(&mut v, &k[ENV_PREFIX.len()..], &raw).with_context(|| format!("applying {k}"))?;
        }
        let cfg: Self = serde_json::from_value(v)?;
        Ok(cfg)
    }

    pub fn policy_kinds(&self) -> Result<Vec<PolicyKind>> {
        self.policies.iter().map(|p| PolicyKind::parse(p)).collect()
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

// ---------------------------------------------------------------- controllers

/// Per-decision timing split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub decisions: usize,
    pub total_s: f64,
    pub guidance_s: f64,
    pub network_s: f64,
}

pub struct HeuristicController {
    pub kind: HeuristicKind,
    pub cfg: HeuristicConfig,
    pub rng: StreamRng,
}

impl HeuristicController {
    pub fn new(kind: HeuristicKind, cfg: HeuristicConfig, seed: u64) -> Self {
        Self { kind, cfg, rng: rng::stream(seed, rng::POLICY) }
    }
}

impl Controller for HeuristicController {
    fn act(&mut self, env: &Env) -> Vec<Action> {
        (0..env.nodes()).map(|i| self.kind.decide(&env.observations()[i], &env.masks()[i], &self.cfg, &mut self.rng)).collect()
    }
}

// ---------------------------------------------------------------- outputs

/// One CSV row; every file written by the harness uses this schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub run_id: String,
    pub kind: String,
    pub policy: String,
    pub seed: u64,
    pub axis: String,
    pub axis_value: String,
    pub iteration: usize,
    pub episodes: usize,
    pub generated: usize,
    pub success: usize,
    pub deadline_violations: usize,
    pub reliability_violations: usize,
    pub success_rate: f64,
    pub return_mean: f64,
    pub eval_success: Option<usize>,
    pub eval_resolved: Option<usize>,
    pub eval_success_rate: Option<f64>,
    pub decision_latency_s: f64,
    pub guidance_latency_s: f64,
    pub lambda: Option<f64>,
    pub guidance_validity: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub hybrid_loss: Option<f64>,
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<MetricsRow> = r.deserialize().collect::<Result<_, _>>()?;
    if let Some(bad) = rows.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        bail!("unsupported schema version {}", bad.schema_version);
    }
    Ok(rows)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

// ---------------------------------------------------------------- evaluation

/// Pooled outcome counts over evaluation episodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub generated: usize,
    pub success: usize,
    pub deadline_violations: usize,
    pub reliability_violations: usize,
    pub return_sum: f64,
    pub timing: Timing,
}

impl EvalSummary {
    pub fn success_rate(&self) -> f64 {
        crate::model::success_rate_from_counts(self.success, self.success + self.deadline_violations + self.reliability_violations)
    }

    pub fn row(&self, run_id: &str, kind: &str, policy: &str, seed: u64) -> MetricsRow {
        let per = |x: f64| if self.timing.decisions == 0 { 0.0 } else { x / self.timing.decisions as f64 };
        MetricsRow {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.into(),
            kind: kind.into(),
            policy: policy.into(),
            seed,
            episodes: self.episodes,
            generated: self.generated,
            success: self.success,
            deadline_violations: self.deadline_violations,
            reliability_violations: self.reliability_violations,
            success_rate: self.success_rate(),
            return_mean: self.return_sum / self.episodes.max(1) as f64,
            decision_latency_s: per(self.timing.total_s),
            guidance_latency_s: per(self.timing.guidance_s),
            ..Default::default()
        }
    }
}

/// Runs drained episodes of `ctl` on the given episode seeds.
pub fn run_episodes(env: &mut Env, ctl: &mut dyn Controller, seeds: &[u64]) -> Result<EvalSummary> {
    let mut s = EvalSummary::default();
    env.set_drain(true);
    let (g0, n0) = ctl.split();
    for &seed in seeds {
        env.reset(seed)?;
        ctl.begin_episode();
        while !env.is_done() {
            let deciding = mappo::deciding_agents(env).len();
            let t0 = Instant::now();
            let actions = ctl.act(env);
            s.timing.total_s += t0.elapsed().as_secs_f64();
            s.timing.decisions += deciding;
            let rec = env.step(&actions)?;
            s.return_sum += rec.reward;
            ctl.observe(&rec);
        }
        let st = env.stats();
        s.episodes += 1;
        s.generated += st.generated;
        s.success += st.success;
        s.deadline_violations += st.deadline_violations;
        s.reliability_violations += st.reliability_violations;
    }
    let (g1, n1) = ctl.split();
    s.timing.guidance_s = g1 - g0;
    s.timing.network_s = n1 - n0;
    Ok(s)
}

/// Evaluation episode seeds for a run seed.
pub fn eval_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    (0..episodes).map(|k| mappo::eval_seed(seed, k)).collect()
}

/// Outcome of training one learning policy on one seed.
pub struct TrainedRun {
    pub policy: PolicyKind,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// `(iteration, eval success rate)` at every evaluation
    pub curve: Vec<(usize, f64)>,
    pub controller: Box<dyn Controller>,
    pub checkpoint: Checkpoint,
    /// lambda after every schedule update (LeDRL only)
    pub lambda_trace: Vec<f64>,
}

/// Saved parameters of a learning policy.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy: PolicyKind,
    pub nodes: usize,
    pub actor: ParamSet,
    pub critic: ParamSet,
    pub fusion: Option<ParamSet>,
    pub lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    policy: String,
    nodes: usize,
    lambda: f64,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.actor.save(&dir.join("actor.json"))?;
        self.critic.save(&dir.join("critic.json"))?;
        if let Some(f) = &self.fusion {
            f.save(&dir.join("fusion.json"))?;
        }
        let meta = CheckpointMeta { policy: self.policy.name().into(), nodes: self.nodes, lambda: self.lambda };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let fusion_path = dir.join("fusion.json");
        Ok(Self {
            policy: PolicyKind::parse(&meta.policy)?,
            nodes: meta.nodes,
            actor: ParamSet::load(&dir.join("actor.json"))?,
            critic: ParamSet::load(&dir.join("critic.json"))?,
            fusion: if fusion_path.exists() { Some(ParamSet::load(&fusion_path)?) } else { None },
            lambda: meta.lambda,
        })
    }

    /// Evaluation controller built from saved parameters.
    pub fn controller(&self, cfg: &ExperimentConfig, env: &Env, seed: u64, greedy: bool) -> Result<Box<dyn Controller>> {
        if env.nodes() != self.nodes {
            bail!("checkpoint is for {} nodes, environment has {}", self.nodes, env.nodes());
        }
        let mut ac = ActorCritic::new(self.nodes, &cfg.ledrl.ppo, seed);
        ac.actor_params.load_from(&self.actor)?;
        ac.critic_params.load_from(&self.critic)?;
        let rng = rng::stream(seed, "eval-policy");
        Ok(match self.policy {
            PolicyKind::Mappo => Box::new(MappoPolicy { ac, greedy, rng }),
            PolicyKind::Ledrl => {
                let mut fusion = FusionNet::new(self.nodes, cfg.ledrl.ppo.hidden, &cfg.ledrl.fusion, seed)?;
                fusion.params.load_from(self.fusion.as_ref().ok_or_else(|| anyhow!("checkpoint lacks fusion parameters"))?)?;
                let guide = make_provider(&cfg.provider, cfg.ledrl.guidance.retries, seed)?
                    .map(|p| Guide::for_env(cfg.ledrl.guidance.clone(), p, env));
                Box::new(LedrlPolicy::new(ac, fusion, self.lambda, guide, greedy, rng))
            }
            PolicyKind::Heuristic(_) => bail!("heuristics have no checkpoint"),
        })
    }
}

fn train_row(run_id: &str, policy: &str, seed: u64, s: &IterationStats) -> MetricsRow {
    MetricsRow {
        schema_version: SCHEMA_VERSION,
        run_id: run_id.into(),
        kind: "train".into(),
        policy: policy.into(),
        seed,
        iteration: s.iteration,
        episodes: s.episodes,
        generated: s.train_resolved,
        success: s.train_success,
        deadline_violations: s.train_deadline,
        reliability_violations: s.train_resolved - s.train_success - s.train_deadline,
        success_rate: s.train_success_rate,
        return_mean: s.train_return,
        eval_success: s.eval_counts.map(|e| e.0),
        eval_resolved: s.eval_counts.map(|e| e.1),
        eval_success_rate: s.eval_success_rate,
        decision_latency_s: s.decision_time,
        guidance_latency_s: s.guidance_time,
        lambda: s.lambda,
        guidance_validity: s.guidance_validity,
        policy_loss: Some(s.losses.policy_loss),
        value_loss: Some(s.losses.value_loss),
        entropy: Some(s.losses.entropy),
        hybrid_loss: s.lambda.map(|_| s.losses.hybrid_loss),
        ..Default::default()
    }
}

/// Trains a learning policy on one seed and returns its metrics.
pub fn train(cfg: &ExperimentConfig, env_cfg: &EnvConfig, policy: PolicyKind, seed: u64, run_id: &str) -> Result<TrainedRun> {
    let mut env = Env::new(env_cfg.clone(), seed)?;
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    let name = policy.name();
    let fail = |e: mappo::TrainError| anyhow!("{run_id}: policy {name} seed {seed}: {e}");
    match policy {
        PolicyKind::Mappo => {
            let mut tr = MappoTrainer::new(env.nodes(), cfg.ledrl.ppo.clone(), seed).map_err(fail)?;
            for _ in 0..cfg.iterations {
                let s = tr.train_iteration(&mut env).map_err(fail)?;
                if let Some(e) = s.eval_success_rate {
                    curve.push((s.iteration, e));
                }
                rows.push(train_row(run_id, name, seed, &s));
            }
            let checkpoint = Checkpoint {
                policy,
                nodes: env.nodes(),
                actor: tr.ac.actor_params.clone(),
                critic: tr.ac.critic_params.clone(),
                fusion: None,
                lambda: 0.0,
            };
            Ok(TrainedRun { policy, seed, rows, curve, controller: Box::new(tr.policy(cfg.ledrl.ppo.eval_greedy)), checkpoint, lambda_trace: Vec::new() })
        }
        PolicyKind::Ledrl => {
            let provider = make_provider(&cfg.provider, cfg.ledrl.guidance.retries, seed)?;
            let mut tr = LedrlTrainer::new(&env, cfg.ledrl.clone(), seed, provider).map_err(fail)?;
            for _ in 0..cfg.iterations {
                let s = tr.train_iteration(&mut env).map_err(fail)?;
                if let Some(e) = s.eval_success_rate {
                    curve.push((s.iteration, e));
                }
                rows.push(train_row(run_id, name, seed, &s));
            }
            let checkpoint = Checkpoint {
                policy,
                nodes: env.nodes(),
                actor: tr.ac.actor_params.clone(),
                critic: tr.ac.critic_params.clone(),
                fusion: Some(tr.fusion.params.clone()),
                lambda: tr.lambda(),
            };
            let pol = tr.policy(cfg.ledrl.ppo.eval_greedy, cfg.ledrl.eval_guidance);
            let lambda_trace = std::mem::take(&mut tr.lambda_trace);
            Ok(TrainedRun { policy, seed, rows, curve, controller: Box::new(pol), checkpoint, lambda_trace })
        }
        PolicyKind::Heuristic(h) => bail!("{} has nothing to train", h.name()),
    }
}

/// Controller for a policy; learning policies are trained first.
pub fn controller_for(
    cfg: &ExperimentConfig,
    env_cfg: &EnvConfig,
    policy: PolicyKind,
    seed: u64,
    run_id: &str,
) -> Result<(Box<dyn Controller>, Vec<MetricsRow>)> {
    match policy {
        PolicyKind::Heuristic(h) => Ok((Box::new(HeuristicController::new(h, cfg.heuristics, seed)), Vec::new())),
        _ => {
            let run = train(cfg, env_cfg, policy, seed, run_id)?;
            Ok((run.controller, run.rows))
        }
    }
}

/// Evaluates every configured policy on every seed (training learners first).
pub fn evaluate_all(cfg: &ExperimentConfig, env_cfg: &EnvConfig, run_id: &str, kind: &str) -> Result<Vec<MetricsRow>> {
    let kinds = cfg.policy_kinds()?;
    let jobs: Vec<(PolicyKind, u64)> = kinds.iter().flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s))).collect();
    let out: Vec<Result<Vec<MetricsRow>>> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let (mut ctl, mut rows) = controller_for(cfg, env_cfg, k, seed, run_id)?;
            let mut env = Env::new(env_cfg.clone(), seed)?;
            let s = run_episodes(&mut env, ctl.as_mut(), &eval_seeds(seed, cfg.eval_episodes))
                .with_context(|| format!("{run_id}: policy {} seed {seed}", k.name()))?;
            rows.push(s.row(run_id, kind, k.name(), seed));
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in out {
        rows.extend(r?);
    }
    Ok(rows)
}

/// `policy: mean ± std` lines over seed-level success rates of `kind` rows.
pub fn summary(rows: &[MetricsRow], kind: &str) -> String {
    let mut s = String::new();
    let mut names: Vec<&str> = rows.iter().filter(|r| r.kind == kind).map(|r| r.policy.as_str()).collect();
    names.dedup();
    names.sort_unstable();
    names.dedup();
    let mut means = std::collections::BTreeMap::new();
    for n in &names {
        let xs: Vec<f64> = rows.iter().filter(|r| r.kind == kind && r.policy == *n).map(|r| r.success_rate).collect();
        let (m, sd) = mean_std(&xs);
        means.insert(*n, xs.clone());
        let _ = writeln!(s, "{n:>10}: success {:.2} ± {:.2} % over {} seeds", 100.0 * m, 100.0 * sd, xs.len());
    }
    if let (Some(a), Some(b)) = (means.get("ledrl"), means.get("mappo")) {
        let seeds_a: Vec<u64> = rows.iter().filter(|r| r.kind == kind && r.policy == "ledrl").map(|r| r.seed).collect();
        let seeds_b: Vec<u64> = rows.iter().filter(|r| r.kind == kind && r.policy == "mappo").map(|r| r.seed).collect();
        if seeds_a == seeds_b {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let (m, sd) = mean_std(&d);
            let _ = writeln!(s, "delta ledrl - mappo: {:+.2} ± {:.2} pp (paired over {} seeds)", 100.0 * m, 100.0 * sd, d.len());
        }
    }
    s
}

// ---------------------------------------------------------------- sweeps

/// Seed-level results for one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis: String,
    pub value: String,
    pub policy: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Axis points where a policy's mean rose with difficulty by more than
/// the pooled standard deviation of the two points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityFlag {
    pub axis: String,
    pub policy: String,
    pub from: String,
    pub to: String,
    pub increase: f64,
    pub pooled_std: f64,
}

pub fn pooled_std(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

pub struct SweepResult {
    pub rows: Vec<MetricsRow>,
    pub cells: Vec<SweepCell>,
    pub flags: Vec<MonotonicityFlag>,
}

/// Cross product of axis points and seeds; one summary table per axis.
pub fn sweep(cfg: &ExperimentConfig, run_id: &str) -> Result<SweepResult> {
    let axes = cfg.sweep.points();
    if axes.is_empty() {
        bail!("sweep needs at least one non-empty axis");
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut flags = Vec::new();
    let kinds = cfg.policy_kinds()?;
    for axis in &axes {
        let jobs: Vec<(AxisPoint, PolicyKind, u64)> =
            axis.iter().flat_map(|&p| kinds.iter().flat_map(move |&k| cfg.seeds.iter().map(move |&s| (p, k, s)))).collect();
        let results: Vec<Result<MetricsRow>> = jobs
            .par_iter()
            .map(|&(p, k, seed)| {
                let env_cfg = p.apply(&cfg.env);
                let id = format!("{run_id}/{}={}", p.axis(), p.value());
                let (mut ctl, _) = controller_for(cfg, &env_cfg, k, seed, &id)?;
                let mut env = Env::new(env_cfg, seed)?;
                let s = run_episodes(&mut env, ctl.as_mut(), &eval_seeds(seed, cfg.eval_episodes))
                    .with_context(|| format!("{id}: policy {} seed {seed}", k.name()))?;
                let mut row = s.row(&id, "sweep", k.name(), seed);
                row.axis = p.axis().into();
                row.axis_value = p.value();
                Ok(row)
            })
            .collect();
        let axis_rows: Vec<MetricsRow> = results.into_iter().collect::<Result<_>>()?;
        for k in &kinds {
            let mut prev: Option<SweepCell> = None;
            for p in axis {
                let xs: Vec<f64> = axis_rows
                    .iter()
                    .filter(|r| r.policy == k.name() && r.axis_value == p.value())
                    .map(|r| r.success_rate)
                    .collect();
                let (mean, std) = mean_std(&xs);
                let cell = SweepCell { axis: p.axis().into(), value: p.value(), policy: k.name().into(), mean, std, seeds: xs.len() };
                if let (true, Some(pr)) = (p.ordered(), &prev) {
                    let pooled = pooled_std(pr.std, cell.std);
                    if cell.mean - pr.mean > pooled {
                        flags.push(MonotonicityFlag {
                            axis: cell.axis.clone(),
                            policy: cell.policy.clone(),
                            from: pr.value.clone(),
                            to: cell.value.clone(),
                            increase: cell.mean - pr.mean,
                            pooled_std: pooled,
                        });
                    }
                }
                prev = Some(cell.clone());
                cells.push(cell);
            }
        }
        rows.extend(axis_rows);
    }
    Ok(SweepResult { rows, cells, flags })
}

pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut s = String::new();
    let mut axes: Vec<&str> = cells.iter().map(|c| c.axis.as_str()).collect();
    axes.dedup();
    for axis in axes {
        let _ = writeln!(s, "axis {axis}");
        for c in cells.iter().filter(|c| c.axis == axis) {
            let _ = writeln!(s, "  {:>8} {:>10}: {:.2} ± {:.2} %", c.value, c.policy, 100.0 * c.mean, 100.0 * c.std);
        }
    }
    s
}

// ---------------------------------------------------------------- latency

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub policy: String,
    pub decisions: usize,
    pub mean_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
    pub guidance_mean_s: f64,
    pub network_mean_s: f64,
    pub guidance_p99_s: Option<f64>,
}

pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[k]
}

/// Wall-clock per-decision latency over at least `steps` environment steps.
pub fn measure_latency(name: &str, ctl: &mut dyn Controller, env: &mut Env, steps: usize, seed: u64) -> Result<LatencyStats> {
    let mut per_decision = Vec::new();
    let mut decisions = 0;
    let (g0, n0) = ctl.split();
    let mut k = 0;
    let mut done = 0;
    env.set_drain(false);
    env.reset(mappo::eval_seed(seed, 1000))?;
    ctl.begin_episode();
    while done < steps {
        if env.is_done() {
            k += 1;
            env.reset(mappo::eval_seed(seed, 1000 + k))?;
            ctl.begin_episode();
        }
        let deciding = mappo::deciding_agents(env).len();
        let t0 = Instant::now();
        let actions = ctl.act(env);
        let dt = t0.elapsed().as_secs_f64();
        if deciding > 0 {
            per_decision.extend(std::iter::repeat_n(dt / deciding as f64, deciding));
            decisions += deciding;
        }
        let rec = env.step(&actions)?;
        ctl.observe(&rec);
        done += 1;
    }
    let (g1, n1) = ctl.split();
    let per = |x: f64| if decisions == 0 { 0.0 } else { x / decisions as f64 };
    let g = ctl.guidance_latencies().to_vec();
    Ok(LatencyStats {
        policy: name.into(),
        decisions,
        mean_s: per(per_decision.iter().sum()),
        p95_s: percentile(&per_decision, 0.95),
        p99_s: percentile(&per_decision, 0.99),
        guidance_mean_s: per(g1 - g0),
        network_mean_s: per(n1 - n0),
        guidance_p99_s: (!g.is_empty()).then(|| percentile(&g, 0.99)),
    })
}

/// Untrained controller for latency runs; network cost does not depend
/// on the weights.
pub fn fresh_controller(cfg: &ExperimentConfig, env: &Env, policy: PolicyKind, seed: u64) -> Result<Box<dyn Controller>> {
    let rng = rng::stream(seed, "eval-policy");
    Ok(match policy {
        PolicyKind::Heuristic(h) => Box::new(HeuristicController::new(h, cfg.heuristics, seed)),
        PolicyKind::Mappo => Box::new(MappoPolicy { ac: ActorCritic::new(env.nodes(), &cfg.ledrl.ppo, seed), greedy: false, rng }),
        PolicyKind::Ledrl => {
            let ac = ActorCritic::new(env.nodes(), &cfg.ledrl.ppo, seed);
            let fusion = FusionNet::new(env.nodes(), cfg.ledrl.ppo.hidden, &cfg.ledrl.fusion, seed)?;
            let guide =
                make_provider(&cfg.provider, cfg.ledrl.guidance.retries, seed)?.map(|p| Guide::for_env(cfg.ledrl.guidance.clone(), p, env));
            let lambda = cfg.ledrl.fusion.schedule.lambda_init.max(cfg.ledrl.fusion.schedule.lambda_min);
            Box::new(LedrlPolicy::new(ac, fusion, lambda, guide, false, rng))
        }
    })
}

/// Timeout from a millisecond count.
pub fn millis(ms: u64) -> Duration {
    Duration::from_millis(ms)
}

