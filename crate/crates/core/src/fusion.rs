//! Guidance-augmented MAPPO.
//!
//! A guidance decision selects a row of a learned embedding table. The
//! embedded decision and a learned null token are keys for an attention
//! read driven by the encoded observation; the result is projected into the
//! actor's feature space and blended with the plain actor features under a
//! scheduled weight `lambda`. Actor and fusion parameters minimise the
//! policy loss plus the hybrid alignment loss; the critic has its own loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::{self, Action, Env};
use crate::guidance::{GuidanceConfig, GuidanceDecision, Guide, Provider};
use crate::mappo::{
    self, actor_loss, argmax_index, critic_loss, critic_row, masked_probs, minibatch_indices, sample_index, ActorCritic, Episode,
    GuidanceSample, IterationStats, LossStats, Minibatch, PpoConfig, Sample, TrainError,
};
use crate::rng::{self, StreamRng};
use crate::tensor::{self, Activation, Adam, Attention, DenseNet, Matrix, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub lambda_init: f64,
    /// cap factor on `lambda_init`
    pub beta: f64,
    pub eta: f64,
    pub gamma_decay: f64,
    pub lambda_min: f64,
    /// steps between boosts
    pub interval: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { lambda_init: 0.5, beta: 1.0, eta: 0.9, gamma_decay: 0.995, lambda_min: 0.05, interval: 50 }
    }
}

impl ScheduleConfig {
    pub fn cap(&self) -> f64 {
        self.beta * self.lambda_init
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.interval == 0 {
            return Err("schedule interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma_decay) && self.gamma_decay != 1.0 {
            return Err("gamma_decay must lie in (0,1]".into());
        }
        if !(self.lambda_min >= 0.0 && self.lambda_min <= self.cap() && self.cap() <= 1.0) {
            return Err("need 0 <= lambda_min <= beta * lambda_init <= 1".into());
        }
        Ok(())
    }
}

/// One schedule update. Boost steps take `min(cap, eta * lambda)`, all other
/// steps decay towards the floor; the result is kept in `[lambda_min, cap]`.
pub fn schedule_step(cfg: &ScheduleConfig, lambda: f64, t: u64) -> f64 {
    let next = if t.is_multiple_of(cfg.interval) { cfg.cap().min(cfg.eta * lambda) } else { cfg.lambda_min.max(cfg.gamma_decay * lambda) };
    next.clamp(cfg.lambda_min, cfg.cap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSchedule {
    pub cfg: ScheduleConfig,
    pub lambda: f64,
    pub updates: u64,
}

impl FusionSchedule {
    pub fn new(cfg: ScheduleConfig) -> Self {
        Self { lambda: cfg.lambda_init, cfg, updates: 0 }
    }

    pub fn step(&mut self, t: u64) -> f64 {
        self.lambda = schedule_step(&self.cfg, self.lambda, t);
        self.updates += 1;
        self.lambda
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub embed_dim: usize,
    pub env_hidden: usize,
    /// width of the encoded observation and of the attention output
    pub latent: usize,
    pub d_k: usize,
    pub dropout: f64,
    /// weight of the action-imitation term in the alignment loss
    pub w_c: f64,
    pub schedule: ScheduleConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { embed_dim: 8, env_hidden: 64, latent: 8, d_k: 8, dropout: 0.1, w_c: 1.0, schedule: ScheduleConfig::default() }
    }
}

/// Table row of a guidance decision: the decision's action index when
/// valid, the extra fallback row otherwise.
pub fn embed_index(d: Option<&GuidanceDecision>, nodes: usize) -> usize {
    match d {
        Some(d) if d.valid => d.action.index(nodes),
        _ => nodes,
    }
}

/// `(1 - lambda) * a + lambda * b`.
pub fn fuse(g_drl: &[f64], g_llm: &[f64], lambda: f64) -> Vec<f64> {
    g_drl.iter().zip(g_llm).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect()
}

/// Fusion parameters and the modules that read them.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub nodes: usize,
    pub f1: DenseNet,
    pub f2: DenseNet,
    pub att: Attention,
    pub o3: DenseNet,
    pub last: DenseNet,
    pub params: ParamSet,
}

/// Tape handles of one fused forward pass.
pub struct FusedOut {
    pub logits: Var,
    pub alpha: Var,
    pub h_t: Var,
    pub g_llm: Var,
    /// `O(h_t)` without dropout and detached; the consistency target
    pub target: Var,
}

impl FusionNet {
    pub fn new(nodes: usize, out_dim: usize, cfg: &FusionConfig, seed: u64) -> Result<Self, TrainError> {
        let obs = env::obs_width(nodes);
        let f1 = DenseNet::new("f1", &[obs, cfg.env_hidden, cfg.latent], &[Activation::Tanh, Activation::Tanh]);
        let f2 = DenseNet::new("f2", &[cfg.embed_dim, cfg.latent], &[Activation::Tanh]);
        let att = Attention::new("att", cfg.latent, cfg.latent, cfg.d_k, cfg.dropout)?;
        let o3 = DenseNet::new("o3", &[cfg.latent, out_dim], &[Activation::Tanh]);
        let last = DenseNet::new("phi_last", &[out_dim, out_dim], &[Activation::Tanh]);
        let mut r = rng::stream(seed, "fusion-init");
        let mut params = ParamSet::new();
        params.insert_xavier("embed", env::action_count(nodes), cfg.embed_dim, &mut r);
        params.insert_xavier("null", 1, cfg.latent, &mut r);
        f1.init(&mut params, &mut r);
        f2.init(&mut params, &mut r);
        att.init(&mut params, &mut r);
        o3.init(&mut params, &mut r);
        last.init(&mut params, &mut r);
        Ok(Self { nodes, f1, f2, att, o3, last, params })
    }

    pub fn table_rows(&self) -> usize {
        self.params.get("embed").rows
    }

    fn one_hot(&self, rows: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(rows.len(), self.table_rows());
        for (r, &k) in rows.iter().enumerate() {
            m.set(r, k, 1.0);
        }
        m
    }

    /// `f2(e(idx))`.
    pub fn embed_guidance(&self, idx: usize) -> Vec<f64> {
        let e = Matrix::row_vector(self.params.get("embed").row(idx));
        self.f2.forward(&self.params, &e).expect("embedding width").data
    }

    /// Encoder, attention and output head on a tape.
    pub fn distill_tape(&self, t: &mut Tape, fv: &[Var], obs: Var, rows: &[usize], drop: Option<Matrix>) -> (Var, Var, Var) {
        let (h_env, keys) = self.encode(t, fv, obs, rows);
        self.attend(t, fv, h_env, &keys, drop)
    }

    /// `(h_env, [h_llm, null])`.
    fn encode(&self, t: &mut Tape, fv: &[Var], obs: Var, rows: &[usize]) -> (Var, [Var; 2]) {
        let h_env = self.f1.forward_tape(t, &self.params, fv, obs);
        let oh = t.constant(self.one_hot(rows));
        let e = t.matmul(oh, fv[self.params.id("embed")]);
        let h_llm = self.f2.forward_tape(t, &self.params, fv, e);
        let null = t.broadcast_rows(fv[self.params.id("null")], rows.len());
        (h_env, [h_llm, null])
    }

    fn attend(&self, t: &mut Tape, fv: &[Var], h_env: Var, keys: &[Var; 2], drop: Option<Matrix>) -> (Var, Var, Var) {
        let (alpha, h_t) = self.att.forward_tape(t, &self.params, fv, h_env, keys, drop);
        let g = self.o3.forward_tape(t, &self.params, fv, h_t);
        (alpha, h_t, g)
    }

    /// `(alpha, h_t, g_llm)` for one observation without dropout.
    pub fn distill(&self, obs: &[f64], idx: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let fv = self.params.bind_frozen(&mut t);
        let x = t.constant(Matrix::row_vector(obs));
        let (a, h, g) = self.distill_tape(&mut t, &fv, x, &[idx], None);
        (t.value(a).data.clone(), t.value(h).data.clone(), t.value(g).data.clone())
    }

    /// Actor logits on fused features; `None` when every `lambda` is zero,
    /// in which case callers use the plain actor path.
    pub fn fused_logits(
        &self,
        t: &mut Tape,
        ac: &ActorCritic,
        av: &[Var],
        fv: &[Var],
        obs: &Matrix,
        rows: &[usize],
        lambda: &[f64],
        drop: Option<Matrix>,
    ) -> Option<FusedOut> {
        if lambda.iter().all(|&l| l == 0.0) {
            return None;
        }
        let x = t.constant(obs.clone());
        let g_drl = ac.trunk.forward_tape(t, &ac.actor_params, av, x);
        let (h_env, keys) = self.encode(t, fv, x, rows);
        let dropped = drop.is_some();
        let (alpha, h_t, g_llm) = self.attend(t, fv, h_env, &keys, drop);
        let clean = if dropped { self.attend(t, fv, h_env, &keys, None).2 } else { g_llm };
        let target = t.detach(clean);
        let proj = self.last.forward_tape(t, &self.params, fv, g_llm);
        let lam = t.constant(Matrix::column(lambda));
        let one_minus = t.constant(Matrix::column(&lambda.iter().map(|l| 1.0 - l).collect::<Vec<_>>()));
        let a = t.mul_col(g_drl, one_minus);
        let b = t.mul_col(proj, lam);
        let g_f = t.add(a, b);
        let logits = ac.head.forward_tape(t, &ac.actor_params, av, g_f);
        Some(FusedOut { logits, alpha, h_t, g_llm, target })
    }
}

/// Hybrid alignment loss terms: `(total, feat, act)`.
///
/// `feat` is the mean squared distance between `out` and `target`; `act` is
/// the masked cross-entropy of `logits` against `targets`, averaged over the
/// rows whose `weights` entry is 1.
pub fn hybrid_loss(
    t: &mut Tape,
    out: Var,
    target: Var,
    logits: Var,
    mask: Vec<bool>,
    targets: Vec<usize>,
    weights: &[f64],
    w_c: f64,
) -> (Var, Var, Var) {
    let feat = t.mse(out, target);
    let lp = t.masked_log_softmax(logits, mask);
    let sel = t.gather(lp, targets);
    let w = t.constant(Matrix::column(weights));
    let ws = t.mul(sel, w);
    let s = t.sum(ws);
    let n = weights.iter().sum::<f64>().max(1.0);
    let act = t.scale(s, -1.0 / n);
    let wact = t.scale(act, w_c);
    let total = t.add(feat, wact);
    (total, feat, act)
}

/// Loss handles for one minibatch.
pub struct LedrlLosses {
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    /// `None` when every row has `lambda == 0`
    pub align: Option<(Var, Var, Var)>,
    pub actor_vars: Vec<Var>,
    pub critic_vars: Vec<Var>,
    pub fusion_vars: Vec<Var>,
}

/// Builds policy, value and alignment losses on one tape.
pub fn build_losses(t: &mut Tape, ac: &ActorCritic, fusion: &FusionNet, mb: &Minibatch, ppo: &PpoConfig, w_c: f64) -> LedrlLosses {
    let av = ac.actor_params.bind(t);
    let cv = ac.critic_params.bind(t);
    let fv = fusion.params.bind(t);
    let gs: Vec<&GuidanceSample> = mb.samples.iter().map(|s| s.guidance.as_ref().expect("guided sample")).collect();
    let rows: Vec<usize> = gs.iter().map(|g| g.row).collect();
    let lambda: Vec<f64> = gs.iter().map(|g| g.lambda).collect();
    let drop = Matrix::from_rows(&gs.iter().map(|g| g.dropout.clone()).collect::<Vec<_>>());
    let fused = fusion.fused_logits(t, ac, &av, &fv, &mb.obs, &rows, &lambda, Some(drop));
    let (logits, align_parts) = match fused {
        Some(f) => (f.logits, Some(f)),
        None => {
            let x = t.constant(mb.obs.clone());
            let g = ac.trunk.forward_tape(t, &ac.actor_params, &av, x);
            (ac.head.forward_tape(t, &ac.actor_params, &av, g), None)
        }
    };
    let terms = actor_loss(t, logits, mb, ppo);
    let value = critic_loss(t, ac, &cv, mb, ppo);
    let align = align_parts.map(|f| {
        let targets: Vec<usize> = gs.iter().zip(&mb.actions).map(|(g, &a)| g.target.unwrap_or(a)).collect();
        let weights: Vec<f64> = gs.iter().map(|g| if g.target.is_some() { 1.0 } else { 0.0 }).collect();
        hybrid_loss(t, f.g_llm, f.target, f.logits, mb.mask.clone(), targets, &weights, w_c)
    });
    LedrlLosses { policy: terms.loss, value, entropy: terms.entropy, align, actor_vars: av, critic_vars: cv, fusion_vars: fv }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LedrlConfig {
    pub ppo: PpoConfig,
    pub fusion: FusionConfig,
    pub guidance: GuidanceConfig,
    /// query guidance during evaluation episodes
    pub eval_guidance: bool,
}

impl Default for LedrlConfig {
    fn default() -> Self {
        Self { ppo: PpoConfig::default(), fusion: FusionConfig::default(), guidance: GuidanceConfig::default(), eval_guidance: true }
    }
}

/// Guided policy for evaluation and latency runs.
pub struct LedrlPolicy {
    pub ac: ActorCritic,
    pub fusion: FusionNet,
    pub lambda: f64,
    pub guide: Option<Guide>,
    pub greedy: bool,
    pub rng: StreamRng,
    pub guidance_time: f64,
    pub network_time: f64,
    pub decisions: usize,
    pub query_latencies: Vec<f64>,
}

impl LedrlPolicy {
    pub fn new(ac: ActorCritic, fusion: FusionNet, lambda: f64, guide: Option<Guide>, greedy: bool, rng: StreamRng) -> Self {
        Self { ac, fusion, lambda, guide, greedy, rng, guidance_time: 0.0, network_time: 0.0, decisions: 0, query_latencies: Vec::new() }
    }

    /// Guidance rows for the deciding agents.
    fn guidance_rows(&mut self, env: &Env, agents: &[usize]) -> Vec<Option<GuidanceDecision>> {
        let t0 = Instant::now();
        let out = match self.guide.as_mut() {
            Some(g) if g.wants_query(env.slot()) => agents.iter().map(|&i| g.advise(env, i)).collect(),
            _ => vec![None; agents.len()],
        };
        self.guidance_time += t0.elapsed().as_secs_f64();
        self.query_latencies.extend(out.iter().flatten().map(|d: &GuidanceDecision| d.latency.as_secs_f64()));
        out
    }

    pub fn distributions(&mut self, env: &Env, agents: &[usize]) -> Vec<Vec<f64>> {
        if agents.is_empty() {
            return Vec::new();
        }
        let ds = self.guidance_rows(env, agents);
        let t0 = Instant::now();
        let rows: Vec<usize> = ds.iter().map(|d| embed_index(d.as_ref(), env.nodes())).collect();
        let probs = distributions(&self.ac, &self.fusion, env, agents, &rows, self.lambda, None);
        self.network_time += t0.elapsed().as_secs_f64();
        self.decisions += agents.len();
        probs
    }

    pub fn act(&mut self, env: &Env) -> Vec<Action> {
        let agents = mappo::deciding_agents(env);
        let probs = self.distributions(env, &agents);
        let mut actions = vec![Action::Idle; env.nodes()];
        for (p, &i) in probs.iter().zip(&agents) {
            let k = if self.greedy { argmax_index(p) } else { sample_index(p, &mut self.rng) };
            actions[i] = Action::from_index(k, env.nodes());
            if let Some(g) = self.guide.as_mut() {
                g.record_action(env.slot(), i, actions[i], &env.observations()[i].neighbor_ids);
            }
        }
        actions
    }
}

impl mappo::Controller for LedrlPolicy {
    fn act(&mut self, env: &Env) -> Vec<Action> {
        LedrlPolicy::act(self, env)
    }

    fn begin_episode(&mut self) {
        if let Some(g) = self.guide.as_mut() {
            g.new_episode();
        }
    }

    fn observe(&mut self, rec: &crate::env::TransitionRecord) {
        if let Some(g) = self.guide.as_mut() {
            g.observe(rec);
        }
    }

    fn split(&self) -> (f64, f64) {
        (self.guidance_time, self.network_time)
    }

    fn guidance_latencies(&self) -> &[f64] {
        &self.query_latencies
    }
}

/// Masked action distributions of the fused actor.
pub fn distributions(
    ac: &ActorCritic,
    fusion: &FusionNet,
    env: &Env,
    agents: &[usize],
    rows: &[usize],
    lambda: f64,
    drop: Option<Matrix>,
) -> Vec<Vec<f64>> {
    let x = Matrix::from_rows(&agents.iter().map(|&i| env.observations()[i].features.clone()).collect::<Vec<_>>());
    let z = if lambda == 0.0 {
        ac.logits_from(&ac.features(&x))
    } else {
        let mut t = Tape::new();
        let av = ac.actor_params.bind_frozen(&mut t);
        let fv = fusion.params.bind_frozen(&mut t);
        let lam = vec![lambda; agents.len()];
        let f = fusion.fused_logits(&mut t, ac, &av, &fv, &x, rows, &lam, drop).expect("lambda is positive");
        t.value(f.logits).clone()
    };
    agents.iter().enumerate().map(|(r, &i)| masked_probs(z.row(r), &env.masks()[i].bits)).collect()
}

pub struct LedrlTrainer {
    pub cfg: LedrlConfig,
    pub ac: ActorCritic,
    pub fusion: FusionNet,
    pub schedule: FusionSchedule,
    pub guide: Option<Guide>,
    pub seed: u64,
    pub iteration: usize,
    pub lr: f64,
    /// lambda after every schedule update
    pub lambda_trace: Vec<f64>,
    actor_opt: Adam,
    critic_opt: Adam,
    fusion_opt: Adam,
    rng_policy: StreamRng,
    rng_shuffle: StreamRng,
    rng_dropout: StreamRng,
    episodes_done: usize,
}

impl LedrlTrainer {
    /// `provider = None` trains without guidance queries; every decision
    /// then embeds as the fallback row.
    pub fn new(env: &Env, cfg: LedrlConfig, seed: u64, provider: Option<Box<dyn Provider>>) -> Result<Self, TrainError> {
        cfg.ppo.validate()?;
        cfg.fusion.schedule.validate().map_err(TrainError::Config)?;
        cfg.guidance.validate().map_err(TrainError::Config)?;
        let nodes = env.nodes();
        let ac = ActorCritic::new(nodes, &cfg.ppo, seed);
        let fusion = FusionNet::new(nodes, cfg.ppo.hidden, &cfg.fusion, seed)?;
        let guide = provider.map(|p| Guide::for_env(cfg.guidance.clone(), p, env));
        Ok(Self {
            actor_opt: Adam::new(cfg.ppo.lr, &ac.actor_params),
            critic_opt: Adam::new(cfg.ppo.lr, &ac.critic_params),
            fusion_opt: Adam::new(cfg.ppo.lr, &fusion.params),
            lr: cfg.ppo.lr,
            schedule: FusionSchedule::new(cfg.fusion.schedule.clone()),
            rng_policy: rng::stream(seed, rng::POLICY),
            rng_shuffle: rng::stream(seed, "shuffle"),
            rng_dropout: rng::stream(seed, "dropout"),
            cfg,
            ac,
            fusion,
            guide,
            seed,
            iteration: 0,
            lambda_trace: Vec::new(),
            episodes_done: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.schedule.lambda
    }

    /// Guided decisions, sampled actions and stored samples for one slot.
    pub fn rollout_step(&mut self, env: &Env, ep: &mut Episode, times: &mut (f64, f64)) -> Vec<Action> {
        let agents = mappo::deciding_agents(env);
        let n = env.nodes();
        let mut actions = vec![Action::Idle; n];
        let slot_index = ep.slot_rewards.len();
        let team = self.cfg.ppo.team_critic();
        if team {
            let st: Vec<f64> = env.observations().iter().flat_map(|o| o.features.iter().copied()).collect();
            ep.slot_values.push(self.ac.values(&Matrix::row_vector(&st))[0]);
            ep.slot_states.push(st);
        }
        if agents.is_empty() {
            return actions;
        }
        let t0 = Instant::now();
        let ds: Vec<Option<GuidanceDecision>> = match self.guide.as_mut() {
            Some(g) if g.wants_query(env.slot()) => agents.iter().map(|&i| g.advise(env, i)).collect(),
            _ => vec![None; agents.len()],
        };
        times.0 += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let lambda = self.schedule.lambda;
        let rows: Vec<usize> = ds.iter().map(|d| embed_index(d.as_ref(), n)).collect();
        let drop = self.fusion.att.dropout_mask(agents.len(), 2, &mut self.rng_dropout);
        let probs = distributions(&self.ac, &self.fusion, env, &agents, &rows, lambda, Some(drop.clone()));
        let x = Matrix::from_rows(&agents.iter().map(|&i| env.observations()[i].features.clone()).collect::<Vec<_>>());
        let values = if team { Vec::new() } else { self.ac.values(&x) };
        for (r, &i) in agents.iter().enumerate() {
            let p = &probs[r];
            let k = sample_index(p, &mut self.rng_policy);
            actions[i] = Action::from_index(k, n);
            if let Some(g) = self.guide.as_mut() {
                g.record_action(env.slot(), i, actions[i], &env.observations()[i].neighbor_ids);
            }
            let target = ds[r].as_ref().filter(|d| d.valid).map(|d| d.action.index(n));
            ep.push(Sample {
                agent: i,
                slot: env.slot(),
                obs: x.row(r).to_vec(),
                mask: env.masks()[i].bits.clone(),
                action: k,
                logp: p[k].ln(),
                probs: p.clone(),
                value: if team { ep.slot_values[slot_index] } else { values[r] },
                reward: 0.0,
                advantage: 0.0,
                ret: 0.0,
                slot_index,
                guidance: Some(GuidanceSample { row: rows[r], target, lambda, dropout: drop.row(r).to_vec() }),
            });
        }
        times.1 += t1.elapsed().as_secs_f64();
        actions
    }

    /// Runs one training episode with per-step schedule updates.
    pub fn run_episode(&mut self, env: &mut Env, seed: u64) -> Result<(Episode, (f64, f64)), TrainError> {
        env.set_drain(true);
        env.reset(seed)?;
        if let Some(g) = self.guide.as_mut() {
            g.new_episode();
        }
        let mut ep = Episode::default();
        let mut times = (0.0, 0.0);
        let mut t: u64 = 0;
        while !env.is_done() {
            let actions = self.rollout_step(env, &mut ep, &mut times);
            let rec = env.step(&actions)?;
            ep.record_step(&rec);
            if let Some(g) = self.guide.as_mut() {
                g.observe(&rec);
            }
            let l = self.schedule.step(t);
            self.lambda_trace.push(l);
            t += 1;
        }
        ep.generated = env.stats().generated;
        ep.assign_credit(&self.cfg.ppo)?;
        Ok((ep, times))
    }

    pub fn update(&mut self, eps: &[Episode]) -> Result<LossStats, TrainError> {
        let ppo = self.cfg.ppo.clone();
        let rows: Vec<(&Sample, &[f64])> = eps.iter().flat_map(|e| { let ppo = &ppo; e.samples.iter().map(move |s| (s, critic_row(e, s, ppo))) }).collect();
        let mut stats = LossStats::default();
        if rows.is_empty() {
            return Ok(stats);
        }
        let mut count = 0.0;
        let it = self.iteration;
        for _ in 0..ppo.epochs {
            for part in minibatch_indices(rows.len(), ppo.minibatches, &mut self.rng_shuffle) {
                let mb = Minibatch::build(&part.iter().map(|&k| rows[k]).collect::<Vec<_>>());
                let mut t = Tape::new();
                let l = build_losses(&mut t, &self.ac, &self.fusion, &mb, &ppo, self.cfg.fusion.w_c);
                stats.policy_loss += mappo::check(t.value(l.policy).item(), "policy loss", it)?;
                stats.value_loss += mappo::check(t.value(l.value).item(), "value loss", it)?;
                stats.entropy += t.value(l.entropy).item();
                // one objective L_pi + L_A for actor and fusion; the critic has its own loss
                let objective = match l.align {
                    Some((total, feat, act)) => {
                        stats.hybrid_loss += mappo::check(t.value(total).item(), "alignment loss", it)?;
                        stats.feat_loss += t.value(feat).item();
                        stats.act_loss += t.value(act).item();
                        t.add(l.policy, total)
                    }
                    None => l.policy,
                };
                let grads = t.backward(objective);
                let mut ga = self.ac.actor_params.collect(&l.actor_vars, &grads);
                let mut gc = self.ac.critic_params.collect(&l.critic_vars, &t.backward(l.value));
                tensor::clip_grad_norm(&mut ga, ppo.max_grad_norm);
                tensor::clip_grad_norm(&mut gc, ppo.max_grad_norm);
                self.actor_opt.step(&mut self.ac.actor_params, &ga);
                self.critic_opt.step(&mut self.ac.critic_params, &gc);
                if l.align.is_some() {
                    let mut gf = self.fusion.params.collect(&l.fusion_vars, &grads);
                    tensor::clip_grad_norm(&mut gf, ppo.max_grad_norm);
                    self.fusion_opt.step(&mut self.fusion.params, &gf);
                }
                count += 1.0;
                if !self.ac.actor_params.is_finite() || !self.ac.critic_params.is_finite() || !self.fusion.params.is_finite() {
                    return Err(TrainError::NonFinite { what: "parameters".into(), iteration: it });
                }
            }
        }
        for x in [
            &mut stats.policy_loss,
            &mut stats.value_loss,
            &mut stats.entropy,
            &mut stats.hybrid_loss,
            &mut stats.feat_loss,
            &mut stats.act_loss,
        ] {
            *x /= count;
        }
        Ok(stats)
    }

    /// Evaluation policy sharing this trainer's guide.
    pub fn policy(&mut self, greedy: bool, with_guidance: bool) -> LedrlPolicy {
        LedrlPolicy::new(
            self.ac.clone(),
            self.fusion.clone(),
            self.schedule.lambda,
            if with_guidance { self.guide.take() } else { None },
            greedy,
            rng::stream(self.seed, "eval-policy"),
        )
    }

    /// Returns a guide lent to a policy; guidance statistics from the
    /// evaluation run are discarded.
    pub fn restore(&mut self, mut pol: LedrlPolicy, stats: Option<crate::guidance::GuidanceStats>) {
        if let Some(mut g) = pol.guide.take() {
            if let Some(s) = stats {
                g.stats = s;
            }
            g.new_episode();
            self.guide = Some(g);
        }
    }

    pub fn evaluate(&mut self, env: &mut Env) -> Result<mappo::EvalResult, TrainError> {
        let saved = self.guide.as_ref().map(|g| g.stats.clone());
        let mut pol = self.policy(self.cfg.ppo.eval_greedy, self.cfg.eval_guidance);
        let seeds: Vec<u64> = (0..self.cfg.ppo.eval_episodes).map(|k| mappo::eval_seed(self.seed, k)).collect();
        env.set_drain(true);
        let res = mappo::evaluate_episodes(env, &seeds, &mut pol);
        self.restore(pol, saved);
        Ok(mappo::EvalResult::from_episodes(&res?))
    }

    pub fn train_iteration(&mut self, env: &mut Env) -> Result<IterationStats, TrainError> {
        let mut eps = Vec::new();
        let mut times = (0.0, 0.0);
        let trace_start = self.lambda_trace.len();
        let (q0, v0) = self.guide.as_ref().map_or((0, 0), |g| (g.stats.queries, g.stats.valid));
        for _ in 0..self.cfg.ppo.episodes_per_iteration {
            let seed = mappo::episode_seed(self.seed, self.episodes_done);
            self.episodes_done += 1;
            let (ep, t) = self.run_episode(env, seed)?;
            times.0 += t.0;
            times.1 += t.1;
            eps.push(ep);
        }
        mappo::normalize_batch(&mut eps, &self.cfg.ppo);
        let losses = self.update(&eps)?;
        self.iteration += 1;
        let ppo = &self.cfg.ppo;
        if ppo.lr_decay_interval > 0 && self.iteration.is_multiple_of(ppo.lr_decay_interval) {
            self.lr *= ppo.lr_decay;
            self.actor_opt.lr = self.lr;
            self.critic_opt.lr = self.lr;
            self.fusion_opt.lr = self.lr;
        }
        let eval = if ppo.eval_interval > 0 && self.iteration.is_multiple_of(ppo.eval_interval) { Some(self.evaluate(env)?) } else { None };
        let decisions: usize = eps.iter().map(|e| e.samples.len()).sum::<usize>().max(1);
        let mut s = mappo::summarize(self.iteration, &eps, losses, self.lr, eval, times.1 / decisions as f64);
        let trace = &self.lambda_trace[trace_start..];
        s.lambda = Some(self.schedule.lambda);
        s.lambda_min_seen = trace.iter().copied().reduce(f64::min);
        s.lambda_max_seen = trace.iter().copied().reduce(f64::max);
        s.guidance_time = times.0 / decisions as f64;
        s.guidance_validity = self.guide.as_ref().map(|g| {
            let q = g.stats.queries - q0;
            if q == 0 {
                0.0
            } else {
                (g.stats.valid - v0) as f64 / q as f64
            }
        });
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvConfig;
    use crate::guidance::ScriptedProvider;

    #[test]
    fn schedule_examples() {
        let cfg = ScheduleConfig { lambda_init: 0.5, beta: 1.0, eta: 0.9, ..Default::default() };
        assert!((schedule_step(&cfg, 0.3, 0) - 0.27).abs() < 1e-12);
        assert!((schedule_step(&cfg, 0.3, 100) - 0.27).abs() < 1e-12);
        assert_eq!(schedule_step(&cfg, cfg.lambda_min, 7), cfg.lambda_min);
        let slow = ScheduleConfig { gamma_decay: 0.99, ..cfg.clone() };
        assert!((schedule_step(&slow, 0.2, 3) - 0.198).abs() < 1e-12);
        // boosting the floor would undershoot it
        assert_eq!(schedule_step(&cfg, cfg.lambda_min, 50), cfg.lambda_min);
    }

    #[test]
    fn fuse_examples() {
        let a = [1.0, -2.0, 4.0];
        let b = [3.0, 2.0, 0.0];
        assert_eq!(fuse(&a, &b, 0.0), a.to_vec());
        assert_eq!(fuse(&a, &b, 1.0), b.to_vec());
        assert_eq!(fuse(&a, &b, 0.5), vec![2.0, 0.0, 2.0]);
    }

    fn net() -> FusionNet {
        FusionNet::new(4, 16, &FusionConfig::default(), 3).unwrap()
    }

    #[test]
    fn embedding_rows() {
        let f = net();
        assert_eq!(f.embed_guidance(1), f.embed_guidance(1));
        assert_ne!(f.embed_guidance(0), f.embed_guidance(1));
        let mut z = f.clone();
        for x in &mut z.params.get_mut("f2.w0").data {
            *x = 0.0;
        }
        let b = z.params.get("f2.b0").data.iter().map(|x| x.tanh()).collect::<Vec<_>>();
        assert_eq!(z.embed_guidance(0), b);
        assert_eq!(z.embed_guidance(4), b);
    }

    #[test]
    fn zero_values_give_residual_path() {
        let mut f = net();
        for x in &mut f.params.get_mut("att.wv").data {
            *x = 0.0;
        }
        let obs: Vec<f64> = (0..env::obs_width(4)).map(|k| (k as f64 * 0.13).sin().abs()).collect();
        let (_, h, g) = f.distill(&obs, 2);
        let h_env = f.f1.forward(&f.params, &Matrix::row_vector(&obs)).unwrap();
        assert_eq!(h, h_env.data);
        assert_eq!(g, f.o3.forward(&f.params, &h_env).unwrap().data);
    }

    #[test]
    fn hybrid_loss_examples() {
        let mut t = Tape::new();
        let out = t.constant(Matrix::row_vector(&[0.5, -1.0]));
        let same = t.constant(Matrix::row_vector(&[0.5, -1.0]));
        let logits = t.constant(Matrix::row_vector(&[0.0; 6]));
        let mask = vec![true, true, false, true, true, false];
        let (total, feat, act) = hybrid_loss(&mut t, out, same, logits, mask.clone(), vec![3], &[1.0], 1.0);
        assert_eq!(t.value(feat).item(), 0.0);
        assert!((t.value(act).item() - 4f64.ln()).abs() < 1e-12);
        assert!((t.value(total).item() - 4f64.ln()).abs() < 1e-12);
        let other = t.constant(Matrix::row_vector(&[1.5, 0.0]));
        let (total, feat, _) = hybrid_loss(&mut t, out, other, logits, mask, vec![3], &[1.0], 0.0);
        assert_eq!(t.value(total).item(), t.value(feat).item());
        assert_eq!(t.value(feat).item(), 1.0);
    }

    #[test]
    fn schedule_trace_stays_in_bounds_during_training() {
        let env_cfg = EnvConfig { nodes: 4, ..Default::default() };
        let mut env = Env::new(env_cfg, 1).unwrap();
        let cfg = LedrlConfig { ppo: PpoConfig { episodes_per_iteration: 1, eval_interval: 0, ..Default::default() }, ..Default::default() };
        let mut tr = LedrlTrainer::new(&env, cfg, 1, Some(Box::new(ScriptedProvider::new(1)))).unwrap();
        let s = tr.train_iteration(&mut env).unwrap();
        let sc = &tr.cfg.fusion.schedule;
        assert!(tr.lambda_trace.iter().all(|&l| l >= sc.lambda_min && l <= sc.cap()));
        assert_eq!(s.guidance_validity, Some(1.0));
        assert!(s.losses.hybrid_loss.is_finite() && s.losses.hybrid_loss > 0.0);
    }
}
