//! Multi-agent PPO with one actor and one critic shared by all agents.
//!
//! Only agents holding a task make a decision in a slot, so a rollout sample
//! is one `(agent, slot)` decision. Two credit schemes are available:
//! `team` credits the shared slot reward to every decision taken in that slot
//! and uses a critic over the concatenated team observation; `decision`
//! credits each decision with the final outcome of the task it routed and
//! runs GAE along each agent's own decision sequence with a local critic.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, Action, ActionMask, Env, EnvError, TransitionRecord};
use crate::rng::{self, StreamRng};
use crate::tensor::{self, Activation, Adam, DenseNet, Matrix, ParamSet, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Credit {
    Team,
    Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticInput {
    Team,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    /// multiplicative learning-rate decay applied every `lr_decay_interval` iterations
    pub lr_decay: f64,
    pub lr_decay_interval: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub critic_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: usize,
    pub episodes_per_iteration: usize,
    pub credit: Credit,
    /// only used with team credit; decision credit always uses a local critic
    pub critic_input: CriticInput,
    pub normalize_advantages: bool,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_greedy: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            lr: 4e-4,
            lr_decay: 0.99,
            lr_decay_interval: 4,
            epochs: 4,
            minibatches: 4,
            critic_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: 64,
            episodes_per_iteration: 2,
            credit: Credit::Decision,
            critic_input: CriticInput::Team,
            normalize_advantages: true,
            eval_interval: 4,
            eval_episodes: 2,
            eval_greedy: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.clip >= 0.0 && self.clip < 1.0) {
            return bad("clip must lie in [0,1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0,1]");
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.minibatches == 0 || self.hidden == 0 {
            return bad("lr, epochs, minibatches and hidden must be positive");
        }
        if self.episodes_per_iteration == 0 {
            return bad("need at least one episode per iteration");
        }
        Ok(())
    }

    pub fn team_critic(&self) -> bool {
        self.credit == Credit::Team && self.critic_input == CriticInput::Team
    }
}

/// `A_t = sum_l (gamma*lambda)^l delta_{t+l}` with
/// `delta_t = r_t + gamma V_{t+1} - V_t`; `values` carries a trailing bootstrap.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, TrainError> {
    if values.len() != rewards.len() + 1 {
        return Err(TrainError::Shape(format!("{} rewards need {} values, got {}", rewards.len(), rewards.len() + 1, values.len())));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for x in xs.iter_mut() {
        *x = (*x - mean) / sd;
    }
}

/// Shared actor (trunk `phi_DRL` plus linear head) and critic.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub obs_dim: usize,
    pub actions: usize,
    pub trunk: DenseNet,
    pub head: DenseNet,
    pub critic: DenseNet,
    pub actor_params: ParamSet,
    pub critic_params: ParamSet,
}

impl ActorCritic {
    pub fn new(nodes: usize, cfg: &PpoConfig, seed: u64) -> Self {
        let obs_dim = env::obs_width(nodes);
        let actions = env::action_count(nodes);
        let h = cfg.hidden;
        let trunk = DenseNet::new("phi_drl", &[obs_dim, h, h], &[Activation::Tanh, Activation::Tanh]);
        let head = DenseNet::new("actor_head", &[h, actions], &[Activation::Identity]);
        let critic_in = if cfg.team_critic() { obs_dim * nodes } else { obs_dim };
        let critic = DenseNet::new("critic", &[critic_in, h, h, 1], &[Activation::Tanh, Activation::Tanh, Activation::Identity]);
        let mut r = rng::stream(seed, rng::INIT);
        let mut actor_params = ParamSet::new();
        trunk.init(&mut actor_params, &mut r);
        head.init(&mut actor_params, &mut r);
        // small initial logits keep the starting policy close to uniform
        for x in &mut actor_params.get_mut("actor_head.w0").data {
            *x *= 0.01;
        }
        let mut critic_params = ParamSet::new();
        critic.init(&mut critic_params, &mut r);
        Self { obs_dim, actions, trunk, head, critic, actor_params, critic_params }
    }

    pub fn features(&self, obs: &Matrix) -> Matrix {
        self.trunk.forward(&self.actor_params, obs).expect("observation width")
    }

    pub fn logits_from(&self, g: &Matrix) -> Matrix {
        self.head.forward(&self.actor_params, g).expect("feature width")
    }

    pub fn values(&self, x: &Matrix) -> Vec<f64> {
        self.critic.forward(&self.critic_params, x).expect("critic width").data
    }
}

/// Masked action distribution of one row of logits.
pub fn masked_probs(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let lp = tensor::masked_log_softmax(&Matrix::row_vector(logits), mask);
    tensor::probs_from_logp(&lp).data
}

/// Inverse-CDF sample from a masked distribution; never returns a masked index.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = Some(i);
            if u < acc {
                return i;
            }
        }
    }
    last.expect("distribution has support")
}

pub fn argmax_index(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// One decision collected during a rollout.
#[derive(Debug, Clone)]
pub struct Sample {
    pub agent: usize,
    pub slot: u32,
    pub obs: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub logp: f64,
    /// full masked distribution the action was drawn from
    pub probs: Vec<f64>,
    pub value: f64,
    /// reward credited to this decision (decision credit)
    pub reward: f64,
    pub advantage: f64,
    pub ret: f64,
    /// index into the episode's slot table (team credit)
    pub slot_index: usize,
    /// guidance embedding row, blend weight and attention dropout mask
    pub guidance: Option<GuidanceSample>,
}

#[derive(Debug, Clone)]
pub struct GuidanceSample {
    pub row: usize,
    /// row of the guidance action when it is valid
    pub target: Option<usize>,
    pub lambda: f64,
    pub dropout: Vec<f64>,
}

/// Per-episode buffer.
#[derive(Debug, Clone, Default)]
pub struct Episode {
    pub samples: Vec<Sample>,
    pub slot_rewards: Vec<f64>,
    pub slot_values: Vec<f64>,
    pub slot_states: Vec<Vec<f64>>,
    pub success: usize,
    pub deadline_violations: usize,
    pub resolved: usize,
    pub generated: usize,
    pub ret: f64,
    index: HashMap<(u32, usize), usize>,
}

impl Episode {
    pub fn push(&mut self, s: Sample) {
        self.index.insert((s.slot, s.agent), self.samples.len());
        self.samples.push(s);
    }

    /// Books rewards and outcomes of one environment step.
    pub fn record_step(&mut self, rec: &TransitionRecord) {
        self.slot_rewards.push(rec.reward);
        self.ret += rec.reward;
        for r in &rec.resolutions {
            self.resolved += 1;
            match r.outcome {
                crate::model::Outcome::Success => self.success += 1,
                crate::model::Outcome::DeadlineViolation => self.deadline_violations += 1,
                crate::model::Outcome::ReliabilityViolation => {}
            }
            for d in &r.decisions {
                if let Some(&k) = self.index.get(&(d.slot, d.agent)) {
                    self.samples[k].reward += r.outcome.reward();
                }
            }
        }
    }

    pub fn success_rate(&self) -> f64 {
        crate::model::success_rate_from_counts(self.success, self.resolved)
    }

    /// Fills advantages and returns.
    pub fn assign_credit(&mut self, cfg: &PpoConfig) -> Result<(), TrainError> {
        match cfg.credit {
            Credit::Team => {
                let mut values = self.slot_values.clone();
                values.push(0.0);
                let adv = gae(&self.slot_rewards, &values, cfg.gamma, cfg.gae_lambda)?;
                for s in &mut self.samples {
                    s.advantage = adv[s.slot_index];
                    s.ret = adv[s.slot_index] + self.slot_values[s.slot_index];
                }
            }
            Credit::Decision => {
                let mut by_agent: HashMap<usize, Vec<usize>> = HashMap::new();
                for (k, s) in self.samples.iter().enumerate() {
                    by_agent.entry(s.agent).or_default().push(k);
                }
                for idx in by_agent.values() {
                    let rewards: Vec<f64> = idx.iter().map(|&k| self.samples[k].reward).collect();
                    let mut values: Vec<f64> = idx.iter().map(|&k| self.samples[k].value).collect();
                    values.push(0.0);
                    let adv = gae(&rewards, &values, cfg.gamma, cfg.gae_lambda)?;
                    for (j, &k) in idx.iter().enumerate() {
                        self.samples[k].advantage = adv[j];
                        self.samples[k].ret = adv[j] + self.samples[k].value;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Critic input for a sample.
pub fn critic_row<'a>(ep: &'a Episode, s: &'a Sample, cfg: &PpoConfig) -> &'a [f64] {
    if cfg.team_critic() {
        &ep.slot_states[s.slot_index]
    } else {
        &s.obs
    }
}

/// Stacked minibatch tensors.
pub struct Minibatch {
    pub obs: Matrix,
    pub critic_in: Matrix,
    pub mask: Vec<bool>,
    pub actions: Vec<usize>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub samples: Vec<Sample>,
}

impl Minibatch {
    pub fn build(rows: &[(&Sample, &[f64])]) -> Self {
        let obs = Matrix::from_rows(&rows.iter().map(|(s, _)| s.obs.clone()).collect::<Vec<_>>());
        let critic_in = Matrix::from_rows(&rows.iter().map(|(_, c)| c.to_vec()).collect::<Vec<_>>());
        Self {
            obs,
            critic_in,
            mask: rows.iter().flat_map(|(s, _)| s.mask.iter().copied()).collect(),
            actions: rows.iter().map(|(s, _)| s.action).collect(),
            old_logp: rows.iter().map(|(s, _)| s.logp).collect(),
            advantages: rows.iter().map(|(s, _)| s.advantage).collect(),
            returns: rows.iter().map(|(s, _)| s.ret).collect(),
            samples: rows.iter().map(|(s, _)| (*s).clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Terms of the actor objective built on a tape.
pub struct ActorTerms {
    pub loss: Var,
    pub surrogate: Var,
    pub entropy: Var,
}

/// `-(mean clipped surrogate + beta * mean masked entropy)` from logits.
pub fn actor_loss(t: &mut Tape, logits: Var, mb: &Minibatch, cfg: &PpoConfig) -> ActorTerms {
    let lp = t.masked_log_softmax(logits, mb.mask.clone());
    let sel = t.gather(lp, mb.actions.clone());
    let old = t.constant(Matrix::column(&mb.old_logp));
    let d = t.sub(sel, old);
    let rho = t.exp(d);
    let surr = t.ppo_clip(rho, mb.advantages.clone(), cfg.clip);
    let surrogate = t.mean(surr);
    let ent = t.masked_entropy(logits, mb.mask.clone());
    let entropy = t.mean(ent);
    let be = t.scale(entropy, cfg.entropy_coef);
    let obj = t.add(surrogate, be);
    let loss = t.scale(obj, -1.0);
    ActorTerms { loss, surrogate, entropy }
}

/// `critic_coef * mean (V - R)^2`.
pub fn critic_loss(t: &mut Tape, ac: &ActorCritic, vars: &[Var], mb: &Minibatch, cfg: &PpoConfig) -> Var {
    let x = t.constant(mb.critic_in.clone());
    let v = ac.critic.forward_tape(t, &ac.critic_params, vars, x);
    let r = t.constant(Matrix::column(&mb.returns));
    let m = t.mse(v, r);
    t.scale(m, cfg.critic_coef)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub hybrid_loss: f64,
    pub feat_loss: f64,
    pub act_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub episodes: usize,
    pub samples: usize,
    pub train_success_rate: f64,
    pub train_success: usize,
    pub train_deadline: usize,
    pub train_resolved: usize,
    pub train_return: f64,
    pub losses: LossStats,
    pub lr: f64,
    pub eval_success_rate: Option<f64>,
    /// pooled (success, resolved) over the evaluation episodes
    pub eval_counts: Option<(usize, usize)>,
    /// per-decision network time in seconds during rollouts
    pub decision_time: f64,
    /// fusion weight at the end of the iteration
    pub lambda: Option<f64>,
    pub lambda_min_seen: Option<f64>,
    pub lambda_max_seen: Option<f64>,
    pub guidance_validity: Option<f64>,
    /// per-decision guidance time in seconds during rollouts
    pub guidance_time: f64,
}

/// Seed of training episode `k` for run seed `seed`.
pub fn episode_seed(seed: u64, k: usize) -> u64 {
    rng::stream_key(seed, "episode") ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seed of evaluation episode `k`; shared by every policy on a run seed.
pub fn eval_seed(seed: u64, k: usize) -> u64 {
    rng::stream_key(seed, "eval") ^ (k as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Agents that must decide this slot.
pub fn deciding_agents(env: &Env) -> Vec<usize> {
    (0..env.nodes()).filter(|&i| !env.masks()[i].idle()).collect()
}

fn stack_obs(env: &Env, agents: &[usize]) -> Matrix {
    Matrix::from_rows(&agents.iter().map(|&i| env.observations()[i].features.clone()).collect::<Vec<_>>())
}

fn team_state(env: &Env) -> Vec<f64> {
    env.observations().iter().flat_map(|o| o.features.iter().copied()).collect()
}

/// Plain MAPPO policy usable for evaluation.
pub struct MappoPolicy {
    pub ac: ActorCritic,
    pub greedy: bool,
    pub rng: StreamRng,
}

impl MappoPolicy {
    /// Masked action distributions for the deciding agents.
    pub fn distributions(&self, env: &Env, agents: &[usize]) -> Vec<Vec<f64>> {
        if agents.is_empty() {
            return Vec::new();
        }
        let g = self.ac.features(&stack_obs(env, agents));
        let z = self.ac.logits_from(&g);
        agents.iter().enumerate().map(|(r, &i)| masked_probs(z.row(r), &env.masks()[i].bits)).collect()
    }

    pub fn act(&mut self, env: &Env) -> Vec<Action> {
        let agents = deciding_agents(env);
        let probs = self.distributions(env, &agents);
        let mut actions = vec![Action::Idle; env.nodes()];
        for (p, &i) in probs.iter().zip(&agents) {
            let k = if self.greedy { argmax_index(p) } else { sample_index(p, &mut self.rng) };
            actions[i] = Action::from_index(k, env.nodes());
        }
        actions
    }
}

/// Anything that picks a joint action each slot.
pub trait Controller: Send {
    fn act(&mut self, env: &Env) -> Vec<Action>;
    /// Called after every reset.
    fn begin_episode(&mut self) {}
    /// Called with every transition.
    fn observe(&mut self, _rec: &TransitionRecord) {}
    /// Seconds spent in (guidance, network) so far.
    fn split(&self) -> (f64, f64) {
        (0.0, 0.0)
    }
    /// Latency of every guidance query so far, in seconds.
    fn guidance_latencies(&self) -> &[f64] {
        &[]
    }
}

impl Controller for MappoPolicy {
    fn act(&mut self, env: &Env) -> Vec<Action> {
        MappoPolicy::act(self, env)
    }
}

/// Runs whole episodes of a controller; per-episode `(success rate, return, stats)`.
pub fn evaluate_episodes(env: &mut Env, seeds: &[u64], ctl: &mut dyn Controller) -> Result<Vec<(f64, f64, crate::env::EpisodeStats)>, TrainError> {
    let mut out = Vec::with_capacity(seeds.len());
    for &s in seeds {
        env.reset(s)?;
        ctl.begin_episode();
        let mut ret = 0.0;
        while !env.is_done() {
            let actions = ctl.act(env);
            let rec = env.step(&actions)?;
            ret += rec.reward;
            ctl.observe(&rec);
        }
        out.push((env.stats().success_rate(), ret, env.stats()));
    }
    Ok(out)
}

/// Evaluation outcome: mean per-episode success rate plus pooled counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub success_rate: f64,
    pub success: usize,
    pub resolved: usize,
}

impl EvalResult {
    pub fn from_episodes(res: &[(f64, f64, crate::env::EpisodeStats)]) -> Self {
        Self {
            success_rate: res.iter().map(|r| r.0).sum::<f64>() / res.len().max(1) as f64,
            success: res.iter().map(|r| r.2.success).sum(),
            resolved: res.iter().map(|r| r.2.resolved()).sum(),
        }
    }
}

pub struct MappoTrainer {
    pub cfg: PpoConfig,
    pub ac: ActorCritic,
    pub seed: u64,
    pub iteration: usize,
    pub lr: f64,
    actor_opt: Adam,
    critic_opt: Adam,
    rng_policy: StreamRng,
    rng_shuffle: StreamRng,
    episodes_done: usize,
}

impl MappoTrainer {
    pub fn new(nodes: usize, cfg: PpoConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let ac = ActorCritic::new(nodes, &cfg, seed);
        Ok(Self {
            actor_opt: Adam::new(cfg.lr, &ac.actor_params),
            critic_opt: Adam::new(cfg.lr, &ac.critic_params),
            lr: cfg.lr,
            rng_policy: rng::stream(seed, rng::POLICY),
            rng_shuffle: rng::stream(seed, "shuffle"),
            cfg,
            ac,
            seed,
            iteration: 0,
            episodes_done: 0,
        })
    }

    pub fn policy(&self, greedy: bool) -> MappoPolicy {
        MappoPolicy { ac: self.ac.clone(), greedy, rng: rng::stream(self.seed, "eval-policy") }
    }

    /// Per-step distributions and sampled actions from the training stream.
    pub fn rollout_step(&mut self, env: &Env, ep: &mut Episode) -> Vec<Action> {
        let agents = deciding_agents(env);
        let mut actions = vec![Action::Idle; env.nodes()];
        let slot_index = ep.slot_rewards.len();
        if self.cfg.team_critic() {
            let st = team_state(env);
            ep.slot_values.push(self.ac.values(&Matrix::row_vector(&st))[0]);
            ep.slot_states.push(st);
        }
        if agents.is_empty() {
            return actions;
        }
        let x = stack_obs(env, &agents);
        let z = self.ac.logits_from(&self.ac.features(&x));
        let values = if self.cfg.team_critic() { Vec::new() } else { self.ac.values(&x) };
        for (r, &i) in agents.iter().enumerate() {
            let mask = &env.masks()[i].bits;
            let p = masked_probs(z.row(r), mask);
            let k = sample_index(&p, &mut self.rng_policy);
            actions[i] = Action::from_index(k, env.nodes());
            ep.push(Sample {
                agent: i,
                slot: env.slot(),
                obs: x.row(r).to_vec(),
                mask: mask.clone(),
                action: k,
                logp: p[k].ln(),
                probs: p.clone(),
                value: if self.cfg.team_critic() { ep.slot_values[slot_index] } else { values[r] },
                reward: 0.0,
                advantage: 0.0,
                ret: 0.0,
                slot_index,
                guidance: None,
            });
        }
        actions
    }

    pub fn collect(&mut self, env: &mut Env) -> Result<(Vec<Episode>, f64), TrainError> {
        let mut eps = Vec::with_capacity(self.cfg.episodes_per_iteration);
        let mut net_time = 0.0;
        let mut decisions = 0usize;
        for _ in 0..self.cfg.episodes_per_iteration {
            env.set_drain(true);
            env.reset(episode_seed(self.seed, self.episodes_done))?;
            self.episodes_done += 1;
            let mut ep = Episode::default();
            while !env.is_done() {
                let t0 = std::time::Instant::now();
                let before = ep.samples.len();
                let actions = self.rollout_step(env, &mut ep);
                net_time += t0.elapsed().as_secs_f64();
                decisions += ep.samples.len() - before;
                let rec = env.step(&actions)?;
                ep.record_step(&rec);
            }
            ep.generated = env.stats().generated;
            ep.assign_credit(&self.cfg)?;
            eps.push(ep);
        }
        Ok((eps, if decisions > 0 { net_time / decisions as f64 } else { 0.0 }))
    }

    pub fn update(&mut self, eps: &[Episode]) -> Result<LossStats, TrainError> {
        let mut rows: Vec<(&Sample, &[f64])> = Vec::new();
        for ep in eps {
            for s in &ep.samples {
                rows.push((s, critic_row(ep, s, &self.cfg)));
            }
        }
        update_rows(&self.cfg, &mut self.ac, &mut self.actor_opt, &mut self.critic_opt, &mut self.rng_shuffle, rows, self.iteration)
    }

    pub fn evaluate(&self, env: &mut Env) -> Result<EvalResult, TrainError> {
        let mut pol = self.policy(self.cfg.eval_greedy);
        let seeds: Vec<u64> = (0..self.cfg.eval_episodes).map(|k| eval_seed(self.seed, k)).collect();
        env.set_drain(true);
        Ok(EvalResult::from_episodes(&evaluate_episodes(env, &seeds, &mut pol)?))
    }

    /// Collect, update, decay the learning rate and evaluate on schedule.
    pub fn train_iteration(&mut self, env: &mut Env) -> Result<IterationStats, TrainError> {
        let (mut eps, decision_time) = self.collect(env)?;
        normalize_batch(&mut eps, &self.cfg);
        let losses = self.update(&eps)?;
        self.iteration += 1;
        if self.cfg.lr_decay_interval > 0 && self.iteration.is_multiple_of(self.cfg.lr_decay_interval) {
            self.lr *= self.cfg.lr_decay;
            self.actor_opt.lr = self.lr;
            self.critic_opt.lr = self.lr;
        }
        let eval = if self.cfg.eval_interval > 0 && self.iteration.is_multiple_of(self.cfg.eval_interval) {
            Some(self.evaluate(env)?)
        } else {
            None
        };
        Ok(summarize(self.iteration, &eps, losses, self.lr, eval, decision_time))
    }
}

pub fn summarize(iteration: usize, eps: &[Episode], losses: LossStats, lr: f64, eval: Option<EvalResult>, decision_time: f64) -> IterationStats {
    let success: usize = eps.iter().map(|e| e.success).sum();
    let resolved: usize = eps.iter().map(|e| e.resolved).sum();
    IterationStats {
        iteration,
        episodes: eps.len(),
        samples: eps.iter().map(|e| e.samples.len()).sum(),
        train_success_rate: crate::model::success_rate_from_counts(success, resolved),
        train_success: success,
        train_deadline: eps.iter().map(|e| e.deadline_violations).sum(),
        train_resolved: resolved,
        train_return: eps.iter().map(|e| e.ret).sum::<f64>() / eps.len().max(1) as f64,
        losses,
        lr,
        eval_success_rate: eval.map(|e| e.success_rate),
        eval_counts: eval.map(|e| (e.success, e.resolved)),
        decision_time,
        lambda: None,
        lambda_min_seen: None,
        lambda_max_seen: None,
        guidance_validity: None,
        guidance_time: 0.0,
    }
}

/// Batch-wide advantage normalisation.
pub fn normalize_batch(eps: &mut [Episode], cfg: &PpoConfig) {
    if !cfg.normalize_advantages {
        return;
    }
    let mut all: Vec<f64> = eps.iter().flat_map(|e| e.samples.iter().map(|s| s.advantage)).collect();
    normalize(&mut all);
    let mut k = 0;
    for e in eps.iter_mut() {
        for s in &mut e.samples {
            s.advantage = all[k];
            k += 1;
        }
    }
}

pub(crate) fn check(x: f64, what: &str, iteration: usize) -> Result<f64, TrainError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TrainError::NonFinite { what: what.to_string(), iteration })
    }
}

/// Shuffled minibatch index groups.
pub fn minibatch_indices<R: Rng + ?Sized>(n: usize, parts: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let parts = parts.clamp(1, n.max(1));
    let size = n.div_ceil(parts);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

fn update_rows(
    cfg: &PpoConfig,
    ac: &mut ActorCritic,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    rng: &mut StreamRng,
    rows: Vec<(&Sample, &[f64])>,
    iteration: usize,
) -> Result<LossStats, TrainError> {
    let mut stats = LossStats::default();
    let mut count = 0.0;
    if rows.is_empty() {
        return Ok(stats);
    }
    for _ in 0..cfg.epochs {
        for part in minibatch_indices(rows.len(), cfg.minibatches, rng) {
            let mb = Minibatch::build(&part.iter().map(|&k| rows[k]).collect::<Vec<_>>());
            let mut t = Tape::new();
            let av = ac.actor_params.bind(&mut t);
            let cv = ac.critic_params.bind(&mut t);
            let x = t.constant(mb.obs.clone());
            let g = ac.trunk.forward_tape(&mut t, &ac.actor_params, &av, x);
            let z = ac.head.forward_tape(&mut t, &ac.actor_params, &av, g);
            let terms = actor_loss(&mut t, z, &mb, cfg);
            let vl = critic_loss(&mut t, ac, &cv, &mb, cfg);
            stats.policy_loss += check(t.value(terms.loss).item(), "policy loss", iteration)?;
            stats.value_loss += check(t.value(vl).item(), "value loss", iteration)?;
            stats.entropy += t.value(terms.entropy).item();
            count += 1.0;
            let mut ga = ac.actor_params.collect(&av, &t.backward(terms.loss));
            let mut gc = ac.critic_params.collect(&cv, &t.backward(vl));
            tensor::clip_grad_norm(&mut ga, cfg.max_grad_norm);
            tensor::clip_grad_norm(&mut gc, cfg.max_grad_norm);
            actor_opt.step(&mut ac.actor_params, &ga);
            critic_opt.step(&mut ac.critic_params, &gc);
            if !ac.actor_params.is_finite() || !ac.critic_params.is_finite() {
                return Err(TrainError::NonFinite { what: "parameters".into(), iteration });
            }
        }
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.entropy /= count;
    Ok(stats)
}

/// Applies one PPO pass over prepared rows; exposed for tests and the
/// guided trainer.
pub fn ppo_update(
    cfg: &PpoConfig,
    ac: &mut ActorCritic,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    rng: &mut StreamRng,
    rows: Vec<(&Sample, &[f64])>,
    iteration: usize,
) -> Result<LossStats, TrainError> {
    update_rows(cfg, ac, actor_opt, critic_opt, rng, rows, iteration)
}

/// Adam optimisers matching an actor-critic's parameter sets.
pub fn optimizers(ac: &ActorCritic, lr: f64) -> (Adam, Adam) {
    (Adam::new(lr, &ac.actor_params), Adam::new(lr, &ac.critic_params))
}

/// Valid-action mask helper for samples.
pub fn mask_bits(m: &ActionMask) -> Vec<bool> {
    m.bits.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvConfig;

    #[test]
    fn gae_examples() {
        let a = gae(&[1.0, 0.0], &[0.5, 0.2, 0.0], 0.99, 0.95).unwrap();
        assert!((a[0] - 0.50990).abs() < 1e-9, "{a:?}");
        assert!((a[1] + 0.2).abs() < 1e-12);
        let one_step = gae(&[1.0, -1.0, 0.5], &[0.1, 0.2, 0.3, 0.4], 0.9, 0.0).unwrap();
        assert!((one_step[1] - (-1.0 + 0.9 * 0.3 - 0.2)).abs() < 1e-12);
        assert!(gae(&[0.0; 3], &[0.0; 4], 0.99, 0.95).unwrap().iter().all(|&x| x == 0.0));
        assert!(gae(&[0.0; 3], &[0.0; 3], 0.99, 0.95).is_err());
    }

    #[test]
    fn gae_lambda_one_telescopes() {
        let r: Vec<f64> = (0..10).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let v: Vec<f64> = (0..11).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = 0.97;
        let a = gae(&r, &v, g, 1.0).unwrap();
        for t in 0..10 {
            let mut ret = 0.0;
            for (l, rr) in r[t..].iter().enumerate() {
                ret += g.powi(l as i32) * rr;
            }
            ret += g.powi((10 - t) as i32) * v[10];
            assert!((a[t] - (ret - v[t])).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_sampling_never_hits_masked_actions() {
        let mask = vec![true, false, true, false, false];
        let p = masked_probs(&[0.0, 50.0, -1.0, 30.0, 2.0], &mask);
        assert_eq!((p[1], p[3], p[4]), (0.0, 0.0, 0.0));
        let mut r = rng::stream(0, rng::POLICY);
        for _ in 0..100_000 {
            let k = sample_index(&p, &mut r);
            assert!(mask[k]);
        }
    }

    #[test]
    fn zero_advantage_and_entropy_leave_actor_unchanged() {
        let cfg = PpoConfig { entropy_coef: 0.0, normalize_advantages: false, ..Default::default() };
        let mut tr = MappoTrainer::new(3, cfg.clone(), 1).unwrap();
        let mut env = Env::new(EnvConfig { nodes: 3, ..Default::default() }, 1).unwrap();
        let (mut eps, _) = tr.collect(&mut env).unwrap();
        for e in &mut eps {
            for s in &mut e.samples {
                s.advantage = 0.0;
            }
        }
        let before = tr.ac.actor_params.clone();
        let critic_before = tr.ac.critic_params.clone();
        tr.update(&eps).unwrap();
        assert_eq!(tr.ac.actor_params, before, "actor must not move");
        assert_ne!(tr.ac.critic_params, critic_before);
    }

    #[test]
    fn positive_advantage_raises_chosen_probability() {
        let cfg = PpoConfig { entropy_coef: 0.0, normalize_advantages: false, epochs: 1, minibatches: 1, ..Default::default() };
        let mut tr = MappoTrainer::new(3, cfg, 2).unwrap();
        let mut env = Env::new(EnvConfig { nodes: 3, ..Default::default() }, 2).unwrap();
        let (mut eps, _) = tr.collect(&mut env).unwrap();
        let s0 = eps[0].samples[0].clone();
        eps.iter_mut().for_each(|e| e.samples.retain(|s| s.obs == s0.obs && s.action == s0.action));
        eps[0].samples[0].advantage = 1.0;
        let prob = |ac: &ActorCritic| {
            let z = ac.logits_from(&ac.features(&Matrix::row_vector(&s0.obs)));
            masked_probs(z.row(0), &s0.mask)[s0.action]
        };
        let before = prob(&tr.ac);
        tr.update(&eps[..1]).unwrap();
        assert!(prob(&tr.ac) > before);
    }

    #[test]
    fn zero_clip_objective_never_rises() {
        let cfg = PpoConfig { clip: 0.0, epochs: 1, minibatches: 1, entropy_coef: 0.0, ..Default::default() };
        let mut tr = MappoTrainer::new(3, cfg, 2).unwrap();
        let mut env = Env::new(EnvConfig { nodes: 3, ..Default::default() }, 2).unwrap();
        let (mut eps, _) = tr.collect(&mut env).unwrap();
        normalize_batch(&mut eps, &tr.cfg);
        let first = -tr.update(&eps).unwrap().policy_loss;
        let mean_adv = eps.iter().flat_map(|e| e.samples.iter().map(|s| s.advantage)).sum::<f64>() / tr.cfg.epochs as f64;
        let n = eps.iter().map(|e| e.samples.len()).sum::<usize>() as f64;
        assert!((first - mean_adv / n).abs() < 1e-9, "ratio 1 on the first pass");
        for _ in 0..3 {
            let next = -tr.update(&eps).unwrap().policy_loss;
            assert!(next <= first + 1e-12, "{first} {next}");
        }
    }

    #[test]
    fn decision_credit_sums_outcomes() {
        let cfg = PpoConfig { episodes_per_iteration: 1, ..Default::default() };
        let mut tr = MappoTrainer::new(4, cfg, 3).unwrap();
        let mut env = Env::new(EnvConfig { nodes: 4, ..Default::default() }, 3).unwrap();
        let (eps, _) = tr.collect(&mut env).unwrap();
        let ep = &eps[0];
        assert_eq!(ep.resolved, ep.generated);
        assert!(ep.samples.iter().all(|s| s.reward.abs() == 1.0));
        assert!((ep.ret - ep.slot_rewards.iter().sum::<f64>()).abs() < 1e-12);
    }
}
