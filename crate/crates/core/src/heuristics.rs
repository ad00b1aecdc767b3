//! Non-learning baselines: RATC, AGSP-lite, greedy, random and local-only.
//!
//! All of them act on the agent's own observation only. Neighbour queues are
//! read from the neighbour block; a neighbour's CPU and failure rates are
//! unknown to the agent and are assumed equal to its own.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionMask, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgspConfig {
    pub population: usize,
    pub generations: usize,
    pub init_temp: f64,
    pub cooling: f64,
}

impl Default for AgspConfig {
    fn default() -> Self {
        Self { population: 8, generations: 10, init_temp: 1.0, cooling: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    pub ratc_sample_k: usize,
    pub agsp: AgspConfig,
    pub w_delay: f64,
    pub w_reliability: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self { ratc_sample_k: 2, agsp: AgspConfig::default(), w_delay: 0.5, w_reliability: 0.5 }
    }
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.ratc_sample_k == 0 {
            return Err("ratc_sample_k must be at least 1".into());
        }
        if !(self.agsp.cooling > 0.0 && self.agsp.cooling < 1.0) {
            return Err("agsp cooling must lie in (0,1)".into());
        }
        if self.agsp.population == 0 || self.agsp.generations == 0 {
            return Err("agsp population and generations must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub delay: f64,
    pub reliability: f64,
}

/// Predicted end-to-end delay and reliability of `action` for the task at
/// the head of the agent's queue, built from the observation alone.
pub fn predict(obs: &Obs, action: Action) -> Option<Estimate> {
    let s = &obs.scales;
    let node = obs.node_block();
    let task = obs.task_block();
    let cpu = node[3] * s.cpu_max;
    if cpu <= 0.0 {
        return None;
    }
    let fail = node[1] * s.sw_fail_max + node[2] * s.hw_fail_max;
    let cycles = task[1] * s.cycles_max;
    let size = task[0] * s.size_max;
    let exec = cycles / cpu;
    match action {
        Action::Local => Some(Estimate { delay: node[4] * s.queue_time() + exec, reliability: (-fail * exec).exp() }),
        Action::Forward(k) => {
            let nb = obs.neighbor(k);
            if nb.alive == 0.0 || nb.rate <= 0.0 {
                return None;
            }
            let rate = nb.rate * s.rate_max;
            let beta = nb.fail * s.link_fail_max;
            let tt = size / rate;
            // the task is re-decided at the first slot boundary after it lands
            let landed = node[5] * s.queue_time() + tt;
            let redecide = (landed / s.slot_duration).ceil().max(1.0) * s.slot_duration;
            Some(Estimate {
                delay: redecide + nb.load * s.queue_time() + exec,
                reliability: (-fail * exec - beta * tt).exp(),
            })
        }
        Action::Idle => None,
    }
}

type Obs = Observation;

fn remaining_deadline(obs: &Obs) -> f64 {
    obs.task_block()[2] * obs.scales.deadline_max
}

fn feasible(obs: &Obs, e: &Estimate) -> bool {
    e.delay <= remaining_deadline(obs) && e.reliability >= obs.scales.reliability_floor
}

fn target_id(obs: &Obs, a: Action) -> usize {
    match a {
        Action::Forward(k) => obs.neighbor_ids[k],
        _ => obs.agent,
    }
}

/// Valid non-idle actions, local first, forwards by ascending node id.
fn candidates(obs: &Obs, mask: &ActionMask) -> Vec<Action> {
    let mut out = Vec::new();
    if mask.local() {
        out.push(Action::Local);
    }
    let mut fwd: Vec<usize> = mask.forward_slots();
    fwd.sort_by_key(|&k| obs.neighbor_ids[k]);
    out.extend(fwd.into_iter().map(Action::Forward));
    out
}

fn fallback(mask: &ActionMask) -> Action {
    if mask.idle() {
        Action::Idle
    } else {
        Action::Local
    }
}

pub fn local_only(_obs: &Obs, mask: &ActionMask) -> Action {
    fallback(mask)
}

pub fn random_valid<R: Rng + ?Sized>(mask: &ActionMask, rng: &mut R) -> Action {
    if mask.idle() {
        return Action::Idle;
    }
    let valid = mask.valid_indices();
    match valid.choose(rng) {
        Some(&i) => Action::from_index(i, mask.nodes()),
        None => Action::Local,
    }
}

/// Valid action with the smallest predicted delay; ties go to the lower node id.
pub fn greedy_min_delay(obs: &Obs, mask: &ActionMask) -> Action {
    if mask.idle() {
        return Action::Idle;
    }
    candidates(obs, mask)
        .into_iter()
        .filter_map(|a| predict(obs, a).map(|e| (a, e)))
        .min_by(|(a, x), (b, y)| x.delay.total_cmp(&y.delay).then(target_id(obs, *a).cmp(&target_id(obs, *b))))
        .map_or(Action::Local, |(a, _)| a)
}

/// Sample up to `k` valid neighbours, score them together with local
/// execution and keep the best.
pub fn ratc_decide<R: Rng + ?Sized>(obs: &Obs, mask: &ActionMask, k: usize, rng: &mut R) -> Action {
    if mask.idle() {
        return Action::Idle;
    }
    let all = candidates(obs, mask);
    let mut pool: Vec<Action> = all.iter().copied().filter(|a| matches!(a, Action::Forward(_))).collect();
    pool.shuffle(rng);
    pool.truncate(k);
    if mask.local() {
        pool.push(Action::Local);
    }
    pool.into_iter()
        .filter_map(|a| predict(obs, a).map(|e| (a, e)))
        .min_by(|(a, x), (b, y)| {
            feasible(obs, y)
                .cmp(&feasible(obs, x))
                .then(x.delay.total_cmp(&y.delay))
                .then(target_id(obs, *a).cmp(&target_id(obs, *b)))
        })
        .map_or(Action::Local, |(a, _)| a)
}

pub fn agsp_fitness(obs: &Obs, e: &Estimate, cfg: &HeuristicConfig) -> f64 {
    let d = remaining_deadline(obs);
    let slack = if d > 0.0 { (1.0 - e.delay / d).max(0.0) } else { 0.0 };
    cfg.w_delay * slack + cfg.w_reliability * e.reliability
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgspRun {
    pub action: Action,
    pub fitness: f64,
    /// best-seen fitness after each generation
    pub best_trace: Vec<f64>,
}

/// Population of simulated-annealing walks over the candidate set.
pub fn agsp_search<R: Rng + ?Sized>(obs: &Obs, mask: &ActionMask, cfg: &HeuristicConfig, rng: &mut R) -> AgspRun {
    let scored: Vec<(Action, f64)> = candidates(obs, mask)
        .into_iter()
        .filter_map(|a| predict(obs, a).map(|e| (a, agsp_fitness(obs, &e, cfg))))
        .collect();
    if scored.is_empty() {
        return AgspRun { action: fallback(mask), fitness: f64::NEG_INFINITY, best_trace: Vec::new() };
    }
    let n = scored.len();
    let better = |i: usize, j: usize| scored[i].1 > scored[j].1 || (scored[i].1 == scored[j].1 && i < j);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut walkers: Vec<usize> = (0..cfg.agsp.population).map(|p| order[p % n]).collect();
    let mut best = walkers[0];
    for &w in &walkers {
        if better(w, best) {
            best = w;
        }
    }
    let mut temp = cfg.agsp.init_temp;
    let mut trace = Vec::with_capacity(cfg.agsp.generations);
    for _ in 0..cfg.agsp.generations {
        for w in walkers.iter_mut() {
            if n > 1 {
                let mut next = rng.gen_range(0..n - 1);
                if next >= *w {
                    next += 1;
                }
                let delta = scored[*w].1 - scored[next].1;
                let u: f64 = rng.gen();
                if delta <= 0.0 || (temp > 0.0 && u < (-delta / temp).exp()) {
                    *w = next;
                }
            }
            if better(*w, best) {
                best = *w;
            }
        }
        trace.push(scored[best].1);
        temp *= cfg.agsp.cooling;
    }
    AgspRun { action: scored[best].0, fitness: scored[best].1, best_trace: trace }
}

pub fn agsp_decide<R: Rng + ?Sized>(obs: &Obs, mask: &ActionMask, cfg: &HeuristicConfig, rng: &mut R) -> Action {
    if mask.idle() {
        return Action::Idle;
    }
    agsp_search(obs, mask, cfg, rng).action
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    LocalOnly,
    RandomValid,
    GreedyMinDelay,
    Ratc,
    Agsp,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 5] = [
        HeuristicKind::LocalOnly,
        HeuristicKind::RandomValid,
        HeuristicKind::GreedyMinDelay,
        HeuristicKind::Ratc,
        HeuristicKind::Agsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::LocalOnly => "local_only",
            HeuristicKind::RandomValid => "random",
            HeuristicKind::GreedyMinDelay => "greedy",
            HeuristicKind::Ratc => "ratc",
            HeuristicKind::Agsp => "agsp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "local_only" | "local" => Some(HeuristicKind::LocalOnly),
            "random" | "random_valid" => Some(HeuristicKind::RandomValid),
            "greedy" | "greedy_min_delay" => Some(HeuristicKind::GreedyMinDelay),
            "ratc" => Some(HeuristicKind::Ratc),
            "agsp" => Some(HeuristicKind::Agsp),
            _ => None,
        }
    }

    pub fn decide<R: Rng + ?Sized>(self, obs: &Obs, mask: &ActionMask, cfg: &HeuristicConfig, rng: &mut R) -> Action {
        match self {
            HeuristicKind::LocalOnly => local_only(obs, mask),
            HeuristicKind::RandomValid => random_valid(mask, rng),
            HeuristicKind::GreedyMinDelay => greedy_min_delay(obs, mask),
            HeuristicKind::Ratc => ratc_decide(obs, mask, cfg.ratc_sample_k, rng),
            HeuristicKind::Agsp => agsp_decide(obs, mask, cfg, rng),
        }
    }
}
