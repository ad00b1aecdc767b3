//! Time-slotted multi-agent offloading environment.
//!
//! Each node is an agent. At the start of a slot an agent with a pending task
//! decides to execute it locally, forward it to a reachable neighbour, or (if
//! it has nothing to do) idle. The slot then runs one `slot_duration` of FIFO
//! service on every execution queue and link buffer, applies topology churn,
//! expires overdue tasks and samples the next arrivals.
//!
//! Observations use a fixed number of neighbour slots (`nodes - 1`); slot `k`
//! of agent `i` always refers to node `k` if `k < i` and `k + 1` otherwise,
//! so the width never changes under churn.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EnvConfig};
use crate::model::{self, NodeId, NodeSpec, Outcome, Task};
use crate::rng::{self, StreamRng};
use crate::topology::{self, Topology};

pub const NODE_FEATURES: usize = 6;
pub const TASK_FEATURES: usize = 5;
pub const NEIGHBOR_FEATURES: usize = 4;

/// Observation width for a system of `nodes` agents.
pub fn obs_width(nodes: usize) -> usize {
    NODE_FEATURES + TASK_FEATURES + NEIGHBOR_FEATURES * nodes.saturating_sub(1)
}

/// Number of discrete actions: local, one per neighbour slot, idle.
pub fn action_count(nodes: usize) -> usize {
    nodes + 1
}

/// Node id behind neighbour slot `slot` of `agent`.
pub fn slot_node(agent: NodeId, slot: usize) -> NodeId {
    if slot < agent {
        slot
    } else {
        slot + 1
    }
}

/// Neighbour slot of `node` as seen from `agent`.
pub fn node_slot(agent: NodeId, node: NodeId) -> Option<usize> {
    match node.cmp(&agent) {
        std::cmp::Ordering::Less => Some(node),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(node - 1),
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("agent {agent} submitted masked action {action:?}")]
    InvalidAction { agent: NodeId, action: Action },
    #[error("expected {expected} actions, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("episode is finished; call reset")]
    Finished,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Local,
    /// forward to neighbour slot
    Forward(usize),
    Idle,
}

impl Action {
    pub fn index(self, nodes: usize) -> usize {
        match self {
            Action::Local => 0,
            Action::Forward(k) => 1 + k,
            Action::Idle => nodes,
        }
    }

    pub fn from_index(index: usize, nodes: usize) -> Action {
        match index {
            0 => Action::Local,
            i if i == nodes => Action::Idle,
            i => Action::Forward(i - 1),
        }
    }
}

/// Valid-action bitmap in action-index order `[local, slot_0.., idle]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub bits: Vec<bool>,
}

impl ActionMask {
    pub fn nodes(&self) -> usize {
        self.bits.len() - 1
    }

    pub fn local(&self) -> bool {
        self.bits[0]
    }

    pub fn idle(&self) -> bool {
        self.bits[self.bits.len() - 1]
    }

    pub fn forward(&self, slot: usize) -> bool {
        self.bits.get(1 + slot).copied().unwrap_or(false) && 1 + slot < self.bits.len() - 1
    }

    pub fn allows(&self, action: Action) -> bool {
        let i = action.index(self.nodes());
        i < self.bits.len() && self.bits[i]
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn forward_slots(&self) -> Vec<usize> {
        (0..self.nodes() - 1).filter(|&k| self.forward(k)).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Normalisation constants used to map raw quantities into `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsScales {
    pub cpu_max: f64,
    pub sw_fail_max: f64,
    pub hw_fail_max: f64,
    pub size_max: f64,
    pub cycles_max: f64,
    pub deadline_max: f64,
    pub max_hops: f64,
    pub rate_max: f64,
    pub link_fail_max: f64,
    pub slot_duration: f64,
    pub reliability_floor: f64,
}

impl ObsScales {
    pub fn from_config(cfg: &EnvConfig) -> Self {
        let pos = |x: f64| if x > 0.0 { x } else { 1.0 };
        Self {
            cpu_max: pos(cfg.cpu_hz().hi),
            sw_fail_max: pos(cfg.sw_fail_rate.hi),
            hw_fail_max: pos(cfg.hw_fail_rate.hi),
            size_max: pos(cfg.size_bits().hi),
            cycles_max: pos(cfg.size_bits().hi * cfg.intensity_cycles_per_bit.hi),
            deadline_max: pos(cfg.deadline_s),
            max_hops: pos(f64::from(cfg.max_hops)),
            rate_max: pos(cfg.rate_bps().hi),
            link_fail_max: pos(cfg.link_fail_rate.hi),
            slot_duration: cfg.slot_duration_s,
            reliability_floor: cfg.reliability_floor,
        }
    }

    /// Queue backlogs are measured in seconds relative to the deadline.
    pub fn queue_time(&self) -> f64 {
        self.deadline_max
    }
}

fn unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Per-agent normalised local view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: NodeId,
    pub features: Vec<f64>,
    /// node id behind each neighbour slot
    pub neighbor_ids: Vec<NodeId>,
    pub scales: ObsScales,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborFeatures {
    pub rate: f64,
    pub fail: f64,
    pub alive: f64,
    pub load: f64,
}

impl Observation {
    pub fn node_block(&self) -> &[f64] {
        &self.features[..NODE_FEATURES]
    }

    pub fn task_block(&self) -> &[f64] {
        &self.features[NODE_FEATURES..NODE_FEATURES + TASK_FEATURES]
    }

    pub fn slots(&self) -> usize {
        self.neighbor_ids.len()
    }

    pub fn neighbor(&self, slot: usize) -> NeighborFeatures {
        let o = NODE_FEATURES + TASK_FEATURES + NEIGHBOR_FEATURES * slot;
        let f = &self.features[o..o + NEIGHBOR_FEATURES];
        NeighborFeatures { rate: f[0], fail: f[1], alive: f[2], load: f[3] }
    }

    pub fn has_task(&self) -> bool {
        self.task_block().iter().any(|&x| x != 0.0)
    }

    /// Returns a copy with neighbour slots reordered by `perm` (new slot `k`
    /// holds old slot `perm[k]`).
    pub fn permute_slots(&self, perm: &[usize]) -> Observation {
        let mut out = self.clone();
        let base = NODE_FEATURES + TASK_FEATURES;
        for (k, &src) in perm.iter().enumerate() {
            let dst = base + NEIGHBOR_FEATURES * k;
            let from = base + NEIGHBOR_FEATURES * src;
            out.features[dst..dst + NEIGHBOR_FEATURES].copy_from_slice(&self.features[from..from + NEIGHBOR_FEATURES]);
            out.neighbor_ids[k] = self.neighbor_ids[src];
        }
        out
    }
}

/// Raw (unnormalised) task summary for guidance prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub id: u64,
    pub size: f64,
    pub intensity: f64,
    pub cycles: f64,
    pub deadline: f64,
    pub remaining_deadline: f64,
    pub hops: u32,
    pub wait_slots: u32,
    pub reliability_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborView {
    pub slot: usize,
    pub id: NodeId,
    pub rate: f64,
    pub link_fail_rate: f64,
    pub compute_capacity: f64,
    pub exec_fail_rate: f64,
    /// seconds of queued work at the neighbour's processor
    pub exec_backlog: f64,
    /// seconds of queued bits on our buffer towards it
    pub buffer_backlog: f64,
    pub pending: usize,
}

/// Raw local view of one agent, as handed to guidance providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalView {
    pub node: NodeSpec,
    pub slot: u32,
    pub slot_duration: f64,
    pub exec_len: usize,
    pub exec_backlog: f64,
    pub buffer_len: usize,
    pub buffer_backlog: f64,
    pub task: Option<TaskView>,
    /// reachable neighbours only, ascending id
    pub neighbors: Vec<NeighborView>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRef {
    pub slot: u32,
    pub agent: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Completed,
    ExecFailure,
    LinkFailure,
    NodeLoss,
    LinkLoss,
    Expired,
    HopLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub task_id: u64,
    pub origin: NodeId,
    pub executor: Option<NodeId>,
    pub outcome: Outcome,
    pub cause: Cause,
    /// seconds from creation to resolution
    pub delay: f64,
    pub reliability: f64,
    pub decisions: Vec<DecisionRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    pub observation: Observation,
    pub mask: ActionMask,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub slot: u32,
    pub agents: Vec<AgentStep>,
    pub reward: f64,
    pub resolutions: Vec<Resolution>,
    pub next_observations: Vec<Observation>,
    pub next_masks: Vec<ActionMask>,
    pub done: bool,
}

impl TransitionRecord {
    /// `sum_i (s_i - v_i)` recomputed from the outcome labels.
    pub fn reward_from_labels(&self) -> f64 {
        self.resolutions.iter().map(|r| r.outcome.reward()).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub generated: usize,
    pub success: usize,
    pub deadline_violations: usize,
    pub reliability_violations: usize,
}

impl EpisodeStats {
    pub fn resolved(&self) -> usize {
        self.success + self.deadline_violations + self.reliability_violations
    }

    pub fn violations(&self) -> usize {
        self.deadline_violations + self.reliability_violations
    }

    pub fn in_flight(&self) -> usize {
        self.generated - self.resolved()
    }

    pub fn success_rate(&self) -> f64 {
        model::success_rate_from_counts(self.success, self.resolved())
    }

    pub fn record(&mut self, o: Outcome) {
        match o {
            Outcome::Success => self.success += 1,
            Outcome::DeadlineViolation => self.deadline_violations += 1,
            Outcome::ReliabilityViolation => self.reliability_violations += 1,
        }
    }
}

/// Where new tasks come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalSource {
    /// one Bernoulli(lambda_i) draw per node per slot
    Bernoulli,
    /// fixed task list; each task appears at its origin in its `created_slot`
    Scripted(Vec<Task>),
}

#[derive(Debug, Clone)]
struct Job {
    task: Task,
    /// cycles (execution) or bits (transmission) still to serve
    remaining: f64,
    started: bool,
    /// sum of beta * T^t over traversed hops
    link_exponent: f64,
    decisions: Vec<DecisionRef>,
}

impl Job {
    fn new(task: Task) -> Self {
        Self { task, remaining: 0.0, started: false, link_exponent: 0.0, decisions: Vec::new() }
    }
}

#[derive(Debug, Clone, Default)]
struct NodeQueues {
    pending: VecDeque<Job>,
    exec: VecDeque<Job>,
    buffers: BTreeMap<NodeId, VecDeque<Job>>,
}

impl NodeQueues {
    fn clear(&mut self) -> Vec<Job> {
        let mut out: Vec<Job> = self.pending.drain(..).collect();
        out.extend(self.exec.drain(..));
        for (_, q) in std::mem::take(&mut self.buffers) {
            out.extend(q);
        }
        out
    }

    fn is_empty(&self) -> bool {
        self.pending.is_empty() && self.exec.is_empty() && self.buffers.values().all(VecDeque::is_empty)
    }
}

pub struct Env {
    cfg: EnvConfig,
    scales: ObsScales,
    topo: Topology,
    base_topo: Topology,
    slot: u32,
    queues: Vec<NodeQueues>,
    arrivals: ArrivalSource,
    scripted_cursor: usize,
    rng_arrivals: StreamRng,
    rng_failures: StreamRng,
    rng_topology: StreamRng,
    next_task_id: u64,
    stats: EpisodeStats,
    drain: bool,
    finished: bool,
    observations: Vec<Observation>,
    masks: Vec<ActionMask>,
}

impl Env {
    /// Build and reset an environment with a generated topology.
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        let topo = topology::generate(&cfg, &mut rng::stream(seed, rng::TOPOLOGY))?;
        let mut env = Self::with_topology(cfg, topo, ArrivalSource::Bernoulli)?;
        env.reset(seed)?;
        Ok(env)
    }

    /// Environment on a fixed topology. Call [`Env::reset`] before stepping.
    pub fn with_topology(cfg: EnvConfig, topo: Topology, arrivals: ArrivalSource) -> Result<Self, EnvError> {
        cfg.validate()?;
        if topo.len() != cfg.nodes {
            return Err(ConfigError::Invalid(format!("topology has {} nodes, config {}", topo.len(), cfg.nodes)).into());
        }
        if !topo.is_connected() {
            return Err(ConfigError::Disconnected.into());
        }
        let scales = ObsScales::from_config(&cfg);
        let n = cfg.nodes;
        Ok(Self {
            scales,
            queues: vec![NodeQueues::default(); n],
            base_topo: topo.clone(),
            topo,
            slot: 0,
            arrivals,
            scripted_cursor: 0,
            rng_arrivals: rng::stream(0, rng::ARRIVALS),
            rng_failures: rng::stream(0, rng::FAILURES),
            rng_topology: rng::stream(0, rng::TOPOLOGY),
            next_task_id: 0,
            stats: EpisodeStats::default(),
            drain: false,
            finished: false,
            observations: Vec::new(),
            masks: Vec::new(),
            cfg,
        })
    }

    /// Keep stepping past the horizon (without new arrivals) until every
    /// task has been resolved.
    pub fn set_drain(&mut self, drain: bool) {
        self.drain = drain;
    }

    /// Start a new episode on the initial graph; queues, clocks and random
    /// streams are reset.
    pub fn reset(&mut self, seed: u64) -> Result<(Vec<Observation>, Vec<ActionMask>), EnvError> {
        self.rng_arrivals = rng::stream(seed, rng::ARRIVALS);
        self.rng_failures = rng::stream(seed, rng::FAILURES);
        // topology churn uses a stream distinct from the one that built the graph
        self.rng_topology = rng::stream(seed ^ 0x5EED_70B0, rng::TOPOLOGY);
        for q in &mut self.queues {
            q.clear();
        }
        self.topo = self.base_topo.clone();
        self.slot = 0;
        self.scripted_cursor = 0;
        self.next_task_id = 0;
        self.stats = EpisodeStats::default();
        self.finished = false;
        self.sample_arrivals();
        self.refresh_views();
        Ok((self.observations.clone(), self.masks.clone()))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn scales(&self) -> &ObsScales {
        &self.scales
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn slot(&self) -> u32 {
        self.slot
    }

    pub fn nodes(&self) -> usize {
        self.cfg.nodes
    }

    pub fn stats(&self) -> EpisodeStats {
        self.stats
    }

    pub fn is_done(&self) -> bool {
        self.finished
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn masks(&self) -> &[ActionMask] {
        &self.masks
    }

    pub fn valid_actions(&self, agent: NodeId) -> ActionMask {
        self.masks[agent].clone()
    }

    /// Whether every queue is empty.
    pub fn is_idle(&self) -> bool {
        self.queues.iter().all(NodeQueues::is_empty)
    }

    fn now(&self) -> f64 {
        f64::from(self.slot) * self.cfg.slot_duration_s
    }

    fn new_task(&mut self, origin: NodeId) -> Task {
        let size = self.cfg.size_bits().sample(&mut self.rng_arrivals);
        let intensity = self.cfg.intensity_cycles_per_bit.sample(&mut self.rng_arrivals);
        let id = self.next_task_id;
        self.next_task_id += 1;
        Task::new(id, origin, self.slot, size, intensity, self.cfg.deadline_s, self.cfg.reliability_floor)
    }

    fn sample_arrivals(&mut self) {
        if self.slot >= self.cfg.horizon {
            return;
        }
        match &self.arrivals {
            ArrivalSource::Bernoulli => {
                for i in 0..self.cfg.nodes {
                    // draws happen for every node so the trace does not depend on churn
                    let u: f64 = self.rng_arrivals.gen();
                    let task = self.new_task(i);
                    if self.topo.nodes[i].alive && u < self.topo.nodes[i].arrival_prob {
                        self.stats.generated += 1;
                        self.queues[i].pending.push_back(Job::new(task));
                    }
                }
            }
            ArrivalSource::Scripted(tasks) => {
                let mut incoming = Vec::new();
                while let Some(t) = tasks.get(self.scripted_cursor) {
                    if t.created_slot > self.slot {
                        break;
                    }
                    incoming.push(t.clone());
                    self.scripted_cursor += 1;
                }
                for t in incoming {
                    self.stats.generated += 1;
                    let origin = t.origin;
                    if self.topo.nodes[origin].alive {
                        self.queues[origin].pending.push_back(Job::new(t));
                    }
                }
            }
        }
    }

    fn exec_backlog(&self, node: NodeId) -> f64 {
        let f = self.topo.nodes[node].compute_capacity;
        self.queues[node]
            .exec
            .iter()
            .map(|j| if j.started { j.remaining } else { j.task.cycles })
            .fold(0.0, |a, x| a + x)
            / f
    }

    fn buffer_backlog(&self, node: NodeId, to: NodeId) -> f64 {
        let Some(link) = self.topo.link(node, to) else { return 0.0 };
        self.queues[node]
            .buffers
            .get(&to)
            .map_or(0.0, |q| q.iter().map(|j| if j.started { j.remaining } else { j.task.size }).sum::<f64>())
            / link.rate
    }

    fn max_buffer_backlog(&self, node: NodeId) -> f64 {
        self.queues[node].buffers.keys().map(|&to| self.buffer_backlog(node, to)).fold(0.0, f64::max)
    }

    fn compute_mask(&self, agent: NodeId) -> ActionMask {
        let n = self.cfg.nodes;
        let mut bits = vec![false; n + 1];
        let alive = self.topo.nodes[agent].alive;
        bits[0] = alive;
        for k in 0..n.saturating_sub(1) {
            bits[1 + k] = alive && self.topo.usable(agent, slot_node(agent, k));
        }
        bits[n] = self.queues[agent].pending.is_empty();
        ActionMask { bits }
    }

    fn compute_observation(&self, agent: NodeId) -> Observation {
        let n = self.cfg.nodes;
        let s = &self.scales;
        let mut f = vec![0.0; obs_width(n)];
        let neighbor_ids: Vec<NodeId> = (0..n.saturating_sub(1)).map(|k| slot_node(agent, k)).collect();
        let node = &self.topo.nodes[agent];
        if node.alive {
            f[0] = unit(node.arrival_prob);
            f[1] = unit(node.sw_fail_rate / s.sw_fail_max);
            f[2] = unit(node.hw_fail_rate / s.hw_fail_max);
            f[3] = unit(node.compute_capacity / s.cpu_max);
            f[4] = unit(self.exec_backlog(agent) / s.queue_time());
            f[5] = unit(self.max_buffer_backlog(agent) / s.queue_time());
            if let Some(job) = self.queues[agent].pending.front() {
                let t = &job.task;
                let elapsed = self.now() - f64::from(t.created_slot) * self.cfg.slot_duration_s;
                let o = NODE_FEATURES;
                f[o] = unit(t.size / s.size_max);
                f[o + 1] = unit(t.cycles / s.cycles_max);
                // remaining deadline; floored so a present task never encodes as all zeros
                f[o + 2] = unit((t.deadline - elapsed) / s.deadline_max).max(1e-6);
                f[o + 3] = unit(f64::from(t.hops) / s.max_hops);
                f[o + 4] = unit(f64::from(t.wait()) * s.slot_duration / s.deadline_max);
            }
            for (k, &j) in neighbor_ids.iter().enumerate() {
                if self.topo.usable(agent, j) {
                    let link = self.topo.link(agent, j).expect("usable link exists");
                    let o = NODE_FEATURES + TASK_FEATURES + NEIGHBOR_FEATURES * k;
                    f[o] = unit(link.rate / s.rate_max);
                    f[o + 1] = unit(link.fail_rate / s.link_fail_max);
                    f[o + 2] = 1.0;
                    f[o + 3] = unit(self.exec_backlog(j) / s.queue_time());
                }
            }
        }
        Observation { agent, features: f, neighbor_ids, scales: *s }
    }

    fn refresh_views(&mut self) {
        let n = self.cfg.nodes;
        self.observations = (0..n).map(|i| self.compute_observation(i)).collect();
        self.masks = (0..n).map(|i| self.compute_mask(i)).collect();
    }

    /// Raw local view used to build guidance prompts.
    pub fn local_view(&self, agent: NodeId) -> LocalView {
        let node = self.topo.nodes[agent].clone();
        let task = self.queues[agent].pending.front().map(|j| {
            let t = &j.task;
            let elapsed = self.now() - f64::from(t.created_slot) * self.cfg.slot_duration_s;
            TaskView {
                id: t.id,
                size: t.size,
                intensity: t.intensity,
                cycles: t.cycles,
                deadline: t.deadline,
                remaining_deadline: t.deadline - elapsed,
                hops: t.hops,
                wait_slots: t.wait(),
                reliability_floor: t.reliability_floor,
            }
        });
        let neighbors = if node.alive {
            self.topo
                .neighbors(agent)
                .into_iter()
                .map(|j| {
                    let link = self.topo.link(agent, j).expect("neighbour link");
                    let spec = &self.topo.nodes[j];
                    NeighborView {
                        slot: node_slot(agent, j).expect("neighbour is not self"),
                        id: j,
                        rate: link.rate,
                        link_fail_rate: link.fail_rate,
                        compute_capacity: spec.compute_capacity,
                        exec_fail_rate: spec.exec_fail_rate(),
                        exec_backlog: self.exec_backlog(j),
                        buffer_backlog: self.buffer_backlog(agent, j),
                        pending: self.queues[j].pending.len(),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        LocalView {
            slot: self.slot,
            slot_duration: self.cfg.slot_duration_s,
            exec_len: self.queues[agent].exec.len(),
            exec_backlog: if node.alive { self.exec_backlog(agent) } else { 0.0 },
            buffer_len: self.queues[agent].buffers.values().map(VecDeque::len).sum(),
            buffer_backlog: if node.alive { self.max_buffer_backlog(agent) } else { 0.0 },
            task,
            neighbors,
            node,
        }
    }

    fn resolve(
        &mut self,
        out: &mut Vec<Resolution>,
        job: Job,
        executor: Option<NodeId>,
        cause: Cause,
        at: f64,
        rel: f64,
    ) {
        let created = f64::from(job.task.created_slot) * self.cfg.slot_duration_s;
        let delay = at - created;
        let outcome = match cause {
            Cause::HopLimit | Cause::Expired => Outcome::DeadlineViolation,
            _ => model::task_outcome(delay, rel, &job.task),
        };
        self.stats.record(outcome);
        out.push(Resolution {
            task_id: job.task.id,
            origin: job.task.origin,
            executor,
            outcome,
            cause,
            delay,
            reliability: rel,
            decisions: job.decisions,
        });
    }

    fn lose(&mut self, out: &mut Vec<Resolution>, jobs: Vec<Job>, cause: Cause, at: f64) {
        for job in jobs {
            self.resolve(out, job, None, cause, at, 0.0);
        }
    }

    /// Advance one slot.
    pub fn step(&mut self, actions: &[Action]) -> Result<TransitionRecord, EnvError> {
        if self.finished {
            return Err(EnvError::Finished);
        }
        let n = self.cfg.nodes;
        if actions.len() != n {
            return Err(EnvError::WrongArity { expected: n, got: actions.len() });
        }
        for (agent, &a) in actions.iter().enumerate() {
            if !self.masks[agent].allows(a) {
                return Err(EnvError::InvalidAction { agent, action: a });
            }
        }
        let tau = self.cfg.slot_duration_s;
        let start = self.now();
        let end = start + tau;
        let mut resolutions = Vec::new();
        let agents: Vec<AgentStep> = actions
            .iter()
            .enumerate()
            .map(|(i, &a)| AgentStep { observation: self.observations[i].clone(), mask: self.masks[i].clone(), action: a })
            .collect();

        // decisions
        for (agent, &action) in actions.iter().enumerate() {
            if action == Action::Idle || !self.topo.nodes[agent].alive {
                continue;
            }
            let Some(mut job) = self.queues[agent].pending.pop_front() else { continue };
            job.decisions.push(DecisionRef { slot: self.slot, agent });
            job.started = false;
            match action {
                Action::Local => {
                    job.remaining = job.task.cycles;
                    self.queues[agent].exec.push_back(job);
                }
                Action::Forward(k) => {
                    let to = slot_node(agent, k);
                    job.task.hops += 1;
                    if job.task.hops > self.cfg.max_hops {
                        self.resolve(&mut resolutions, job, None, Cause::HopLimit, start, 0.0);
                    } else {
                        job.remaining = job.task.size;
                        self.queues[agent].buffers.entry(to).or_default().push_back(job);
                    }
                }
                Action::Idle => unreachable!(),
            }
        }

        // one slot of FIFO service on processors and links
        let mut delivered: Vec<(NodeId, Job)> = Vec::new();
        for i in 0..n {
            if !self.topo.nodes[i].alive {
                continue;
            }
            let spec = self.topo.nodes[i].clone();
            let mut left = tau;
            let mut cursor = start;
            let mut done = Vec::new();
            while let Some(job) = self.queues[i].exec.front_mut() {
                let need = job.remaining / spec.compute_capacity;
                if need <= left {
                    left -= need;
                    cursor += need;
                    let job = self.queues[i].exec.pop_front().expect("front exists");
                    done.push((job, cursor));
                } else {
                    job.remaining -= left * spec.compute_capacity;
                    job.started = true;
                    break;
                }
            }
            for (job, at) in done {
                let tc = model::cycles_delay(job.task.cycles, spec.compute_capacity);
                let rate = spec.exec_fail_rate();
                let failed = self.cfg.failure_sampling && self.rng_failures.gen::<f64>() < 1.0 - (-rate * tc).exp();
                let rel = (-(rate * tc) - job.link_exponent).exp();
                let cause = if failed { Cause::ExecFailure } else { Cause::Completed };
                self.resolve(&mut resolutions, job, Some(i), cause, at, if failed { 0.0 } else { rel });
            }

            let targets: Vec<NodeId> = self.queues[i].buffers.keys().copied().collect();
            for to in targets {
                let Some(link) = self.topo.link(i, to).cloned() else { continue };
                if !self.topo.usable(i, to) {
                    continue;
                }
                let mut left = tau;
                let mut cursor = start;
                let mut sent = Vec::new();
                let q = self.queues[i].buffers.get_mut(&to).expect("buffer exists");
                while let Some(job) = q.front_mut() {
                    let need = job.remaining / link.rate;
                    if need <= left {
                        left -= need;
                        cursor += need;
                        sent.push((q.pop_front().expect("front exists"), cursor));
                    } else {
                        job.remaining -= left * link.rate;
                        job.started = true;
                        break;
                    }
                }
                for (mut job, at) in sent {
                    let tt = model::bits_delay(job.task.size, link.rate);
                    let failed = self.cfg.failure_sampling
                        && self.rng_failures.gen::<f64>() < 1.0 - (-link.fail_rate * tt).exp();
                    if failed {
                        self.resolve(&mut resolutions, job, None, Cause::LinkFailure, at, 0.0);
                    } else {
                        job.link_exponent += link.fail_rate * tt;
                        delivered.push((to, job));
                    }
                }
            }
        }
        for (to, mut job) in delivered {
            job.started = false;
            self.queues[to].pending.push_back(job);
        }

        self.churn(&mut resolutions, end);

        // expire anything that can no longer meet its deadline
        for i in 0..n {
            let q = &mut self.queues[i];
            let mut expired = Vec::new();
            let overdue = |j: &Job| end - f64::from(j.task.created_slot) * tau > j.task.deadline;
            for queue in std::iter::once(&mut q.pending)
                .chain(std::iter::once(&mut q.exec))
                .chain(q.buffers.values_mut())
            {
                let (gone, keep): (VecDeque<Job>, VecDeque<Job>) = queue.drain(..).partition(|j| overdue(j));
                *queue = keep;
                expired.extend(gone);
            }
            for job in expired {
                self.resolve(&mut resolutions, job, None, Cause::Expired, end, 0.0);
            }
        }

        // waiting-time counters for tasks that are still queued
        for q in &mut self.queues {
            for j in q.pending.iter_mut() {
                j.task.wait_cw += 1;
            }
            for j in q.exec.iter_mut().filter(|j| !j.started) {
                j.task.wait_cw += 1;
            }
            for b in q.buffers.values_mut() {
                for j in b.iter_mut().filter(|j| !j.started) {
                    j.task.wait_tw += 1;
                }
            }
        }

        self.slot += 1;
        self.sample_arrivals();
        self.refresh_views();
        let horizon_reached = self.slot >= self.cfg.horizon;
        self.finished = horizon_reached && (!self.drain || self.is_idle());
        let reward = resolutions.iter().map(|r| r.outcome.reward()).sum();
        Ok(TransitionRecord {
            slot: self.slot - 1,
            agents,
            reward,
            resolutions,
            next_observations: self.observations.clone(),
            next_masks: self.masks.clone(),
            done: self.finished,
        })
    }

    fn churn(&mut self, out: &mut Vec<Resolution>, at: f64) {
        let n = self.cfg.nodes;
        // node deaths; the last alive node is never removed
        for i in 0..n {
            let u: f64 = self.rng_topology.gen();
            if self.topo.nodes[i].alive && u < self.cfg.node_death_prob && self.topo.alive_count() > 1 {
                self.kill(out, i, at);
            }
        }
        // link outages and recoveries
        for k in 0..self.topo.links.len() {
            let u: f64 = self.rng_topology.gen();
            let (a, b) = self.topo.links[k].endpoints;
            if self.topo.links[k].available {
                if u < self.cfg.link_outage_prob {
                    self.topo.links[k].available = false;
                    self.drop_buffers(out, a, b, at);
                    self.drop_buffers(out, b, a, at);
                }
            } else if u < self.cfg.link_recovery_prob {
                self.topo.links[k].available = true;
            }
        }
        // node appearance recycles a dead slot
        let u: f64 = self.rng_topology.gen();
        let dead: Vec<NodeId> = (0..n).filter(|&i| !self.topo.nodes[i].alive).collect();
        if u < self.cfg.node_appear_prob && !dead.is_empty() {
            let id = dead[self.rng_topology.gen_range(0..dead.len())];
            let spec = topology::sample_node(id, &self.cfg, &mut self.rng_topology);
            self.topo.detach(id);
            let k = self.cfg.avg_degree.ceil().max(1.0) as usize;
            let targets = topology::attachment_targets(&self.topo, id, k, &mut self.rng_topology);
            self.topo.nodes[id] = spec;
            for t in targets {
                let link = topology::sample_link(id, t, &self.cfg, &mut self.rng_topology);
                self.topo.add_link(link);
            }
        }
    }

    fn drop_buffers(&mut self, out: &mut Vec<Resolution>, from: NodeId, to: NodeId, at: f64) {
        if let Some(q) = self.queues[from].buffers.remove(&to) {
            self.lose(out, q.into_iter().collect(), Cause::LinkLoss, at);
        }
    }

    fn kill(&mut self, out: &mut Vec<Resolution>, node: NodeId, at: f64) {
        self.topo.nodes[node].alive = false;
        let lost = self.queues[node].clear();
        self.lose(out, lost, Cause::NodeLoss, at);
        for other in 0..self.cfg.nodes {
            if other != node {
                self.drop_buffers(out, other, node, at);
            }
        }
    }

    /// Test hook: mark a node dead immediately (its queued work is lost).
    pub fn force_kill(&mut self, node: NodeId) -> Vec<Resolution> {
        let mut out = Vec::new();
        let at = self.now();
        self.kill(&mut out, node, at);
        self.refresh_views();
        out
    }

    /// Test hook: inject a task into an agent's pending queue.
    pub fn inject(&mut self, task: Task) {
        self.stats.generated += 1;
        let origin = task.origin;
        self.queues[origin].pending.push_back(Job::new(task));
        self.refresh_views();
    }
}

/// `sum_t gamma^t r_t` and the undiscounted sum.
pub fn episode_return(rewards: &[f64], discount: f64) -> (f64, f64) {
    let mut g = 0.0;
    let mut w = 1.0;
    for &r in rewards {
        g += w * r;
        w *= discount;
    }
    (g, rewards.iter().sum())
}
