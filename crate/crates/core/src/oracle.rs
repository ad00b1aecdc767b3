//! Exact solver for small static offloading instances and the bin-packing
//! reduction.
//!
//! An assignment maps every task to an executor, either its origin or a
//! direct neighbour. Each assignment is checked against the horizon-wide
//! resource budgets (compute `F*T`, per-link bits `R*T`, memory `M`) and then
//! replayed through the environment with churn and failure sampling off, so
//! queueing follows exactly the same FIFO rules as training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EnvConfig, Range};
use crate::env::{self, Action, ActionMask, ArrivalSource, Env, EnvError, Observation};
use crate::model::{LinkSpec, NodeId, NodeSpec, Outcome, Task};
use crate::topology::Topology;

/// Maximum number of complete assignments the solver will enumerate.
pub const ENUMERATION_GUARD: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance has {0} assignments, above the enumeration guard")]
    TooLarge(u64),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticTask {
    pub origin: NodeId,
    /// bits
    pub size: f64,
    /// cycles per bit
    pub intensity: f64,
    /// seconds
    pub deadline: f64,
    pub reliability_floor: f64,
    #[serde(default)]
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticInstance {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub slot_duration: f64,
    pub horizon: u32,
    pub tasks: Vec<StaticTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPackingInstance {
    pub items: Vec<f64>,
    pub bins: usize,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub successes: usize,
    pub tasks: usize,
    pub success_rate: f64,
    /// outcome per task, in instance order
    pub outcomes: Vec<Outcome>,
    /// executor per task, `None` when the task was lost before execution
    pub executors: Vec<Option<NodeId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    /// whether any assignment satisfies the resource budgets
    pub feasible: bool,
    pub success_rate: f64,
    pub successes: usize,
    pub assignment: Option<Vec<NodeId>>,
    pub explored: u64,
}

impl StaticInstance {
    pub fn topology(&self) -> Result<Topology, OracleError> {
        Topology::new(self.nodes.clone(), self.links.clone(), self.slot_duration)
            .map_err(|e| OracleError::Invalid(e.to_string()))
    }

    /// Total horizon length in seconds.
    pub fn horizon_time(&self) -> f64 {
        f64::from(self.horizon) * self.slot_duration
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let topo = self.topology()?;
        if !topo.is_connected() {
            return Err(OracleError::Invalid("topology is disconnected".into()));
        }
        if self.horizon == 0 || !(self.slot_duration > 0.0) {
            return Err(OracleError::Invalid("horizon and slot duration must be positive".into()));
        }
        for (k, t) in self.tasks.iter().enumerate() {
            if t.origin >= self.nodes.len() || t.slot >= self.horizon {
                return Err(OracleError::Invalid(format!("task {k} has bad origin or slot")));
            }
            if !(t.size >= 0.0 && t.intensity >= 0.0 && t.deadline > 0.0) {
                return Err(OracleError::Invalid(format!("task {k} has bad profile")));
            }
        }
        Ok(())
    }

    /// Executors allowed for task `k`: origin first, then neighbours ascending.
    pub fn candidates(&self, topo: &Topology, k: usize) -> Vec<NodeId> {
        let o = self.tasks[k].origin;
        let mut c = vec![o];
        c.extend(topo.neighbors(o));
        c.sort_unstable();
        c
    }

    pub fn assignment_count(&self, topo: &Topology) -> u64 {
        (0..self.tasks.len()).fold(1u64, |acc, k| acc.saturating_mul(self.candidates(topo, k).len() as u64))
    }

    fn env_config(&self) -> EnvConfig {
        EnvConfig {
            nodes: self.nodes.len(),
            horizon: self.horizon,
            slot_duration_s: self.slot_duration,
            arrival_prob: Range::fixed(0.0),
            // the search only covers one-hop assignments
            max_hops: 1,
            ..EnvConfig::default()
        }
        .frozen()
    }

    fn env_tasks(&self) -> Vec<Task> {
        let mut order: Vec<usize> = (0..self.tasks.len()).collect();
        order.sort_by_key(|&k| self.tasks[k].slot);
        order
            .into_iter()
            .map(|k| {
                let t = &self.tasks[k];
                Task::new(k as u64, t.origin, t.slot, t.size, t.intensity, t.deadline, t.reliability_floor)
            })
            .collect()
    }

    /// Fresh environment replaying this instance.
    pub fn env(&self) -> Result<Env, OracleError> {
        let mut e = Env::with_topology(self.env_config(), self.topology()?, ArrivalSource::Scripted(self.env_tasks()))?;
        e.set_drain(true);
        e.reset(0)?;
        Ok(e)
    }

    /// Checks the horizon-wide compute, link and memory budgets.
    pub fn within_budget(&self, topo: &Topology, assignment: &[NodeId]) -> bool {
        let n = self.nodes.len();
        let mut cycles = vec![0.0; n];
        let mut mem = vec![0.0; n];
        let mut link_bits = vec![0.0; topo.links.len()];
        for (t, &j) in self.tasks.iter().zip(assignment) {
            cycles[j] += t.size * t.intensity;
            mem[j] += t.size;
            if j != t.origin {
                match topo.link_index(t.origin, j) {
                    Some(l) => link_bits[l] += t.size,
                    None => return false,
                }
            }
        }
        let h = self.horizon_time();
        let le = |x: f64, cap: f64| x <= cap * (1.0 + 1e-12);
        (0..n).all(|j| le(cycles[j], self.nodes[j].compute_capacity * h) && le(mem[j], self.nodes[j].memory))
            && link_bits.iter().zip(&topo.links).all(|(&b, l)| le(b, l.rate * h))
    }
}

fn evaluate_with<F>(inst: &StaticInstance, mut choose: F) -> Result<Evaluation, OracleError>
where
    F: FnMut(&Env, NodeId, &Observation, &ActionMask) -> Action,
{
    let mut e = inst.env()?;
    let n = inst.tasks.len();
    let mut outcomes = vec![None; n];
    let mut executors = vec![None; n];
    let mut guard = 0u64;
    while !e.is_done() {
        let actions: Vec<Action> = (0..e.nodes())
            .map(|i| {
                let m = &e.masks()[i];
                if m.idle() {
                    Action::Idle
                } else {
                    choose(&e, i, &e.observations()[i], m)
                }
            })
            .collect();
        let rec = e.step(&actions)?;
        for r in rec.resolutions {
            outcomes[r.task_id as usize] = Some(r.outcome);
            executors[r.task_id as usize] = r.executor;
        }
        guard += 1;
        if guard > 1_000_000 {
            return Err(OracleError::Invalid("replay did not terminate".into()));
        }
    }
    let outcomes: Vec<Outcome> = outcomes.into_iter().map(|o| o.expect("every task resolves under drain")).collect();
    let successes = outcomes.iter().filter(|o| o.is_success()).count();
    Ok(Evaluation {
        successes,
        tasks: n,
        success_rate: crate::model::success_rate_from_counts(successes, n),
        outcomes,
        executors,
    })
}

/// Replay a fixed assignment (origin decides, executors run locally).
pub fn evaluate_assignment(inst: &StaticInstance, assignment: &[NodeId]) -> Result<Evaluation, OracleError> {
    if assignment.len() != inst.tasks.len() {
        return Err(OracleError::Invalid("assignment length mismatch".into()));
    }
    let topo = inst.topology()?;
    for (k, &j) in assignment.iter().enumerate() {
        if !inst.candidates(&topo, k).contains(&j) {
            return Err(OracleError::Invalid(format!("task {k} cannot run on node {j}")));
        }
    }
    evaluate_with(inst, |e, agent, _, _| {
        let view = e.local_view(agent);
        let task = view.task.expect("agent with open mask holds a task");
        let k = task.id as usize;
        let target = assignment[k];
        if agent == inst.tasks[k].origin && target != agent && task.hops == 0 {
            Action::Forward(env::node_slot(agent, target).expect("target differs from agent"))
        } else {
            Action::Local
        }
    })
}

/// Roll a decentralised policy through the instance.
pub fn evaluate_policy<F>(inst: &StaticInstance, mut policy: F) -> Result<Evaluation, OracleError>
where
    F: FnMut(&Observation, &ActionMask) -> Action,
{
    evaluate_with(inst, |_, _, o, m| policy(o, m))
}

/// Global optimum of the success rate over budget-feasible assignments.
/// Ties keep the lexicographically smallest assignment.
pub fn solve_exact(inst: &StaticInstance) -> Result<Solution, OracleError> {
    inst.validate()?;
    let topo = inst.topology()?;
    let count = inst.assignment_count(&topo);
    if count > ENUMERATION_GUARD {
        return Err(OracleError::TooLarge(count));
    }
    let cands: Vec<Vec<NodeId>> = (0..inst.tasks.len()).map(|k| inst.candidates(&topo, k)).collect();
    // a task can only succeed if some executor meets its constraints on an idle system
    let upper = inst
        .tasks
        .iter()
        .enumerate()
        .filter(|(k, t)| {
            cands[*k].iter().any(|&j| {
                let mut task = Task::new(0, t.origin, t.slot, t.size, t.intensity, t.deadline, t.reliability_floor);
                task.hops = u32::from(j != t.origin);
                standalone_success(inst, &topo, &task, j)
            })
        })
        .count();

    let mut search = Search {
        inst,
        topo: &topo,
        cands: &cands,
        upper,
        best: None,
        explored: 0,
        partial: Vec::with_capacity(inst.tasks.len()),
        cycles: vec![0.0; inst.nodes.len()],
        mem: vec![0.0; inst.nodes.len()],
        link_bits: vec![0.0; topo.links.len()],
    };
    search.dfs()?;
    let explored = search.explored;
    Ok(match search.best {
        Some((successes, assignment)) => Solution {
            feasible: true,
            success_rate: crate::model::success_rate_from_counts(successes, inst.tasks.len()),
            successes,
            assignment: Some(assignment),
            explored,
        },
        None => Solution { feasible: false, success_rate: 0.0, successes: 0, assignment: None, explored },
    })
}

fn standalone_success(inst: &StaticInstance, topo: &Topology, t: &Task, j: NodeId) -> bool {
    let tc = crate::model::cycles_delay(t.cycles, inst.nodes[j].compute_capacity);
    let (tt, link_exp) = if j == t.origin {
        (0.0, 0.0)
    } else {
        let l = topo.link(t.origin, j).expect("candidate is a neighbour");
        let tt = crate::model::bits_delay(t.size, l.rate);
        (tt, l.fail_rate * tt)
    };
    let rel = (-(inst.nodes[j].exec_fail_rate() * tc) - link_exp).exp();
    crate::model::task_outcome(tc + tt, rel, t).is_success()
}

struct Search<'a> {
    inst: &'a StaticInstance,
    topo: &'a Topology,
    cands: &'a [Vec<NodeId>],
    upper: usize,
    best: Option<(usize, Vec<NodeId>)>,
    explored: u64,
    partial: Vec<NodeId>,
    cycles: Vec<f64>,
    mem: Vec<f64>,
    link_bits: Vec<f64>,
}

impl Search<'_> {
    fn done(&self) -> bool {
        self.best.as_ref().is_some_and(|(s, _)| *s >= self.upper)
    }

    fn dfs(&mut self) -> Result<(), OracleError> {
        if self.done() {
            return Ok(());
        }
        let k = self.partial.len();
        if k == self.inst.tasks.len() {
            self.explored += 1;
            let ev = evaluate_assignment(self.inst, &self.partial)?;
            if self.best.as_ref().is_none_or(|(s, _)| ev.successes > *s) {
                self.best = Some((ev.successes, self.partial.clone()));
            }
            return Ok(());
        }
        let t = &self.inst.tasks[k];
        let h = self.inst.horizon_time();
        let slack = 1.0 + 1e-12;
        for &j in &self.cands[k] {
            let c = t.size * t.intensity;
            let link = if j == t.origin { None } else { self.topo.link_index(t.origin, j) };
            let fits = self.cycles[j] + c <= self.inst.nodes[j].compute_capacity * h * slack
                && self.mem[j] + t.size <= self.inst.nodes[j].memory * slack
                && link.is_none_or(|l| self.link_bits[l] + t.size <= self.topo.links[l].rate * h * slack);
            if !fits {
                continue;
            }
            self.cycles[j] += c;
            self.mem[j] += t.size;
            if let Some(l) = link {
                self.link_bits[l] += t.size;
            }
            self.partial.push(j);
            let r = self.dfs();
            self.partial.pop();
            self.cycles[j] -= c;
            self.mem[j] -= t.size;
            if let Some(l) = link {
                self.link_bits[l] -= t.size;
            }
            r?;
            if self.done() {
                break;
            }
        }
        Ok(())
    }
}

impl BinPackingInstance {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.bins == 0 || !(self.capacity > 0.0) || self.items.iter().any(|&a| !(a > 0.0)) {
            return Err(OracleError::Invalid("bin packing needs bins > 0, Q > 0, a_i > 0".into()));
        }
        Ok(())
    }
}

/// Single-slot instance whose budget feasibility equals packability.
///
/// `m` fully connected nodes with `F*T = Q`; each item becomes a task of
/// one bit with intensity `a_i`, so its cycle demand is `a_i`. Delay,
/// reliability, link and memory constraints are made slack.
pub fn reduce_binpacking(bp: &BinPackingInstance) -> Result<StaticInstance, OracleError> {
    bp.validate()?;
    let slot = 1.0;
    let nodes = (0..bp.bins)
        .map(|id| NodeSpec {
            id,
            compute_capacity: bp.capacity / slot,
            memory: 1e18,
            arrival_prob: 0.0,
            sw_fail_rate: 0.0,
            hw_fail_rate: 0.0,
            alive: true,
        })
        .collect();
    let mut links = Vec::new();
    for a in 0..bp.bins {
        for b in (a + 1)..bp.bins {
            links.push(LinkSpec::new(a, b, 1e18, 0.0).map_err(|e| OracleError::Invalid(e.to_string()))?);
        }
    }
    let tasks = bp
        .items
        .iter()
        .map(|&a| StaticTask { origin: 0, size: 1.0, intensity: a, deadline: 1e12, reliability_floor: 1e-12, slot: 0 })
        .collect();
    Ok(StaticInstance { nodes, links, slot_duration: slot, horizon: 1, tasks })
}
