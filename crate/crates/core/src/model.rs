//! Delay, reliability and outcome arithmetic for a single offloaded task.
//!
//! Everything here is a pure function over plain data. Sizes are bits,
//! rates are bits/second, capacities are cycles/second and failure rates are
//! events/second.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node index inside a topology.
pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("node {0} is not alive and cannot execute tasks")]
    InfeasibleExecutor(NodeId),
    #[error("link {0}-{1} is unavailable")]
    InfeasibleLink(NodeId, NodeId),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    /// cycles/second
    pub compute_capacity: f64,
    /// bits
    pub memory: f64,
    /// per-slot Bernoulli arrival probability
    pub arrival_prob: f64,
    /// software failure rate, 1/s
    pub sw_fail_rate: f64,
    /// hardware failure rate, 1/s
    pub hw_fail_rate: f64,
    #[serde(default = "default_true")]
    pub alive: bool,
}

fn default_true() -> bool {
    true
}

impl NodeSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.compute_capacity > 0.0 && self.compute_capacity.is_finite()) {
            return Err(ModelError::InvalidSpec(format!(
                "node {}: compute capacity must be positive",
                self.id
            )));
        }
        if !(0.0..=1.0).contains(&self.arrival_prob) {
            return Err(ModelError::InvalidSpec(format!(
                "node {}: arrival probability outside [0,1]",
                self.id
            )));
        }
        if !(self.sw_fail_rate >= 0.0 && self.hw_fail_rate >= 0.0) {
            return Err(ModelError::InvalidSpec(format!(
                "node {}: negative failure rate",
                self.id
            )));
        }
        Ok(())
    }

    /// Combined execution-side failure rate (software + hardware).
    pub fn exec_fail_rate(&self) -> f64 {
        self.sw_fail_rate + self.hw_fail_rate
    }
}

/// Undirected link. Endpoints are stored smaller id first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub endpoints: (NodeId, NodeId),
    /// bits/second
    pub rate: f64,
    /// effective link failure rate, 1/s
    pub fail_rate: f64,
    #[serde(default = "default_true")]
    pub available: bool,
}

impl LinkSpec {
    pub fn new(a: NodeId, b: NodeId, rate: f64, fail_rate: f64) -> Result<Self, ModelError> {
        if a == b {
            return Err(ModelError::InvalidSpec(format!("self-link on node {a}")));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(ModelError::InvalidSpec(format!("link {a}-{b}: rate must be positive")));
        }
        if !(fail_rate >= 0.0) {
            return Err(ModelError::InvalidSpec(format!("link {a}-{b}: negative failure rate")));
        }
        Ok(Self { endpoints: (a.min(b), a.max(b)), rate, fail_rate, available: true })
    }

    pub fn connects(&self, a: NodeId, b: NodeId) -> bool {
        self.endpoints == (a.min(b), a.max(b))
    }

    pub fn other(&self, n: NodeId) -> Option<NodeId> {
        match self.endpoints {
            (x, y) if x == n => Some(y),
            (x, y) if y == n => Some(x),
            _ => None,
        }
    }
}

/// One indivisible offloading unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub origin: NodeId,
    pub created_slot: u32,
    /// bits
    pub size: f64,
    /// cycles/bit
    pub intensity: f64,
    /// cycles, always `size * intensity`
    pub cycles: f64,
    /// seconds
    pub deadline: f64,
    pub reliability_floor: f64,
    pub hops: u32,
    /// slots spent waiting in transmission buffers
    pub wait_tw: u32,
    /// slots spent waiting for a decision or for the processor
    pub wait_cw: u32,
}

impl Task {
    pub fn new(
        id: u64,
        origin: NodeId,
        created_slot: u32,
        size: f64,
        intensity: f64,
        deadline: f64,
        reliability_floor: f64,
    ) -> Self {
        Self {
            id,
            origin,
            created_slot,
            size,
            intensity,
            cycles: size * intensity,
            deadline,
            reliability_floor,
            hops: 0,
            wait_tw: 0,
            wait_cw: 0,
        }
    }

    /// Accumulated waiting time in slots.
    pub fn wait(&self) -> u32 {
        self.wait_tw + self.wait_cw
    }
}

/// `C / F`.
pub fn exec_delay(task: &Task, executor: &NodeSpec) -> Result<f64, ModelError> {
    if !executor.alive {
        return Err(ModelError::InfeasibleExecutor(executor.id));
    }
    Ok(cycles_delay(task.cycles, executor.compute_capacity))
}

/// `S / R`.
pub fn trans_delay(task: &Task, link: &LinkSpec) -> Result<f64, ModelError> {
    if !link.available {
        return Err(ModelError::InfeasibleLink(link.endpoints.0, link.endpoints.1));
    }
    Ok(bits_delay(task.size, link.rate))
}

#[inline]
pub fn cycles_delay(cycles: f64, capacity: f64) -> f64 {
    cycles / capacity
}

#[inline]
pub fn bits_delay(bits: f64, rate: f64) -> f64 {
    bits / rate
}

/// Probability that neither the executor nor the (optional) link fails:
/// `exp(-(alpha+gamma) T^c - beta T^t)`.
pub fn reliability(exec_fail_rate: f64, exec_time: f64, link: Option<(f64, f64)>) -> f64 {
    let link_exponent = link.map_or(0.0, |(beta, t)| beta * t);
    (-(exec_fail_rate * exec_time) - link_exponent).exp()
}

/// Reliability of a forwarding path: one execution term times one term per
/// hop `exp(-beta_hop * T^t_hop)`.
pub fn path_reliability(exec_fail_rate: f64, exec_time: f64, hops: &[(f64, f64)]) -> f64 {
    let link_exponent: f64 = hops.iter().map(|(beta, t)| beta * t).sum();
    (-(exec_fail_rate * exec_time) - link_exponent).exp()
}

/// Reliability of executing `task` at `executor`, reached over `link` if any.
pub fn task_reliability(
    task: &Task,
    executor: &NodeSpec,
    link: Option<&LinkSpec>,
) -> Result<f64, ModelError> {
    let tc = exec_delay(task, executor)?;
    let link_term = match link {
        Some(l) => Some((l.fail_rate, trans_delay(task, l)?)),
        None => None,
    };
    Ok(reliability(executor.exec_fail_rate(), tc, link_term))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    DeadlineViolation,
    ReliabilityViolation,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        self == Outcome::Success
    }

    /// Contribution to the team reward: +1 on success, -1 on any violation.
    pub fn reward(self) -> f64 {
        if self.is_success() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::DeadlineViolation => "deadline_violation",
            Outcome::ReliabilityViolation => "reliability_violation",
        }
    }
}

/// Label a finished task. When both constraints fail the deadline wins.
pub fn task_outcome(total_delay: f64, rel: f64, task: &Task) -> Outcome {
    outcome_for(total_delay, rel, task.deadline, task.reliability_floor)
}

pub fn outcome_for(total_delay: f64, rel: f64, deadline: f64, floor: f64) -> Outcome {
    if total_delay > deadline {
        Outcome::DeadlineViolation
    } else if rel < floor {
        Outcome::ReliabilityViolation
    } else {
        Outcome::Success
    }
}

/// Fraction of assigned tasks that succeeded; 1.0 when nothing was assigned.
pub fn success_rate(outcomes: &[Outcome]) -> f64 {
    if outcomes.is_empty() {
        return 1.0;
    }
    let ok = outcomes.iter().filter(|o| o.is_success()).count();
    ok as f64 / outcomes.len() as f64
}

/// Same as [`success_rate`] but from counts.
pub fn success_rate_from_counts(success: usize, assigned: usize) -> f64 {
    if assigned == 0 {
        1.0
    } else {
        success as f64 / assigned as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(f: f64) -> NodeSpec {
        NodeSpec {
            id: 0,
            compute_capacity: f,
            memory: 1e12,
            arrival_prob: 0.5,
            sw_fail_rate: 0.0,
            hw_fail_rate: 0.0,
            alive: true,
        }
    }

    fn task_with(size: f64, intensity: f64) -> Task {
        Task::new(0, 0, 0, size, intensity, 4.0, 0.95)
    }

    #[test]
    fn exec_delay_examples() {
        let t = Task { cycles: 4e9, ..task_with(4e6, 1000.0) };
        assert!((exec_delay(&t, &node(2e9)).unwrap() - 2.0).abs() < 1e-12);
        let zero = task_with(0.0, 1000.0);
        assert_eq!(exec_delay(&zero, &node(2e9)).unwrap(), 0.0);
        // 2,000 KB at 8000 bits/KB and 1000 cycles/bit on 3 GHz
        let t = task_with(2000.0 * 8000.0, 1000.0);
        assert_eq!(t.cycles, 1.6e10);
        assert!((exec_delay(&t, &node(3e9)).unwrap() - 16.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn exec_delay_dead_executor() {
        let mut n = node(1e9);
        n.alive = false;
        n.id = 7;
        assert_eq!(exec_delay(&task_with(1.0, 1.0), &n), Err(ModelError::InfeasibleExecutor(7)));
    }

    #[test]
    fn trans_delay_examples() {
        let link = LinkSpec::new(0, 1, 3.2e7, 0.0).unwrap();
        assert!((trans_delay(&task_with(4e6, 1.0), &link).unwrap() - 0.125).abs() < 1e-12);
        assert_eq!(trans_delay(&task_with(0.0, 1.0), &link).unwrap(), 0.0);
        assert_eq!(trans_delay(&task_with(3.2e7, 1.0), &link).unwrap(), 1.0);
        let mut down = link.clone();
        down.available = false;
        assert_eq!(trans_delay(&task_with(1.0, 1.0), &down), Err(ModelError::InfeasibleLink(0, 1)));
    }

    #[test]
    fn link_spec_rejects_bad_input() {
        assert!(LinkSpec::new(2, 2, 1.0, 0.0).is_err());
        assert!(LinkSpec::new(1, 2, 0.0, 0.0).is_err());
        assert_eq!(LinkSpec::new(5, 2, 1.0, 0.0).unwrap().endpoints, (2, 5));
    }

    #[test]
    fn reliability_examples() {
        let r = reliability(0.1, 1.0, Some((0.1, 0.5)));
        assert!((r - (-0.15f64).exp()).abs() < 1e-12);
        assert!((r - 0.860708).abs() < 1e-6);
        assert_eq!(reliability(0.0, 3.0, Some((0.0, 2.0))), 1.0);
        let r = reliability(0.1, 2.0, None);
        assert!((r - 0.818731).abs() < 1e-6);
    }

    #[test]
    fn path_reliability_multiplies_hops() {
        let single = reliability(0.05, 1.0, Some((0.1, 0.5)));
        let two = path_reliability(0.05, 1.0, &[(0.1, 0.5), (0.2, 0.25)]);
        assert!((two - single * (-0.05f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn outcome_examples() {
        let t = Task::new(0, 0, 0, 1.0, 1.0, 4.0, 0.95);
        assert_eq!(task_outcome(3.9, 0.99, &t), Outcome::Success);
        assert_eq!(task_outcome(4.1, 0.99, &t), Outcome::DeadlineViolation);
        assert_eq!(task_outcome(2.0, 0.90, &t), Outcome::ReliabilityViolation);
        assert_eq!(task_outcome(4.1, 0.5, &t), Outcome::DeadlineViolation);
        assert_eq!(task_outcome(4.0, 0.95, &t), Outcome::Success);
    }

    #[test]
    fn success_rate_examples() {
        use Outcome::*;
        assert!((success_rate(&[Success, Success, DeadlineViolation]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(success_rate(&[]), 1.0);
        let mut v = vec![Success; 59];
        v.extend(std::iter::repeat_n(ReliabilityViolation, 41));
        assert_eq!(success_rate(&v), 0.59);
    }

    proptest! {
        #[test]
        fn reliability_monotone(
            a in 0.0..1.0f64, b in 0.0..1.0f64, tc in 0.0..10.0f64, tt in 0.0..10.0f64,
            da in 0.0..1.0f64, db in 0.0..1.0f64, dtc in 0.0..5.0f64, dtt in 0.0..5.0f64,
        ) {
            let base = reliability(a, tc, Some((b, tt)));
            prop_assert!(base > 0.0 && base <= 1.0);
            prop_assert!(reliability(a + da, tc, Some((b, tt))) <= base);
            prop_assert!(reliability(a, tc + dtc, Some((b, tt))) <= base);
            prop_assert!(reliability(a, tc, Some((b + db, tt))) <= base);
            prop_assert!(reliability(a, tc, Some((b, tt + dtt))) <= base);
        }

        #[test]
        fn delays_are_homogeneous(s in 1.0..1e8f64, d in 1.0..3000.0f64, f in 1e8..1e10f64, r in 1e6..1e9f64) {
            let t1 = task_with(s, d);
            let t2 = task_with(2.0 * s, d);
            let n = node(f);
            let l = LinkSpec::new(0, 1, r, 0.0).unwrap();
            let e1 = exec_delay(&t1, &n).unwrap();
            let e2 = exec_delay(&t2, &n).unwrap();
            prop_assert!((e2 - 2.0 * e1).abs() <= 1e-12 * e2.max(1.0));
            let x1 = trans_delay(&t1, &l).unwrap();
            let x2 = trans_delay(&t2, &l).unwrap();
            prop_assert!((x2 - 2.0 * x1).abs() <= 1e-12 * x2.max(1.0));
        }

        #[test]
        fn outcome_independent_of_cycle_representation(
            s in 1.0..1e7f64, d in 1.0..3000.0f64, f in 1e8..1e10f64, floor in 0.5..1.0f64, rate in 0.0..0.5f64,
        ) {
            let derived = Task::new(0, 0, 0, s, d, 4.0, floor);
            let stored = Task { cycles: s * d, ..derived.clone() };
            let mut n = node(f);
            n.sw_fail_rate = rate;
            let a = {
                let tc = exec_delay(&derived, &n).unwrap();
                task_outcome(tc, reliability(n.exec_fail_rate(), tc, None), &derived)
            };
            let b = {
                let tc = exec_delay(&stored, &n).unwrap();
                task_outcome(tc, reliability(n.exec_fail_rate(), tc, None), &stored)
            };
            prop_assert_eq!(a, b);
        }
    }
}
