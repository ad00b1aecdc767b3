//! Guidance pipeline: structured prompts, dual-store memory with ranked
//! retrieval, reflection on failures, and a schema-checked decision step
//! that always falls back to a mask-valid action.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, Action, ActionMask, Env, LocalView, TransitionRecord};
use crate::model::{NodeId, Outcome};
use crate::rng::{self, StreamRng};

/// One-line output schema every provider must follow.
pub const SCHEMA: &str = "ACTION=<LOCAL|FORWARD> TARGET=<id>";
/// Schema for reflection answers.
pub const REFLECT_SCHEMA: &str = "CAUSE=<deadline|reliability> SAFER=<LOCAL|FORWARD> TARGET=<id>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// relevance weights for location, type, task similarity and load similarity
    pub weights: [f64; 4],
    pub top_k: usize,
    pub short_cap: usize,
    pub long_cap: usize,
    /// trajectory items folded into one summary per compaction batch
    pub compact_batch: usize,
    pub timeout_ms: u64,
    /// query the provider every `stride` slots
    pub stride: u32,
    pub reflect: bool,
    pub retries: u32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            weights: [0.25; 4],
            top_k: 4,
            short_cap: 256,
            long_cap: 128,
            compact_batch: 32,
            timeout_ms: 1000,
            stride: 1,
            reflect: true,
            retries: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err("relevance weights must be non-negative".into());
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("relevance weights must sum to 1".into());
        }
        if self.short_cap == 0 || self.compact_batch == 0 || self.stride == 0 {
            return Err("short_cap, compact_batch and stride must be positive".into());
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

// ---------------------------------------------------------------- prompt

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSection {
    pub id: NodeId,
    pub cpu: f64,
    pub exec_len: usize,
    pub exec_backlog: f64,
    pub buffer_len: usize,
    pub buffer_backlog: f64,
    pub sw_fail: f64,
    pub hw_fail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    pub size: f64,
    pub intensity: f64,
    pub cycles: f64,
    pub deadline: f64,
    pub remaining: f64,
    pub hops: u32,
    pub wait: u32,
    pub floor: f64,
    pub slot_duration: f64,
}

/// A reachable neighbour together with its link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSection {
    pub id: NodeId,
    pub rate: f64,
    pub link_fail: f64,
    pub cpu: f64,
    pub exec_fail: f64,
    pub exec_backlog: f64,
    pub buffer_backlog: f64,
    /// tasks waiting for the neighbour's own decision
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRisk {
    pub id: NodeId,
    pub trans_delay: f64,
    pub link_risk: f64,
    pub load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub local_wait: f64,
    pub exec_risk: f64,
    pub links: Vec<LinkRisk>,
}

impl RiskSummary {
    pub fn compute(node: &NodeSection, task: &TaskSection, links: &[LinkSection]) -> Self {
        let exec = if node.cpu > 0.0 { task.cycles / node.cpu } else { f64::INFINITY };
        Self {
            local_wait: node.exec_backlog,
            exec_risk: 1.0 - (-(node.sw_fail + node.hw_fail) * exec).exp(),
            links: links
                .iter()
                .map(|l| {
                    let tt = task.size / l.rate;
                    LinkRisk { id: l.id, trans_delay: tt, link_risk: 1.0 - (-l.link_fail * tt).exp(), load: l.exec_backlog }
                })
                .collect(),
        }
    }
}

/// Structured prompt; `text` is always `render` of the other fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub node: NodeSection,
    pub task: TaskSection,
    pub links: Vec<LinkSection>,
    pub context: Vec<MemoryItem>,
    pub risk: RiskSummary,
    pub text: String,
}

/// Sections recovered from rendered prompt text.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrompt {
    pub node: NodeSection,
    pub task: TaskSection,
    pub links: Vec<LinkSection>,
    pub context_lines: usize,
    pub risk: RiskSummary,
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("missing section {0}")]
    Missing(&'static str),
    #[error("bad field {0}")]
    Field(String),
}

impl PromptBundle {
    /// Builds the prompt for `agent`; `None` when it has no task.
    pub fn build(view: &LocalView, mask: &ActionMask, context: Vec<MemoryItem>) -> Option<Self> {
        let t = view.task.as_ref()?;
        let node = NodeSection {
            id: view.node.id,
            cpu: view.node.compute_capacity,
            exec_len: view.exec_len,
            exec_backlog: view.exec_backlog,
            buffer_len: view.buffer_len,
            buffer_backlog: view.buffer_backlog,
            sw_fail: view.node.sw_fail_rate,
            hw_fail: view.node.hw_fail_rate,
        };
        let task = TaskSection {
            size: t.size,
            intensity: t.intensity,
            cycles: t.cycles,
            deadline: t.deadline,
            remaining: t.remaining_deadline,
            hops: t.hops,
            wait: t.wait_slots,
            floor: t.reliability_floor,
            slot_duration: view.slot_duration,
        };
        let links: Vec<LinkSection> = view
            .neighbors
            .iter()
            .filter(|n| mask.forward(n.slot))
            .map(|n| LinkSection {
                id: n.id,
                rate: n.rate,
                link_fail: n.link_fail_rate,
                cpu: n.compute_capacity,
                exec_fail: n.exec_fail_rate,
                exec_backlog: n.exec_backlog,
                buffer_backlog: n.buffer_backlog,
                pending: n.pending,
            })
            .collect();
        let risk = RiskSummary::compute(&node, &task, &links);
        let mut b = Self { node, task, links, context, risk, text: String::new() };
        b.text = b.render();
        Some(b)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let n = &self.node;
        let _ = writeln!(
            s,
            "[S] node={} cpu={} exec_len={} exec_backlog={} buffer_len={} buffer_backlog={} sw_fail={} hw_fail={}",
            n.id, n.cpu, n.exec_len, n.exec_backlog, n.buffer_len, n.buffer_backlog, n.sw_fail, n.hw_fail
        );
        let t = &self.task;
        let _ = writeln!(
            s,
            "[T] size={} intensity={} cycles={} deadline={} remaining={} hops={} wait={} floor={} slot={}",
            t.size, t.intensity, t.cycles, t.deadline, t.remaining, t.hops, t.wait, t.floor, t.slot_duration
        );
        for l in &self.links {
            let _ = writeln!(
                s,
                "[N] node={} rate={} link_fail={} cpu={} exec_fail={} exec_backlog={} buffer_backlog={} pending={}",
                l.id, l.rate, l.link_fail, l.cpu, l.exec_fail, l.exec_backlog, l.buffer_backlog, l.pending
            );
        }
        for c in &self.context {
            let _ = writeln!(s, "[C] {}", c.describe());
        }
        let _ = writeln!(s, "[R] local_wait={} exec_risk={}", self.risk.local_wait, self.risk.exec_risk);
        for r in &self.risk.links {
            let _ = writeln!(s, "[R] node={} trans_delay={} link_risk={} load={}", r.id, r.trans_delay, r.link_risk, r.load);
        }
        let _ = write!(s, "[O] {SCHEMA}");
        s
    }
}

fn fields(line: &str) -> HashMap<&str, &str> {
    line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

fn field<T: std::str::FromStr>(m: &HashMap<&str, &str>, k: &str) -> Result<T, PromptError> {
    m.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| PromptError::Field(k.to_string()))
}

/// Inverse of [`PromptBundle::render`] for the S, T, N and R sections.
pub fn parse_prompt(text: &str) -> Result<ParsedPrompt, PromptError> {
    let mut node = None;
    let mut task = None;
    let mut links = Vec::new();
    let mut context_lines = 0;
    let mut risk: Option<RiskSummary> = None;
    let mut link_risks = Vec::new();
    for line in text.lines() {
        let (tag, rest) = line.split_at(line.len().min(3));
        let m = fields(rest);
        match tag {
            "[S]" => {
                node = Some(NodeSection {
                    id: field(&m, "node")?,
                    cpu: field(&m, "cpu")?,
                    exec_len: field(&m, "exec_len")?,
                    exec_backlog: field(&m, "exec_backlog")?,
                    buffer_len: field(&m, "buffer_len")?,
                    buffer_backlog: field(&m, "buffer_backlog")?,
                    sw_fail: field(&m, "sw_fail")?,
                    hw_fail: field(&m, "hw_fail")?,
                })
            }
            "[T]" => {
                task = Some(TaskSection {
                    size: field(&m, "size")?,
                    intensity: field(&m, "intensity")?,
                    cycles: field(&m, "cycles")?,
                    deadline: field(&m, "deadline")?,
                    remaining: field(&m, "remaining")?,
                    hops: field(&m, "hops")?,
                    wait: field(&m, "wait")?,
                    floor: field(&m, "floor")?,
                    slot_duration: field(&m, "slot")?,
                })
            }
            "[N]" => links.push(LinkSection {
                id: field(&m, "node")?,
                rate: field(&m, "rate")?,
                link_fail: field(&m, "link_fail")?,
                cpu: field(&m, "cpu")?,
                exec_fail: field(&m, "exec_fail")?,
                exec_backlog: field(&m, "exec_backlog")?,
                buffer_backlog: field(&m, "buffer_backlog")?,
                pending: field(&m, "pending")?,
            }),
            "[C]" => context_lines += 1,
            "[R]" if m.contains_key("local_wait") => {
                risk = Some(RiskSummary { local_wait: field(&m, "local_wait")?, exec_risk: field(&m, "exec_risk")?, links: Vec::new() })
            }
            "[R]" => link_risks.push(LinkRisk {
                id: field(&m, "node")?,
                trans_delay: field(&m, "trans_delay")?,
                link_risk: field(&m, "link_risk")?,
                load: field(&m, "load")?,
            }),
            _ => {}
        }
    }
    let mut risk = risk.ok_or(PromptError::Missing("R"))?;
    risk.links = link_risks;
    Ok(ParsedPrompt {
        node: node.ok_or(PromptError::Missing("S"))?,
        task: task.ok_or(PromptError::Missing("T"))?,
        links,
        context_lines,
        risk,
    })
}

// ---------------------------------------------------------------- memory

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    Trajectory,
    Summary,
    Reflection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Local,
    Forward(NodeId),
}

impl Choice {
    pub fn label(&self) -> String {
        match self {
            Choice::Local => "LOCAL".into(),
            Choice::Forward(j) => format!("FORWARD:{j}"),
        }
    }
}

/// Aggregates carried by summary items.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub total_reward: f64,
    pub local_count: usize,
    pub local_reward: f64,
    pub forward_count: usize,
    pub forward_reward: f64,
    pub deadline_failures: usize,
    pub reliability_failures: usize,
}

impl SummaryStats {
    pub fn mean_local(&self) -> f64 {
        if self.local_count == 0 {
            0.0
        } else {
            self.local_reward / self.local_count as f64
        }
    }

    pub fn mean_forward(&self) -> f64 {
        if self.forward_count == 0 {
            0.0
        } else {
            self.forward_reward / self.forward_count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub node: NodeId,
    pub task_type: u8,
    /// normalised (size, intensity, remaining deadline)
    pub profile: [f64; 3],
    /// normalised (exec backlog, buffer backlog)
    pub load: [f64; 2],
    pub action: Choice,
    pub reward: f64,
    pub kind: MemoryKind,
    pub index: u64,
    pub outcome: Option<Outcome>,
    pub note: String,
    pub summary: Option<SummaryStats>,
}

impl MemoryItem {
    pub fn describe(&self) -> String {
        let kind = match self.kind {
            MemoryKind::Trajectory => "trajectory",
            MemoryKind::Summary => "summary",
            MemoryKind::Reflection => "reflection",
        };
        let mut s = format!("kind={kind} node={} type={} action={} reward={}", self.node, self.task_type, self.action.label(), self.reward);
        if let Some(st) = &self.summary {
            let _ = write!(
                s,
                " count={} mean_local={:.3} mean_forward={:.3} deadline_failures={} reliability_failures={}",
                st.count,
                st.mean_local(),
                st.mean_forward(),
                st.deadline_failures,
                st.reliability_failures
            );
        }
        if !self.note.is_empty() {
            let _ = write!(s, " note={}", self.note.replace(char::is_whitespace, "_"));
        }
        s
    }
}

/// Retrieval key built from the current decision context.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQuery {
    pub node: NodeId,
    pub task_type: u8,
    pub profile: [f64; 3],
    pub load: [f64; 2],
}

/// Three-by-three grid over normalised size and intensity.
pub fn task_type(size_norm: f64, intensity_norm: f64) -> u8 {
    let bin = |x: f64| ((x.clamp(0.0, 1.0) * 3.0).floor() as u8).min(2);
    3 * bin(size_norm) + bin(intensity_norm)
}

impl MemoryQuery {
    pub fn from_view(view: &LocalView, scales: &env::ObsScales, intensity_max: f64) -> Option<Self> {
        let t = view.task.as_ref()?;
        let unit = |x: f64| x.clamp(0.0, 1.0);
        let s = unit(t.size / scales.size_max);
        let d = unit(t.intensity / intensity_max.max(f64::MIN_POSITIVE));
        Some(Self {
            node: view.node.id,
            task_type: task_type(s, d),
            profile: [s, d, unit(t.remaining_deadline / scales.deadline_max)],
            load: [unit(view.exec_backlog / scales.queue_time()), unit(view.buffer_backlog / scales.queue_time())],
        })
    }
}

fn similarity(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Weighted relevance of a stored item to a query.
pub fn relevance(q: &MemoryQuery, m: &MemoryItem, w: &[f64; 4]) -> f64 {
    let loc = if q.node == m.node { 1.0 } else { 0.0 };
    let ty = if q.task_type == m.task_type { 1.0 } else { 0.0 };
    w[0] * loc + w[1] * ty + w[2] * similarity(&q.profile, &m.profile) + w[3] * similarity(&q.load, &m.load)
}

/// Top-`k` items by relevance, most recent first on ties.
pub fn retrieve<'a, I>(q: &MemoryQuery, items: I, w: &[f64; 4], k: usize) -> Vec<MemoryItem>
where
    I: IntoIterator<Item = &'a MemoryItem>,
{
    if k == 0 {
        return Vec::new();
    }
    let mut scored: Vec<(f64, &MemoryItem)> = items.into_iter().map(|m| (relevance(q, m, w), m)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.index.cmp(&a.1.index)));
    scored.into_iter().take(k).map(|(_, m)| m.clone()).collect()
}

/// Folds trajectory items into one summary item.
pub fn summarize(items: &[MemoryItem], index: u64) -> MemoryItem {
    let mut st = SummaryStats::default();
    let mut profile = [0.0; 3];
    let mut load = [0.0; 2];
    let mut nodes: HashMap<NodeId, usize> = HashMap::new();
    let mut types: HashMap<u8, usize> = HashMap::new();
    for m in items {
        st.count += 1;
        st.total_reward += m.reward;
        match m.action {
            Choice::Local => {
                st.local_count += 1;
                st.local_reward += m.reward;
            }
            Choice::Forward(_) => {
                st.forward_count += 1;
                st.forward_reward += m.reward;
            }
        }
        match m.outcome {
            Some(Outcome::DeadlineViolation) => st.deadline_failures += 1,
            Some(Outcome::ReliabilityViolation) => st.reliability_failures += 1,
            _ => {}
        }
        for (p, x) in profile.iter_mut().zip(m.profile) {
            *p += x;
        }
        for (l, x) in load.iter_mut().zip(m.load) {
            *l += x;
        }
        *nodes.entry(m.node).or_default() += 1;
        *types.entry(m.task_type).or_default() += 1;
    }
    let n = items.len().max(1) as f64;
    profile.iter_mut().for_each(|p| *p /= n);
    load.iter_mut().for_each(|l| *l /= n);
    // most frequent, smallest key on ties
    let mode = |h: HashMap<usize, usize>| h.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|x| x.0).unwrap_or(0);
    let node = mode(nodes);
    let task_type = mode(types.into_iter().map(|(k, v)| (k as usize, v)).collect()) as u8;
    let forward_targets: HashMap<usize, usize> = items.iter().fold(HashMap::new(), |mut h, m| {
        if let Choice::Forward(j) = m.action {
            *h.entry(j).or_default() += 1;
        }
        h
    });
    let action = if st.forward_count > 0 && (st.local_count == 0 || st.mean_forward() > st.mean_local()) {
        Choice::Forward(mode(forward_targets))
    } else {
        Choice::Local
    };
    MemoryItem {
        node,
        task_type,
        profile,
        load,
        action,
        reward: st.total_reward,
        kind: MemoryKind::Summary,
        index,
        outcome: None,
        note: String::new(),
        summary: Some(st),
    }
}

/// Short-term trajectory store plus bounded FIFO long-term store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    pub short: Vec<MemoryItem>,
    pub long: VecDeque<MemoryItem>,
    pub short_cap: usize,
    pub long_cap: usize,
    pub compact_batch: usize,
    next_index: u64,
}

impl Memory {
    pub fn new(short_cap: usize, long_cap: usize, compact_batch: usize) -> Self {
        Self { short_cap, long_cap, compact_batch: compact_batch.max(1), ..Default::default() }
    }

    pub fn from_config(cfg: &GuidanceConfig) -> Self {
        Self::new(cfg.short_cap, cfg.long_cap, cfg.compact_batch)
    }

    pub fn len(&self) -> usize {
        self.short.len() + self.long.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stamp(&mut self, mut m: MemoryItem) -> MemoryItem {
        m.index = self.next_index;
        self.next_index += 1;
        m
    }

    pub fn push_short(&mut self, m: MemoryItem) {
        let m = self.stamp(m);
        self.short.push(m);
        self.compact();
    }

    pub fn push_long(&mut self, m: MemoryItem) {
        let m = self.stamp(m);
        self.long.push_back(m);
        while self.long.len() > self.long_cap {
            self.long.pop_front();
        }
    }

    /// Moves the oldest trajectory batches into long-term summaries until
    /// the short store is back under its cap.
    pub fn compact(&mut self) {
        while self.short.len() > self.short_cap {
            let take = self.compact_batch.min(self.short.len()).max(self.short.len() - self.short_cap + 1).min(self.short.len());
            let batch: Vec<MemoryItem> = self.short.drain(..take).collect();
            let s = summarize(&batch, 0);
            self.push_long(s);
        }
    }

    pub fn items(&self) -> impl Iterator<Item = &MemoryItem> {
        self.short.iter().chain(self.long.iter())
    }

    pub fn retrieve(&self, q: &MemoryQuery, w: &[f64; 4], k: usize) -> Vec<MemoryItem> {
        retrieve(q, self.items(), w, k)
    }
}

// ---------------------------------------------------------------- providers

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {0}")]
    Status(u16),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
}

/// Anything that answers a rendered prompt with schema text.
pub trait Provider: Send {
    fn name(&self) -> String;
    fn complete(&mut self, prompt: &str, schema: &str, timeout: Duration) -> Result<String, ProviderError>;
}

fn slot_ceil(x: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return x;
    }
    (x / tau).ceil().max(1.0) * tau
}

/// Predicted (delay, reliability) of a candidate under the prompt's numbers.
pub fn estimate(p: &ParsedPrompt, target: Choice) -> Option<(f64, f64)> {
    let t = &p.task;
    match target {
        Choice::Local => {
            let exec = t.cycles / p.node.cpu;
            Some((p.node.exec_backlog + exec, (-(p.node.sw_fail + p.node.hw_fail) * exec).exp()))
        }
        Choice::Forward(j) => {
            let l = p.links.iter().find(|l| l.id == j)?;
            let tt = t.size / l.rate;
            let exec = t.cycles / l.cpu;
            let queued = l.pending as f64 * t.slot_duration;
            let delay = slot_ceil(l.buffer_backlog + tt, t.slot_duration) + queued + l.exec_backlog + exec;
            Some((delay, (-l.exec_fail * exec - l.link_fail * tt).exp()))
        }
    }
}

/// Ranks candidates: reliability floor met first, then reliability-weighted slack.
pub fn slack_score(p: &ParsedPrompt, c: Choice) -> Option<(bool, f64)> {
    let (delay, rel) = estimate(p, c)?;
    Some((rel >= p.task.floor, rel * (p.task.remaining - delay)))
}

pub fn candidates(p: &ParsedPrompt) -> Vec<Choice> {
    let mut v = vec![Choice::Local];
    v.extend(p.links.iter().map(|l| Choice::Forward(l.id)));
    v
}

/// Best candidate by [`slack_score`]; earlier candidates win ties. Tasks
/// that cannot meet the deadline anywhere are parked.
pub fn best_choice(p: &ParsedPrompt) -> Choice {
    if !candidates(p).into_iter().any(|c| estimate(p, c).is_some_and(|(d, _)| d <= p.task.remaining)) {
        return park(p);
    }
    let mut best: Option<(Choice, (bool, f64))> = None;
    for c in candidates(p) {
        if let Some(s) = slack_score(p, c) {
            let better = match &best {
                None => true,
                Some((_, b)) => (s.0, s.1) > (b.0, b.1) && !(s.0 == b.0 && s.1 == b.1),
            };
            if better {
                best = Some((c, s));
            }
        }
    }
    best.map_or(Choice::Local, |b| b.0)
}

/// Destination for a task no candidate can finish in time: the link where it
/// waits longest before reaching any processor, so it expires without
/// taking compute from tasks that can still succeed.
pub fn park(p: &ParsedPrompt) -> Choice {
    p.links
        .iter()
        .max_by(|a, b| (a.buffer_backlog + p.task.size / a.rate).total_cmp(&(b.buffer_backlog + p.task.size / b.rate)))
        .map_or(Choice::Local, |l| Choice::Forward(l.id))
}

pub fn format_choice(agent: NodeId, c: Choice) -> String {
    match c {
        Choice::Local => format!("ACTION=LOCAL TARGET={agent}"),
        Choice::Forward(j) => format!("ACTION=FORWARD TARGET={j}"),
    }
}

const MALFORMED: [&str; 5] = ["", "ACTION=TELEPORT TARGET=1", "forward it somewhere", "ACTION=FORWARD", "{\"action\": 3}"];

/// Deterministic rule-based provider.
pub struct ScriptedProvider {
    pub noise: f64,
    rng: StreamRng,
}

impl ScriptedProvider {
    pub fn new(seed: u64) -> Self {
        Self::noisy(seed, 0.0)
    }

    /// Emits malformed output with probability `noise`.
    pub fn noisy(seed: u64, noise: f64) -> Self {
        Self { noise, rng: rng::stream(seed, "provider") }
    }

    fn reflect(&self, text: &str) -> Result<String, ProviderError> {
        let m = text.lines().find(|l| l.starts_with("[D]")).map(fields).ok_or(ProviderError::BadResponse("no diagnosis".into()))?;
        let cause = if m.get("outcome") == Some(&"reliability") { "reliability" } else { "deadline" };
        let p = parse_prompt(text).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        // safer choice: shortest predicted delay for deadline misses, highest reliability otherwise
        let mut best = (Choice::Local, f64::NEG_INFINITY);
        for c in candidates(&p) {
            if let Some((d, r)) = estimate(&p, c) {
                let s = if cause == "deadline" { -d } else { r };
                if s > best.1 {
                    best = (c, s);
                }
            }
        }
        let (safer, target) = match best.0 {
            Choice::Local => ("LOCAL", p.node.id),
            Choice::Forward(j) => ("FORWARD", j),
        };
        Ok(format!("CAUSE={cause} SAFER={safer} TARGET={target}"))
    }
}

impl Provider for ScriptedProvider {
    fn name(&self) -> String {
        if self.noise > 0.0 {
            format!("scripted(noise={})", self.noise)
        } else {
            "scripted".into()
        }
    }

    fn complete(&mut self, prompt: &str, schema: &str, _timeout: Duration) -> Result<String, ProviderError> {
        if self.noise > 0.0 && self.rng.gen::<f64>() < self.noise {
            return Ok(MALFORMED[self.rng.gen_range(0..MALFORMED.len())].to_string());
        }
        if schema == REFLECT_SCHEMA {
            return self.reflect(prompt);
        }
        let p = parse_prompt(prompt).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        Ok(format_choice(p.node.id, best_choice(&p)))
    }
}

/// Sleeps before answering `ACTION=LOCAL`; stands in for a hung backend.
pub struct StallingProvider {
    pub delay: Duration,
}

impl Provider for StallingProvider {
    fn name(&self) -> String {
        format!("stalling({}ms)", self.delay.as_millis())
    }

    fn complete(&mut self, prompt: &str, _schema: &str, _timeout: Duration) -> Result<String, ProviderError> {
        thread::sleep(self.delay);
        let id = parse_prompt(prompt).map(|p| p.node.id).unwrap_or(0);
        Ok(format_choice(id, Choice::Local))
    }
}

/// Always errors; exercises the fallback path.
pub struct FailingProvider;

impl Provider for FailingProvider {
    fn name(&self) -> String {
        "failing".into()
    }

    fn complete(&mut self, _: &str, _: &str, _: Duration) -> Result<String, ProviderError> {
        Err(ProviderError::Transport("provider offline".into()))
    }
}

type Job = (u64, String, String, Duration);

/// Runs an inner provider on a worker thread and enforces the timeout
/// regardless of how long the inner call blocks.
pub struct Watchdog {
    name: String,
    tx: mpsc::Sender<Job>,
    rx: mpsc::Receiver<(u64, Result<String, ProviderError>)>,
    next: u64,
}

impl Watchdog {
    pub fn new<P: Provider + 'static>(mut inner: P) -> Self {
        let name = format!("watchdog({})", inner.name());
        let (tx, jobs) = mpsc::channel::<Job>();
        let (done, rx) = mpsc::channel();
        thread::spawn(move || {
            for (id, prompt, schema, timeout) in jobs {
                let r = inner.complete(&prompt, &schema, timeout);
                if done.send((id, r)).is_err() {
                    break;
                }
            }
        });
        Self { name, tx, rx, next: 0 }
    }
}

impl Provider for Watchdog {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn complete(&mut self, prompt: &str, schema: &str, timeout: Duration) -> Result<String, ProviderError> {
        let id = self.next;
        self.next += 1;
        let deadline = Instant::now() + timeout;
        self.tx
            .send((id, prompt.to_string(), schema.to_string(), timeout))
            .map_err(|_| ProviderError::Transport("worker stopped".into()))?;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok((got, r)) if got == id => return r,
                // late answer to an abandoned request
                Ok(_) => continue,
                Err(mpsc::RecvTimeoutError::Timeout) => return Err(ProviderError::Timeout),
                Err(mpsc::RecvTimeoutError::Disconnected) => return Err(ProviderError::Transport("worker stopped".into())),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub prompt: String,
    pub schema: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub action: String,
    pub target: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub endpoint: String,
    pub schema: String,
    pub prompt: String,
    pub status: Option<u16>,
    pub response: Option<String>,
    pub error: Option<String>,
    pub elapsed_ms: f64,
}

/// Remote provider speaking JSON over HTTP POST.
pub struct HttpProvider {
    pub endpoint: String,
    pub retries: u32,
    replay: Option<std::fs::File>,
}

impl HttpProvider {
    pub fn new(endpoint: &str) -> Self {
        Self { endpoint: endpoint.to_string(), retries: 0, replay: None }
    }

    /// Appends every exchange as one JSON line to `path`.
    pub fn with_replay(mut self, path: PathBuf) -> std::io::Result<Self> {
        self.replay = Some(std::fs::OpenOptions::new().create(true).append(true).open(path)?);
        Ok(self)
    }

    fn once(&self, body: &HttpRequest, timeout: Duration) -> (Option<u16>, Result<String, ProviderError>) {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        match agent.post(&self.endpoint).send_json(body) {
            Ok(resp) => {
                let status = resp.status();
                (Some(status), resp.into_string().map_err(|e| ProviderError::Transport(e.to_string())))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let _ = resp.into_string();
                (Some(code), Err(ProviderError::Status(code)))
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                let timed_out = matches!(t.kind(), ureq::ErrorKind::Io) && msg.to_lowercase().contains("timed out");
                (None, Err(if timed_out { ProviderError::Timeout } else { ProviderError::Transport(msg) }))
            }
        }
    }
}

impl Provider for HttpProvider {
    fn name(&self) -> String {
        format!("http({})", self.endpoint)
    }

    fn complete(&mut self, prompt: &str, schema: &str, timeout: Duration) -> Result<String, ProviderError> {
        let body = HttpRequest { prompt: prompt.to_string(), schema: schema.to_string() };
        let start = Instant::now();
        let mut attempt = 0;
        let (status, raw) = loop {
            let left = timeout.saturating_sub(start.elapsed());
            if left.is_zero() {
                break (None, Err(ProviderError::Timeout));
            }
            let (status, r) = self.once(&body, left);
            if r.is_ok() || attempt >= self.retries {
                break (status, r);
            }
            attempt += 1;
        };
        if let Some(f) = self.replay.as_mut() {
            let entry = ReplayEntry {
                endpoint: self.endpoint.clone(),
                schema: schema.to_string(),
                prompt: prompt.to_string(),
                status,
                response: raw.as_ref().ok().cloned(),
                error: raw.as_ref().err().map(ToString::to_string),
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            if let Ok(line) = serde_json::to_string(&entry) {
                let _ = writeln!(f, "{line}");
            }
        }
        let text = raw?;
        let r: HttpResponse = serde_json::from_str(&text).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let agent = parse_prompt(prompt).map(|p| p.node.id).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let target = |r: &HttpResponse| r.target.map(|t| t.to_string()).unwrap_or_default();
        Ok(match r.action.to_ascii_lowercase().as_str() {
            "local" => format!("ACTION=LOCAL TARGET={agent}"),
            "forward" => format!("ACTION=FORWARD TARGET={}", target(&r)),
            other => other.to_string(),
        })
    }
}

/// Behaviour of the in-process HTTP stub.
#[derive(Debug, Clone)]
pub enum StubBehavior {
    /// answers `{"action":"local","target":null}`
    Local,
    /// runs the scripted rule on the received prompt
    Scripted,
    /// replies with the given status code
    Status(u16),
    /// sleeps before answering local
    Delay(Duration),
    /// returns a body that is not the response schema
    Garbage,
}

/// Minimal single-threaded HTTP/1.1 server used by tests and examples.
pub struct StubServer {
    pub url: String,
    stop: Arc<AtomicBool>,
    handle: Option<thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start(behavior: StubBehavior) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let url = format!("http://{}/decide", listener.local_addr()?);
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let b = behavior.clone();
                        thread::spawn(move || {
                            let _ = serve_one(stream, &b);
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(1)),
                    Err(_) => break,
                }
            }
        });
        Ok(Self { url, stop, handle: Some(handle) })
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_one(stream: TcpStream, b: &StubBehavior) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let req: Option<HttpRequest> = serde_json::from_slice(&body).ok();
    let local = r#"{"action":"local","target":null}"#.to_string();
    let (code, payload) = match b {
        StubBehavior::Local => (200, local),
        StubBehavior::Status(c) => (*c, "{}".to_string()),
        StubBehavior::Delay(d) => {
            thread::sleep(*d);
            (200, local)
        }
        StubBehavior::Garbage => (200, "not json at all".to_string()),
        StubBehavior::Scripted => match req.as_ref().and_then(|r| parse_prompt(&r.prompt).ok()) {
            Some(p) => {
                let r = match best_choice(&p) {
                    Choice::Local => HttpResponse { action: "local".into(), target: None },
                    Choice::Forward(j) => HttpResponse { action: "forward".into(), target: Some(j as i64) },
                };
                (200, serde_json::to_string(&r).unwrap_or(local))
            }
            None => (400, "{}".to_string()),
        },
    };
    let mut out = stream;
    write!(out, "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}", payload.len())?;
    out.flush()
}

// ---------------------------------------------------------------- decisions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDecision {
    pub choice: Choice,
    /// the decision as an environment action; always allowed by the mask
    pub action: Action,
    pub raw: String,
    pub valid: bool,
    pub failure: Option<String>,
    pub latency: Duration,
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("expected `{SCHEMA}`, got `{0}`")]
    Format(String),
    #[error("local target {0} is not the deciding node")]
    LocalTarget(NodeId),
}

/// Strict parse of one schema line.
pub fn parse_decision(text: &str, agent: NodeId) -> Result<Choice, SchemaError> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let bad = || SchemaError::Format(text.to_string());
    if toks.len() != 2 {
        return Err(bad());
    }
    let target: NodeId = toks[1].strip_prefix("TARGET=").and_then(|t| t.parse().ok()).ok_or_else(bad)?;
    match toks[0] {
        "ACTION=LOCAL" if target == agent => Ok(Choice::Local),
        "ACTION=LOCAL" => Err(SchemaError::LocalTarget(target)),
        "ACTION=FORWARD" => Ok(Choice::Forward(target)),
        _ => Err(bad()),
    }
}

/// Safe action: local when allowed, else the first valid action.
pub fn fallback_action(mask: &ActionMask) -> Action {
    let n = mask.nodes();
    if mask.local() {
        Action::Local
    } else {
        mask.valid_indices().first().map_or(Action::Idle, |&k| Action::from_index(k, n))
    }
}

fn choice_action(agent: NodeId, c: Choice, mask: &ActionMask) -> Option<Action> {
    let a = match c {
        Choice::Local => Action::Local,
        Choice::Forward(j) => Action::Forward(env::node_slot(agent, j)?),
    };
    (a.index(mask.nodes()) < mask.bits.len() && mask.allows(a)).then_some(a)
}

/// Queries the provider and validates the answer; never fails.
pub fn decide(bundle: &PromptBundle, mask: &ActionMask, provider: &mut dyn Provider, timeout: Duration) -> GuidanceDecision {
    let agent = bundle.node.id;
    let start = Instant::now();
    let res = provider.complete(&bundle.text, SCHEMA, timeout);
    let latency = start.elapsed();
    let fallback = |raw: String, why: String| GuidanceDecision {
        choice: Choice::Local,
        action: fallback_action(mask),
        raw,
        valid: false,
        failure: Some(why),
        latency,
    };
    let raw = match res {
        Ok(r) if latency <= timeout => r,
        Ok(r) => return fallback(r, ProviderError::Timeout.to_string()),
        Err(e) => return fallback(String::new(), e.to_string()),
    };
    match parse_decision(&raw, agent) {
        Ok(c) => match choice_action(agent, c, mask) {
            Some(action) => GuidanceDecision { choice: c, action, raw, valid: true, failure: None, latency },
            None => fallback(raw, "target not allowed by mask".into()),
        },
        Err(e) => fallback(raw, e.to_string()),
    }
}

// ---------------------------------------------------------------- orchestration

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceStats {
    pub queries: usize,
    pub valid: usize,
    pub timeouts: usize,
    pub reflections: usize,
    pub reflection_failures: usize,
    pub latency_s: f64,
}

impl GuidanceStats {
    pub fn validity_rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.valid as f64 / self.queries as f64
        }
    }

    pub fn mean_latency(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.latency_s / self.queries as f64
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    item: MemoryItem,
    bundle: PromptBundle,
}

/// Reflection diagnosis prompt.
pub fn diagnosis_prompt(bundle: &PromptBundle, action: Choice, reward: f64, outcome: Outcome) -> String {
    let label = match outcome {
        Outcome::DeadlineViolation => "deadline",
        Outcome::ReliabilityViolation => "reliability",
        Outcome::Success => "success",
    };
    format!("{}\n[D] action={} reward={} outcome={label}", bundle.render(), action.label(), reward)
}

/// Parses `CAUSE=.. SAFER=.. TARGET=..` into a short note.
pub fn parse_reflection(text: &str) -> Option<String> {
    let m = fields(text);
    let cause = *m.get("CAUSE")?;
    let safer = *m.get("SAFER")?;
    let target = *m.get("TARGET")?;
    matches!(cause, "deadline" | "reliability").then(|| format!("cause:{cause};safer:{safer}:{target}"))
}

/// Per-run guidance state shared by all agents.
pub struct Guide {
    pub cfg: GuidanceConfig,
    pub memory: Memory,
    pub provider: Box<dyn Provider>,
    pub stats: GuidanceStats,
    intensity_max: f64,
    pending: HashMap<(u32, NodeId), Pending>,
}

impl Guide {
    pub fn new(cfg: GuidanceConfig, provider: Box<dyn Provider>, intensity_max: f64) -> Self {
        Self { memory: Memory::from_config(&cfg), cfg, provider, stats: GuidanceStats::default(), intensity_max, pending: HashMap::new() }
    }

    pub fn for_env(cfg: GuidanceConfig, provider: Box<dyn Provider>, env: &Env) -> Self {
        Self::new(cfg, provider, env.config().intensity_cycles_per_bit.hi)
    }

    /// Drops bookkeeping for decisions that will never resolve.
    pub fn new_episode(&mut self) {
        self.pending.clear();
    }

    pub fn wants_query(&self, slot: u32) -> bool {
        slot.is_multiple_of(self.cfg.stride)
    }

    /// Builds the prompt for `agent` with retrieved context.
    pub fn prompt(&self, env: &Env, agent: NodeId) -> Option<(PromptBundle, MemoryQuery)> {
        let view = env.local_view(agent);
        let q = MemoryQuery::from_view(&view, env.scales(), self.intensity_max)?;
        let ctx = self.memory.retrieve(&q, &self.cfg.weights, self.cfg.top_k);
        Some((PromptBundle::build(&view, &env.masks()[agent], ctx)?, q))
    }

    /// Full advice step for one agent; `None` when it has no task.
    pub fn advise(&mut self, env: &Env, agent: NodeId) -> Option<GuidanceDecision> {
        let (bundle, q) = self.prompt(env, agent)?;
        let d = decide(&bundle, &env.masks()[agent], self.provider.as_mut(), self.cfg.timeout());
        self.stats.queries += 1;
        self.stats.latency_s += d.latency.as_secs_f64();
        if d.valid {
            self.stats.valid += 1;
        }
        if d.failure.as_deref() == Some(&ProviderError::Timeout.to_string()) {
            self.stats.timeouts += 1;
        }
        let item = MemoryItem {
            node: q.node,
            task_type: q.task_type,
            profile: q.profile,
            load: q.load,
            action: Choice::Local,
            reward: 0.0,
            kind: MemoryKind::Trajectory,
            index: 0,
            outcome: None,
            note: String::new(),
            summary: None,
        };
        self.pending.insert((env.slot(), agent), Pending { item, bundle });
        Some(d)
    }

    /// Records the action the policy actually executed.
    pub fn record_action(&mut self, slot: u32, agent: NodeId, action: Action, neighbor_ids: &[NodeId]) {
        if let Some(p) = self.pending.get_mut(&(slot, agent)) {
            p.item.action = match action {
                Action::Forward(k) => Choice::Forward(neighbor_ids.get(k).copied().unwrap_or(k)),
                _ => Choice::Local,
            };
        }
    }

    /// Stores resolved decisions and reflects on failed ones.
    pub fn observe(&mut self, rec: &TransitionRecord) {
        for r in &rec.resolutions {
            let reward = r.outcome.reward();
            let last = r.decisions.len().saturating_sub(1);
            for (k, d) in r.decisions.iter().enumerate() {
                let Some(mut p) = self.pending.remove(&(d.slot, d.agent)) else { continue };
                p.item.reward = reward;
                p.item.outcome = Some(r.outcome);
                if reward < 0.0 && k == last && self.cfg.reflect {
                    self.reflect(&p, r.outcome);
                }
                self.memory.push_short(p.item);
            }
        }
    }

    fn reflect(&mut self, p: &Pending, outcome: Outcome) {
        let text = diagnosis_prompt(&p.bundle, p.item.action, p.item.reward, outcome);
        self.stats.reflections += 1;
        let res = self.provider.complete(&text, REFLECT_SCHEMA, self.cfg.timeout());
        match res.ok().as_deref().and_then(parse_reflection) {
            Some(note) => {
                let mut item = p.item.clone();
                item.kind = MemoryKind::Reflection;
                item.note = note;
                self.memory.push_long(item);
            }
            None => {
                self.stats.reflection_failures += 1;
                log::debug!("reflection failed for node {}", p.item.node);
            }
        }
    }
}
