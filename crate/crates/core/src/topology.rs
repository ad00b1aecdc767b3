//! Time-varying undirected graph of edge nodes and links.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, EnvConfig, TopologyKind};
use crate::model::{LinkSpec, ModelError, NodeId, NodeSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub slot_duration: f64,
    #[serde(skip)]
    index: Vec<Option<usize>>,
}

impl Topology {
    pub fn new(nodes: Vec<NodeSpec>, links: Vec<LinkSpec>, slot_duration: f64) -> Result<Self, ModelError> {
        let mut t = Self { nodes, links, slot_duration, index: Vec::new() };
        t.validate()?;
        t.reindex();
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(ModelError::InvalidSpec(format!("node at position {i} has id {}", n.id)));
            }
            n.validate()?;
        }
        if !self.nodes.iter().any(|n| n.alive) {
            return Err(ModelError::InvalidSpec("no alive node".into()));
        }
        let n = self.nodes.len();
        let mut seen = vec![false; n * n];
        for l in &self.links {
            let (a, b) = l.endpoints;
            if a >= b || b >= n {
                return Err(ModelError::InvalidSpec(format!("bad link endpoints {a}-{b}")));
            }
            if std::mem::replace(&mut seen[a * n + b], true) {
                return Err(ModelError::InvalidSpec(format!("duplicate link {a}-{b}")));
            }
        }
        Ok(())
    }

    pub fn reindex(&mut self) {
        let n = self.nodes.len();
        self.index = vec![None; n * n];
        for (k, l) in self.links.iter().enumerate() {
            let (a, b) = l.endpoints;
            self.index[a * n + b] = Some(k);
            self.index[b * n + a] = Some(k);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn link_index(&self, a: NodeId, b: NodeId) -> Option<usize> {
        if self.index.len() != self.nodes.len() * self.nodes.len() {
            return self.links.iter().position(|l| l.connects(a, b));
        }
        self.index[a * self.nodes.len() + b]
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> Option<&LinkSpec> {
        self.link_index(a, b).map(|k| &self.links[k])
    }

    /// Link exists, is available and both endpoints are alive.
    pub fn usable(&self, a: NodeId, b: NodeId) -> bool {
        a != b
            && self.nodes[a].alive
            && self.nodes[b].alive
            && self.link(a, b).is_some_and(|l| l.available)
    }

    /// Currently reachable neighbours, ascending id.
    pub fn neighbors(&self, a: NodeId) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&b| self.usable(a, b)).collect()
    }

    pub fn alive_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.alive).count()
    }

    /// Whether the alive nodes form one connected component over usable links.
    pub fn is_connected(&self) -> bool {
        let alive: Vec<NodeId> = (0..self.nodes.len()).filter(|&i| self.nodes[i].alive).collect();
        let Some(&start) = alive.first() else { return false };
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for v in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        alive.iter().all(|&i| seen[i])
    }

    /// Drops every link touching `node`.
    pub fn detach(&mut self, node: NodeId) {
        self.links.retain(|l| l.endpoints.0 != node && l.endpoints.1 != node);
        self.reindex();
    }

    pub fn add_link(&mut self, link: LinkSpec) {
        debug_assert!(self.link(link.endpoints.0, link.endpoints.1).is_none());
        self.links.push(link);
        self.reindex();
    }
}

pub fn sample_node<R: Rng + ?Sized>(id: NodeId, cfg: &EnvConfig, rng: &mut R) -> NodeSpec {
    NodeSpec {
        id,
        compute_capacity: cfg.cpu_hz().sample(rng),
        memory: cfg.memory_bits(),
        arrival_prob: cfg.arrival_prob.sample(rng),
        sw_fail_rate: cfg.sw_fail_rate.sample(rng),
        hw_fail_rate: cfg.hw_fail_rate.sample(rng),
        alive: true,
    }
}

pub fn sample_link<R: Rng + ?Sized>(a: NodeId, b: NodeId, cfg: &EnvConfig, rng: &mut R) -> LinkSpec {
    let rate = cfg.rate_bps().sample(rng);
    let beta = cfg.link_fail_rate.sample(rng);
    LinkSpec::new(a, b, rate, beta).expect("config ranges validated")
}

/// Edge set of a ring over `n` nodes.
pub fn ring_edges(n: usize) -> Vec<(NodeId, NodeId)> {
    (0..n).map(|i| (i, (i + 1) % n)).map(|(a, b)| (a.min(b), a.max(b))).collect()
}

/// Connected Erdos-Renyi graph with edge probability `avg_degree/(n-1)`,
/// rejection-sampled until connected.
pub fn random_connected_edges<R: Rng + ?Sized>(n: usize, avg_degree: f64, rng: &mut R) -> Vec<(NodeId, NodeId)> {
    if n <= 1 {
        return Vec::new();
    }
    let p = (avg_degree / (n as f64 - 1.0)).clamp(0.0, 1.0);
    loop {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.gen::<f64>() < p {
                    edges.push((a, b));
                }
            }
        }
        if edges_connected(n, &edges) {
            return edges;
        }
    }
}

pub fn edges_connected(n: usize, edges: &[(NodeId, NodeId)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Build the initial topology for `cfg`.
pub fn generate<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Result<Topology, ConfigError> {
    cfg.validate()?;
    let nodes: Vec<NodeSpec> = (0..cfg.nodes).map(|i| sample_node(i, cfg, rng)).collect();
    let edges = match cfg.topology {
        TopologyKind::Ring => ring_edges(cfg.nodes),
        TopologyKind::Random => random_connected_edges(cfg.nodes, cfg.avg_degree, rng),
    };
    let links = edges.into_iter().map(|(a, b)| sample_link(a, b, cfg, rng)).collect();
    let topo = Topology::new(nodes, links, cfg.slot_duration_s).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if !topo.is_connected() {
        return Err(ConfigError::Disconnected);
    }
    Ok(topo)
}

/// Pick `k` distinct alive nodes other than `node` to attach to.
pub fn attachment_targets<R: Rng + ?Sized>(topo: &Topology, node: NodeId, k: usize, rng: &mut R) -> Vec<NodeId> {
    let mut alive: Vec<NodeId> = (0..topo.len()).filter(|&i| i != node && topo.nodes[i].alive).collect();
    alive.shuffle(rng);
    alive.truncate(k);
    alive.sort_unstable();
    alive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn ring_is_two_regular_and_connected() {
        for n in 3..12 {
            let edges = ring_edges(n);
            assert_eq!(edges.len(), n);
            let mut deg = vec![0; n];
            for &(a, b) in &edges {
                deg[a] += 1;
                deg[b] += 1;
            }
            assert!(deg.iter().all(|&d| d == 2));
            assert!(edges_connected(n, &edges));
        }
    }

    #[test]
    fn random_generator_is_connected() {
        let mut r = rng::stream(3, rng::TOPOLOGY);
        for n in [2, 5, 10, 20] {
            for _ in 0..20 {
                let edges = random_connected_edges(n, 3.0, &mut r);
                assert!(edges_connected(n, &edges));
            }
        }
    }

    #[test]
    fn generated_topology_is_valid() {
        let cfg = EnvConfig::default();
        let topo = generate(&cfg, &mut rng::stream(1, rng::TOPOLOGY)).unwrap();
        assert_eq!(topo.len(), 10);
        assert!(topo.is_connected());
        for a in 0..topo.len() {
            for b in topo.neighbors(a) {
                assert!(topo.neighbors(b).contains(&a), "adjacency must be symmetric");
            }
        }
    }

    #[test]
    fn topology_rejects_duplicate_and_self_links() {
        let node = |id| NodeSpec {
            id,
            compute_capacity: 1.0,
            memory: 1.0,
            arrival_prob: 0.0,
            sw_fail_rate: 0.0,
            hw_fail_rate: 0.0,
            alive: true,
        };
        let l = LinkSpec::new(0, 1, 1.0, 0.0).unwrap();
        assert!(Topology::new(vec![node(0), node(1)], vec![l.clone(), l], 1.0).is_err());
        let mut dead = node(0);
        dead.alive = false;
        assert!(Topology::new(vec![dead], vec![], 1.0).is_err());
    }
}
