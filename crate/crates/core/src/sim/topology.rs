use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::behavior::{similarity_from_hops, Proximity};
use crate::domain::AgentId;

use super::scenario::Scenario;

/// Undirected agent graph. Every binding (primary and alternates) and every
/// background client's target contributes an edge.
#[derive(Debug, Clone)]
pub struct Topology {
    ids: Vec<AgentId>,
    index: BTreeMap<AgentId, usize>,
    adjacency: Vec<BTreeSet<usize>>,
    // all-pairs hop counts, usize::MAX when disconnected
    hops: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new<I>(agents: impl IntoIterator<Item = AgentId>, edges: I) -> Self
    where
        I: IntoIterator<Item = (AgentId, AgentId)>,
    {
        let mut ids = Vec::new();
        let mut index = BTreeMap::new();
        for a in agents {
            if !index.contains_key(&a) {
                index.insert(a.clone(), ids.len());
                ids.push(a);
            }
        }
        let mut adjacency = vec![BTreeSet::new(); ids.len()];
        for (a, b) in edges {
            let (Some(&i), Some(&j)) = (index.get(&a), index.get(&b)) else {
                continue;
            };
            if i != j {
                adjacency[i].insert(j);
                adjacency[j].insert(i);
            }
        }
        let hops = (0..ids.len()).map(|s| bfs(&adjacency, s)).collect();
        Self {
            ids,
            index,
            adjacency,
            hops,
        }
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        let agents = s
            .agents
            .iter()
            .map(|a| a.id.clone())
            .chain(s.background.iter().map(|b| b.id.clone()));
        let mut edges = Vec::new();
        for a in &s.agents {
            for b in &a.bindings {
                edges.push((a.id.clone(), b.primary.clone()));
                for alt in &b.alternates {
                    edges.push((a.id.clone(), alt.clone()));
                }
            }
        }
        for b in &s.background {
            edges.push((b.id.clone(), b.provider.clone()));
        }
        Self::new(agents, edges)
    }

    pub fn agents(&self) -> &[AgentId] {
        &self.ids
    }

    pub fn neighbors(&self, a: &AgentId) -> Vec<&AgentId> {
        self.index
            .get(a)
            .map(|&i| self.adjacency[i].iter().map(|&j| &self.ids[j]).collect())
            .unwrap_or_default()
    }

    pub fn are_adjacent(&self, a: &AgentId, b: &AgentId) -> bool {
        self.hop_distance(a, b) == Some(1)
    }

    /// Shortest path length in hops; `None` if either agent is unknown or
    /// the two are disconnected.
    pub fn hop_distance(&self, a: &AgentId, b: &AgentId) -> Option<usize> {
        let (&i, &j) = (self.index.get(a)?, self.index.get(b)?);
        let d = self.hops[i][j];
        (d != usize::MAX).then_some(d)
    }
}

fn bfs(adjacency: &[BTreeSet<usize>], source: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adjacency.len()];
    dist[source] = 0;
    let mut q = VecDeque::from([source]);
    while let Some(u) = q.pop_front() {
        for &v in &adjacency[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    dist
}

pub fn hop_distance(topology: &Topology, a: &AgentId, b: &AgentId) -> Option<usize> {
    topology.hop_distance(a, b)
}

/// 1/d over the topology (see [`similarity_from_hops`]).
pub fn similarity_index(topology: &Topology, a: &AgentId, b: &AgentId) -> f64 {
    similarity_from_hops(topology.hop_distance(a, b))
}

impl Proximity for Topology {
    fn similarity(&self, a: &AgentId, b: &AgentId) -> f64 {
        similarity_index(self, a, b)
    }
}
