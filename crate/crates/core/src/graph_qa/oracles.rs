//! Exact answers for the six graph-reasoning question families.

use std::collections::{BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workflow::{AgentWorkflow, NodeId, Topology};

fn index_of(topo: &Topology, w: &AgentWorkflow, node: NodeId) -> Result<usize> {
    topo.index
        .get(&node)
        .copied()
        .ok_or_else(|| Error::NotFound(format!("node {node} in workflow {}", w.workflow_id)))
}

/// `(in_degree, out_degree)` of a node.
pub fn oracle_degrees(w: &AgentWorkflow, node: NodeId) -> Result<(usize, usize)> {
    let topo = w.topology();
    let i = index_of(&topo, w, node)?;
    Ok((topo.in_adj[i].len(), topo.out_adj[i].len()))
}

/// Total-degree mean `2|E| / |V|`, rounded to two decimals.
pub fn oracle_average_degree(w: &AgentWorkflow) -> f64 {
    if w.nodes.is_empty() {
        return 0.0;
    }
    round2(2.0 * w.edge_count() as f64 / w.node_count() as f64)
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `(in_neighbors, out_neighbors)` of a node.
pub fn oracle_neighbors(w: &AgentWorkflow, node: NodeId) -> Result<(BTreeSet<NodeId>, BTreeSet<NodeId>)> {
    let topo = w.topology();
    let i = index_of(&topo, w, node)?;
    let ins = topo.in_adj[i].iter().map(|&j| topo.ids[j]).collect();
    let outs = topo.out_adj[i].iter().map(|&j| topo.ids[j]).collect();
    Ok((ins, outs))
}

pub fn oracle_prompt(w: &AgentWorkflow, node: NodeId) -> Result<String> {
    w.prompt(node)
        .map(str::to_string)
        .ok_or_else(|| Error::NotFound(format!("node {node} in workflow {}", w.workflow_id)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reachability {
    pub reachable: bool,
    /// Number of edges on a shortest directed path; `None` when unreachable.
    pub shortest_length: Option<usize>,
}

/// Breadth-first distances (in edges) from one node index; `None` = unreachable.
pub fn bfs_distances(topo: &Topology, from: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; topo.len()];
    dist[from] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in &topo.out_adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

pub fn oracle_reachability(w: &AgentWorkflow, src: NodeId, dst: NodeId) -> Result<Reachability> {
    let topo = w.topology();
    let s = index_of(&topo, w, src)?;
    let t = index_of(&topo, w, dst)?;
    let d = bfs_distances(&topo, s)[t];
    Ok(Reachability {
        reachable: d.is_some(),
        shortest_length: d,
    })
}

/// `(sources, sinks)`: nodes with zero in-degree and zero out-degree.
pub fn oracle_key_nodes(w: &AgentWorkflow) -> (BTreeSet<NodeId>, BTreeSet<NodeId>) {
    let topo = w.topology();
    let sources = (0..topo.len())
        .filter(|&i| topo.in_adj[i].is_empty())
        .map(|i| topo.ids[i])
        .collect();
    let sinks = (0..topo.len())
        .filter(|&i| topo.out_adj[i].is_empty())
        .map(|i| topo.ids[i])
        .collect();
    (sources, sinks)
}

/// Kahn's algorithm with smallest-id tie-breaking.
pub fn oracle_toposort(w: &AgentWorkflow) -> Result<Vec<NodeId>> {
    let topo = w.topology();
    let order = topo.kahn_order();
    if order.len() < topo.len() {
        return Err(Error::InvalidWorkflow {
            workflow_id: w.workflow_id.clone(),
            violations: vec!["cycle".into()],
        });
    }
    Ok(order.into_iter().map(|i| topo.ids[i]).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToposortCheck {
    pub valid: bool,
    pub reason: Option<String>,
}

impl ToposortCheck {
    fn ok() -> Self {
        Self {
            valid: true,
            reason: None,
        }
    }

    fn fail(reason: String) -> Self {
        Self {
            valid: false,
            reason: Some(reason),
        }
    }
}

/// Accepts any permutation of all nodes in which every edge points forward.
pub fn is_valid_toposort(w: &AgentWorkflow, ordering: &[NodeId]) -> ToposortCheck {
    let declared: HashSet<NodeId> = w.nodes.iter().map(|n| n.id).collect();
    let mut position = std::collections::HashMap::new();
    for (pos, &id) in ordering.iter().enumerate() {
        if !declared.contains(&id) {
            return ToposortCheck::fail(format!("unknown node {id}"));
        }
        if position.insert(id, pos).is_some() {
            return ToposortCheck::fail(format!("node {id} repeated"));
        }
    }
    if let Some(missing) = w.nodes.iter().map(|n| n.id).find(|id| !position.contains_key(id)) {
        return ToposortCheck::fail(format!("node {missing} missing"));
    }
    for &(s, t) in &w.edges {
        if position[&s] >= position[&t] {
            return ToposortCheck::fail(format!("edge ({s}, {t}) violated"));
        }
    }
    ToposortCheck::ok()
}

/// Longest directed path length in edges (0 for edgeless graphs).
pub fn longest_path_length(w: &AgentWorkflow) -> usize {
    let topo = w.topology();
    let order = topo.kahn_order();
    let mut best = vec![0usize; topo.len()];
    for &u in &order {
        for &v in &topo.out_adj[u] {
            best[v] = best[v].max(best[u] + 1);
        }
    }
    best.into_iter().max().unwrap_or(0)
}
