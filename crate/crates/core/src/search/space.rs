use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::fnv1a;
use crate::textualize::{render_edges, render_nodes};
use crate::workflow::{AgentWorkflow, Node, NodeId};

pub const DEFAULT_ROLES: [&str; 5] = ["plan", "generate", "review", "test", "merge"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpaceConfig {
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Probability range for each forward pair to become an edge.
    pub min_density: f64,
    pub max_density: f64,
    /// Role keywords; every prompt mentions exactly one.
    pub roles: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpaceConfig {
    fn default() -> Self {
        Self {
            min_nodes: 5,
            max_nodes: 10,
            min_density: 0.1,
            max_density: 0.4,
            roles: DEFAULT_ROLES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl SyntheticSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return Err(Error::Config(format!(
                "node range {}..={} is empty",
                self.min_nodes, self.max_nodes
            )));
        }
        if !(0.0..=1.0).contains(&self.min_density)
            || !(0.0..=1.0).contains(&self.max_density)
            || self.min_density > self.max_density
        {
            return Err(Error::Config("density range must lie within [0, 1]".into()));
        }
        if self.roles.is_empty() {
            return Err(Error::Config("at least one role is required".into()));
        }
        Ok(())
    }

    pub fn prompt_for<R: Rng + ?Sized>(&self, role: &str, rng: &mut R) -> String {
        let templates = [
            format!("You are the {role} agent. Work on the upstream outputs."),
            format!("Step: {role}. Use the inputs you receive and pass your result on."),
            format!("Act as a careful {role} specialist for this task."),
        ];
        templates[rng.gen_range(0..templates.len())].clone()
    }
}

/// Identifier derived from the graph content (prompts and edges).
pub fn content_id(w: &AgentWorkflow) -> String {
    let key = format!("{}\n{}", render_nodes(w), render_edges(w));
    format!("wf-{:016x}", fnv1a(key.as_bytes()))
}

/// Random DAG: node ids follow a topological order and each forward pair is
/// an edge with a per-graph density drawn from the configured range.
pub fn sample_workflow(space: &SyntheticSpaceConfig, seed: u64) -> Result<AgentWorkflow> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(space.min_nodes..=space.max_nodes);
    let density = if space.max_density > space.min_density {
        rng.gen_range(space.min_density..=space.max_density)
    } else {
        space.min_density
    };
    let nodes = (0..n)
        .map(|i| {
            let role = &space.roles[rng.gen_range(0..space.roles.len())];
            Node {
                id: i as NodeId,
                prompt: space.prompt_for(role, &mut rng),
            }
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(density) {
                edges.push((i as NodeId, j as NodeId));
            }
        }
    }
    let mut w = AgentWorkflow::new("", nodes, edges);
    w.workflow_id = content_id(&w);
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    AddEdge,
    RemoveEdge,
    AddNode,
    SwapPrompt,
}

#[derive(Clone, Debug)]
pub struct Mutation {
    pub workflow: AgentWorkflow,
    /// `None` when no mutation was legal and the input came back unchanged.
    pub kind: Option<MutationKind>,
}

fn reaches(w: &AgentWorkflow, from: NodeId, to: NodeId) -> bool {
    let mut stack = vec![from];
    let mut seen = std::collections::HashSet::new();
    while let Some(u) = stack.pop() {
        if u == to {
            return true;
        }
        if seen.insert(u) {
            stack.extend(w.edges.iter().filter(|e| e.0 == u).map(|e| e.1));
        }
    }
    false
}

fn role_of<'a>(space: &'a SyntheticSpaceConfig, prompt: &str) -> Option<&'a String> {
    space.roles.iter().find(|r| prompt.contains(r.as_str()))
}

/// Apply one random legal edit. Kinds are tried in a seeded random order and
/// the first legal one is applied.
pub fn mutate_workflow(w: &AgentWorkflow, space: &SyntheticSpaceConfig, seed: u64) -> Mutation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = [
        MutationKind::AddEdge,
        MutationKind::RemoveEdge,
        MutationKind::AddNode,
        MutationKind::SwapPrompt,
    ];
    kinds.shuffle(&mut rng);
    let ids: Vec<NodeId> = w.nodes.iter().map(|n| n.id).collect();
    for kind in kinds {
        let mut out = w.clone();
        match kind {
            MutationKind::AddEdge => {
                let mut cands = Vec::new();
                for &u in &ids {
                    for &v in &ids {
                        if u != v && !w.edges.contains(&(u, v)) && !reaches(w, v, u) {
                            cands.push((u, v));
                        }
                    }
                }
                let Some(&e) = cands.choose(&mut rng) else { continue };
                out.edges.push(e);
            }
            MutationKind::RemoveEdge => {
                if w.edges.is_empty() {
                    continue;
                }
                out.edges.remove(rng.gen_range(0..w.edges.len()));
            }
            MutationKind::AddNode => {
                if w.nodes.len() >= space.max_nodes || space.roles.is_empty() {
                    continue;
                }
                let id = ids.iter().max().map_or(0, |m| m + 1);
                let role = space.roles[rng.gen_range(0..space.roles.len())].clone();
                out.nodes.push(Node {
                    id,
                    prompt: space.prompt_for(&role, &mut rng),
                });
                if let Some(&parent) = ids.choose(&mut rng) {
                    out.edges.push((parent, id));
                }
            }
            MutationKind::SwapPrompt => {
                if w.nodes.is_empty() || space.roles.len() < 2 {
                    continue;
                }
                let i = rng.gen_range(0..w.nodes.len());
                let current = role_of(space, &w.nodes[i].prompt).cloned();
                let others: Vec<&String> = space.roles.iter().filter(|r| Some(*r) != current.as_ref()).collect();
                let role = others[rng.gen_range(0..others.len())].clone();
                out.nodes[i].prompt = space.prompt_for(&role, &mut rng);
            }
        }
        out.workflow_id = content_id(&out);
        return Mutation {
            workflow: out,
            kind: Some(kind),
        };
    }
    Mutation {
        workflow: w.clone(),
        kind: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g0() -> AgentWorkflow {
        AgentWorkflow::from_parts(
            "G0",
            &[(0, "Generate code"), (1, "Review code"), (2, "Merge results")],
            &[(0, 1), (0, 2), (1, 2)],
        )
    }

    #[test]
    fn samples_are_valid_and_deterministic() {
        let space = SyntheticSpaceConfig::default();
        for s in 0..50 {
            let w = sample_workflow(&space, s).unwrap();
            assert!(w.validate().is_valid());
            assert!((space.min_nodes..=space.max_nodes).contains(&w.node_count()));
            assert_eq!(w, sample_workflow(&space, s).unwrap());
            for n in &w.nodes {
                let hits = space.roles.iter().filter(|r| n.prompt.contains(r.as_str())).count();
                assert_eq!(hits, 1, "{}", n.prompt);
            }
        }
    }

    #[test]
    fn mutations_keep_dags_and_are_deterministic() {
        let space = SyntheticSpaceConfig::default();
        let mut w = sample_workflow(&space, 1).unwrap();
        for s in 0..300 {
            let m = mutate_workflow(&w, &space, s);
            assert!(m.kind.is_some());
            assert!(m.workflow.validate().is_valid());
            assert_eq!(m.workflow, mutate_workflow(&w, &space, s).workflow);
            w = m.workflow;
        }
    }

    #[test]
    fn remove_edge_on_g0() {
        let space = SyntheticSpaceConfig::default();
        let seed = (0..100)
            .find(|&s| mutate_workflow(&g0(), &space, s).kind == Some(MutationKind::RemoveEdge))
            .unwrap();
        let m = mutate_workflow(&g0(), &space, seed);
        assert_eq!(m.workflow.edge_count(), 2);
        assert!(m.workflow.validate().is_valid());
    }

    #[test]
    fn no_legal_mutation_is_flagged() {
        let space = SyntheticSpaceConfig {
            min_nodes: 1,
            max_nodes: 1,
            roles: vec!["solo".into()],
            ..SyntheticSpaceConfig::default()
        };
        let w = AgentWorkflow::from_parts("one", &[(0, "solo")], &[]);
        let m = mutate_workflow(&w, &space, 3);
        assert_eq!(m.kind, None);
        assert_eq!(m.workflow, w);
    }
}
