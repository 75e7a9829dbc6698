use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GoldAnswer, GraphQAItem, Query, TaskType};
use crate::error::Result;
use crate::seeding::derive_seed;
use crate::textualize::serialize_workflow;
use crate::workflow::AgentWorkflow;

/// Declared answer conventions, written next to every generated corpus.
pub const CORPUS_METADATA: &str = r#"{
  "template_version": "1",
  "answer_forms": {
    "DBP": "in/out degree: integer; average degree: 2|E|/|V| with two decimals",
    "DNE": "node-id list such as [1, 2] (order-insensitive)",
    "NPR": "the raw prompt text",
    "REACH": "shortest directed path length in edges, or the token unreachable",
    "KNI": "node-id list, or 'sources: [..]; sinks: [..]'",
    "TSORT": "node-id list; any valid topological order is accepted"
  }
}"#;

#[derive(Clone, Debug, Default)]
pub struct GeneratedQa {
    pub items: Vec<GraphQAItem>,
    pub warnings: Vec<String>,
}

fn candidates(w: &AgentWorkflow, t: TaskType) -> Vec<Query> {
    let mut ids: Vec<_> = w.nodes.iter().map(|n| n.id).collect();
    ids.sort_unstable();
    match t {
        TaskType::Dbp => {
            let mut q: Vec<Query> = ids
                .iter()
                .flat_map(|&n| [Query::InDegree { node: n }, Query::OutDegree { node: n }])
                .collect();
            q.push(Query::AverageDegree);
            q
        }
        TaskType::Dne => ids
            .iter()
            .flat_map(|&n| [Query::InNeighbors { node: n }, Query::OutNeighbors { node: n }])
            .collect(),
        TaskType::Npr => ids.iter().map(|&n| Query::Prompt { node: n }).collect(),
        TaskType::Reach => ids
            .iter()
            .flat_map(|&s| ids.iter().map(move |&d| Query::Reach { src: s, dst: d }))
            .collect(),
        TaskType::Kni => vec![Query::Sources, Query::Sinks, Query::SourcesAndSinks],
        TaskType::Tsort => (0..3).map(|p| Query::Toposort { phrasing: p }).collect(),
    }
}

fn phrase(query: Query, variant: usize) -> String {
    let pick = |opts: [String; 3]| opts[variant % 3].clone();
    match query {
        Query::InDegree { node } => pick([
            format!("What is the in-degree of node {node}? Answer with a single integer."),
            format!("How many edges point into node {node}? Answer with a single integer."),
            format!("Count the incoming edges of node {node}. Answer with a single integer."),
        ]),
        Query::OutDegree { node } => pick([
            format!("What is the out-degree of node {node}? Answer with a single integer."),
            format!("How many edges leave node {node}? Answer with a single integer."),
            format!("Count the outgoing edges of node {node}. Answer with a single integer."),
        ]),
        Query::AverageDegree => pick([
            "What is the average degree of the graph (2|E|/|V|)? Answer with a number rounded to two decimals.".into(),
            "Compute the mean total degree 2|E|/|V| of this graph, rounded to two decimals.".into(),
            "Give the graph's average node degree, 2|E|/|V|, to two decimal places.".into(),
        ]),
        Query::InNeighbors { node } => pick([
            format!("List the in-neighbors (predecessors) of node {node} as a list of node IDs."),
            format!("Which nodes have an edge pointing to node {node}? Answer with a list of node IDs."),
            format!("Give the predecessor set of node {node} as a list of node IDs."),
        ]),
        Query::OutNeighbors { node } => pick([
            format!("List the out-neighbors (successors) of node {node} as a list of node IDs."),
            format!("Which nodes does node {node} send its output to? Answer with a list of node IDs."),
            format!("Give the successor set of node {node} as a list of node IDs."),
        ]),
        Query::Prompt { node } => pick([
            format!("What is the prompt of node {node}? Reply with the prompt text only."),
            format!("Return the raw prompt assigned to node {node}."),
            format!("Repeat exactly the prompt text of node {node}."),
        ]),
        Query::Reach { src, dst } => pick([
            format!("Is node {dst} reachable from node {src}? If so, give the length of the shortest directed path in edges; otherwise answer unreachable."),
            format!("Give the shortest directed path length (in edges) from node {src} to node {dst}, or answer unreachable if no path exists."),
            format!("How many edges lie on the shortest directed path from node {src} to node {dst}? Answer unreachable if there is none."),
        ]),
        Query::Sources => pick([
            "Which nodes are source nodes (in-degree zero)? Answer with a list of node IDs.".into(),
            "List every node that has no incoming edge.".into(),
            "Identify the entry agents of the workflow (nodes with zero in-degree) as a list of node IDs.".into(),
        ]),
        Query::Sinks => pick([
            "Which nodes are sink nodes (out-degree zero)? Answer with a list of node IDs.".into(),
            "List every node that has no outgoing edge.".into(),
            "Identify the exit agents of the workflow (nodes with zero out-degree) as a list of node IDs.".into(),
        ]),
        Query::SourcesAndSinks => pick([
            "Identify the source and sink nodes. Answer as 'sources: [..]; sinks: [..]'.".into(),
            "Which nodes have zero in-degree and which have zero out-degree? Answer as 'sources: [..]; sinks: [..]'.".into(),
            "Give both key node sets of the workflow in the form 'sources: [..]; sinks: [..]'.".into(),
        ]),
        Query::Toposort { phrasing } => match phrasing % 3 {
            0 => "Give a valid topological ordering of all nodes as a list of node IDs.".into(),
            1 => "Order the agents so that every edge points forward, and answer with the list of node IDs.".into(),
            _ => "In what order could the agents execute so that each runs after all of its predecessors? Answer with a list of node IDs.".into(),
        },
    }
}

/// Up to `samples_per_type` distinct items per workflow and task type.
///
/// Output order is workflow order x type order x sample index, and each
/// workflow draws from its own seed derived from `seed` and its position,
/// so the result does not depend on how generation is scheduled.
pub fn generate_qa_dataset(workflows: &[AgentWorkflow], samples_per_type: usize, seed: u64) -> Result<GeneratedQa> {
    if samples_per_type == 0 {
        return Err(crate::error::Error::Precondition("samples_per_type must be at least 1".into()));
    }
    let mut out = GeneratedQa::default();
    for (wi, w) in workflows.iter().enumerate() {
        let serialized = serialize_workflow(w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("qa/{wi}/{}", w.workflow_id)));
        for t in TaskType::ALL {
            let mut pool = candidates(w, t);
            pool.shuffle(&mut rng);
            if pool.len() < samples_per_type {
                out.warnings.push(format!(
                    "workflow {}: only {} distinct {} items available (requested {})",
                    w.workflow_id,
                    pool.len(),
                    t,
                    samples_per_type
                ));
            }
            for (k, &query) in pool.iter().take(samples_per_type).enumerate() {
                let variant = match query {
                    Query::Toposort { phrasing } => phrasing as usize,
                    _ => rng.gen_range(0..3),
                };
                out.items.push(GraphQAItem {
                    item_id: format!("{}:{}:{}", w.workflow_id, t, k),
                    workflow_id: w.workflow_id.clone(),
                    task_type: t,
                    query,
                    question: format!("{}\nQuestion: {}", serialized.text, phrase(query, variant)),
                    gold_answer: GoldAnswer::compute(w, query)?,
                });
            }
        }
    }
    Ok(out)
}

/// Split workflows into (train, held-out) with `n_holdout` chosen at random.
pub fn holdout_workflows(workflows: &[AgentWorkflow], n_holdout: usize, seed: u64) -> (Vec<AgentWorkflow>, Vec<AgentWorkflow>) {
    let mut idx: Vec<usize> = (0..workflows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "qa-holdout")));
    let held: std::collections::HashSet<usize> = idx.into_iter().take(n_holdout).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, w) in workflows.iter().enumerate() {
        if held.contains(&i) {
            test.push(w.clone());
        } else {
            train.push(w.clone());
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_qa::write_qa_jsonl;

    fn g0() -> AgentWorkflow {
        AgentWorkflow::from_parts(
            "G0",
            &[(0, "Generate code"), (1, "Review code"), (2, "Merge results")],
            &[(0, 1), (0, 2), (1, 2)],
        )
    }

    #[test]
    fn one_workflow_one_sample_gives_six_items() {
        let qa = generate_qa_dataset(&[g0()], 1, 0).unwrap();
        assert_eq!(qa.items.len(), 6);
        let types: Vec<_> = qa.items.iter().map(|i| i.task_type).collect();
        assert_eq!(types, TaskType::ALL.to_vec());
    }

    #[test]
    fn single_node_reach_has_only_the_identity_pair() {
        let w = AgentWorkflow::from_parts("one", &[(0, "solo")], &[]);
        let qa = generate_qa_dataset(&[w], 3, 5).unwrap();
        let reach: Vec<_> = qa.items.iter().filter(|i| i.task_type == TaskType::Reach).collect();
        assert_eq!(reach.len(), 1);
        assert_eq!(reach[0].query, Query::Reach { src: 0, dst: 0 });
        assert_eq!(reach[0].gold_answer, GoldAnswer::Integer(0));
        assert!(qa.warnings.iter().any(|w| w.contains("REACH")));
    }

    #[test]
    fn items_are_distinct_and_match_oracles() {
        let qa = generate_qa_dataset(&[g0()], 3, 11).unwrap();
        assert_eq!(qa.items.len(), 18);
        for t in TaskType::ALL {
            let qs: std::collections::HashSet<_> =
                qa.items.iter().filter(|i| i.task_type == t).map(|i| i.query).collect();
            assert_eq!(qs.len(), 3);
        }
        for it in &qa.items {
            assert_eq!(GoldAnswer::compute(&g0(), it.query).unwrap(), it.gold_answer);
            assert_eq!(it.workflow().unwrap(), g0());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_qa_dataset(&[g0()], 3, 42).unwrap();
        let b = generate_qa_dataset(&[g0()], 3, 42).unwrap();
        assert_eq!(write_qa_jsonl(&a.items), write_qa_jsonl(&b.items));
    }

    #[test]
    fn jsonl_round_trip() {
        let qa = generate_qa_dataset(&[g0()], 3, 1).unwrap();
        let text = write_qa_jsonl(&qa.items);
        let back = crate::graph_qa::read_qa_jsonl(&text).unwrap();
        assert_eq!(back, qa.items);
    }

    #[test]
    fn holdout_is_disjoint() {
        let ws: Vec<_> = (0..10)
            .map(|i| AgentWorkflow::from_parts(format!("w{i}"), &[(0, "a")], &[]))
            .collect();
        let (train, test) = holdout_workflows(&ws, 3, 9);
        assert_eq!((train.len(), test.len()), (7, 3));
        assert!(test.iter().all(|t| !train.contains(t)));
    }
}
