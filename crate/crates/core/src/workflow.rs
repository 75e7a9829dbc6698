//! Workflow, task and labeled-sample domain types with validation and
//! JSON dataset ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub prompt: String,
}

/// An agentic workflow: agents (nodes with prompts) connected by directed edges.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentWorkflow {
    pub workflow_id: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateNode(NodeId),
    UnknownEndpoint { edge: (NodeId, NodeId), node: NodeId },
    SelfLoop(NodeId),
    DuplicateEdge(NodeId, NodeId),
    /// Nodes that could not be topologically ordered.
    Cycle(Vec<NodeId>),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNode(id) => write!(f, "duplicate node {id}"),
            Violation::UnknownEndpoint { edge, node } => {
                write!(f, "unknown endpoint {node} in edge ({}, {})", edge.0, edge.1)
            }
            Violation::SelfLoop(id) => write!(f, "self-loop on node {id}"),
            Violation::DuplicateEdge(s, t) => write!(f, "duplicate edge ({s}, {t})"),
            Violation::Cycle(nodes) => write!(f, "cycle through nodes {nodes:?}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Non-fatal findings, such as nodes with empty prompts.
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Adjacency view of a workflow with dense node indices in ascending id order.
#[derive(Clone, Debug)]
pub struct Topology {
    pub ids: Vec<NodeId>,
    pub index: HashMap<NodeId, usize>,
    pub out_adj: Vec<Vec<usize>>,
    pub in_adj: Vec<Vec<usize>>,
}

impl Topology {
    /// Edges whose endpoints are unknown are ignored.
    pub fn new(w: &AgentWorkflow) -> Self {
        let mut ids: Vec<NodeId> = w.nodes.iter().map(|n| n.id).collect();
        ids.sort_unstable();
        ids.dedup();
        let index: HashMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut out_adj = vec![Vec::new(); ids.len()];
        let mut in_adj = vec![Vec::new(); ids.len()];
        for &(s, t) in &w.edges {
            if let (Some(&si), Some(&ti)) = (index.get(&s), index.get(&t)) {
                out_adj[si].push(ti);
                in_adj[ti].push(si);
            }
        }
        Self {
            ids,
            index,
            out_adj,
            in_adj,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Kahn's algorithm with smallest-id tie-breaking. Returns indices; the
    /// result is shorter than `len()` iff the graph has a cycle.
    pub fn kahn_order(&self) -> Vec<usize> {
        let mut indeg: Vec<usize> = self.in_adj.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &j in &self.out_adj[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        order
    }
}

impl AgentWorkflow {
    pub fn new(workflow_id: impl Into<String>, nodes: Vec<Node>, edges: Vec<(NodeId, NodeId)>) -> Self {
        Self {
            workflow_id: workflow_id.into(),
            nodes,
            edges,
        }
    }

    /// Convenience constructor from `(id, prompt)` pairs.
    pub fn from_parts(workflow_id: impl Into<String>, nodes: &[(NodeId, &str)], edges: &[(NodeId, NodeId)]) -> Self {
        Self::new(
            workflow_id,
            nodes
                .iter()
                .map(|&(id, p)| Node {
                    id,
                    prompt: p.to_string(),
                })
                .collect(),
            edges.to_vec(),
        )
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.nodes.iter().any(|n| n.id == id)
    }

    pub fn prompt(&self, id: NodeId) -> Option<&str> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.prompt.as_str())
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self)
    }

    /// Check every structural invariant; violations are reported, never raised.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                report.violations.push(Violation::DuplicateNode(n.id));
            }
            if n.prompt.is_empty() {
                report.warnings.push(format!("node {} has an empty prompt", n.id));
            }
        }
        let mut edge_seen = HashSet::new();
        for &(s, t) in &self.edges {
            for node in [s, t] {
                if !seen.contains(&node) {
                    report.violations.push(Violation::UnknownEndpoint { edge: (s, t), node });
                }
            }
            if s == t {
                report.violations.push(Violation::SelfLoop(s));
            }
            if !edge_seen.insert((s, t)) {
                report.violations.push(Violation::DuplicateEdge(s, t));
            }
        }
        let topo = self.topology();
        let order = topo.kahn_order();
        if order.len() < topo.len() {
            let placed: HashSet<usize> = order.into_iter().collect();
            let stuck = (0..topo.len())
                .filter(|i| !placed.contains(i))
                .map(|i| topo.ids[i])
                .collect();
            report.violations.push(Violation::Cycle(stuck));
        }
        report
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidWorkflow {
                workflow_id: self.workflow_id.clone(),
                violations: report.violations.iter().map(ToString::to_string).collect(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub task_id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledSample {
    pub workflow_id: String,
    pub task_id: String,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub workflows: BTreeMap<String, AgentWorkflow>,
    pub tasks: BTreeMap<String, TaskInstruction>,
    pub samples: Vec<LabeledSample>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DatasetCounts {
    pub workflows: usize,
    pub tasks: usize,
    pub samples: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    workflow_id: String,
    task_id: String,
    label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    workflows: Vec<AgentWorkflow>,
    tasks: Vec<TaskInstruction>,
    samples: Vec<SampleRecord>,
}

impl LabeledDataset {
    /// Build and check a dataset: every workflow validates, labels are binary,
    /// references resolve and `(workflow_id, task_id)` pairs are unique.
    pub fn new(
        workflows: impl IntoIterator<Item = AgentWorkflow>,
        tasks: impl IntoIterator<Item = TaskInstruction>,
        samples: Vec<LabeledSample>,
        split: Split,
    ) -> Result<Self> {
        let mut wmap = BTreeMap::new();
        for w in workflows {
            w.ensure_valid()?;
            if wmap.insert(w.workflow_id.clone(), w.clone()).is_some() {
                return Err(Error::Parse(format!("duplicate workflow_id {}", w.workflow_id)));
            }
        }
        let mut tmap = BTreeMap::new();
        for t in tasks {
            if t.text.is_empty() {
                return Err(Error::Parse(format!("task {} has empty text", t.task_id)));
            }
            if tmap.insert(t.task_id.clone(), t.clone()).is_some() {
                return Err(Error::Parse(format!("duplicate task_id {}", t.task_id)));
            }
        }
        let mut pairs = HashSet::new();
        for s in &samples {
            if s.label > 1 {
                return Err(Error::Parse(format!(
                    "label {} for ({}, {}) is not 0 or 1",
                    s.label, s.workflow_id, s.task_id
                )));
            }
            if !wmap.contains_key(&s.workflow_id) {
                return Err(Error::MissingReference {
                    kind: "workflow",
                    id: s.workflow_id.clone(),
                });
            }
            if !tmap.contains_key(&s.task_id) {
                return Err(Error::MissingReference {
                    kind: "task",
                    id: s.task_id.clone(),
                });
            }
            if !pairs.insert((s.workflow_id.as_str(), s.task_id.as_str())) {
                return Err(Error::DuplicateSample {
                    workflow_id: s.workflow_id.clone(),
                    task_id: s.task_id.clone(),
                });
            }
        }
        Ok(Self {
            workflows: wmap,
            tasks: tmap,
            samples,
            split,
        })
    }

    pub fn counts(&self) -> DatasetCounts {
        DatasetCounts {
            workflows: self.workflows.len(),
            tasks: self.tasks.len(),
            samples: self.samples.len(),
        }
    }

    pub fn workflow(&self, id: &str) -> Result<&AgentWorkflow> {
        self.workflows
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("workflow {id}")))
    }

    pub fn task(&self, id: &str) -> Result<&TaskInstruction> {
        self.tasks.get(id).ok_or_else(|| Error::NotFound(format!("task {id}")))
    }

    /// Same workflows and tasks, different sample list.
    pub fn with_samples(&self, samples: Vec<LabeledSample>, split: Split) -> Self {
        Self {
            workflows: self.workflows.clone(),
            tasks: self.tasks.clone(),
            samples,
            split,
        }
    }

    /// Fraction of this workflow's samples labeled 1.
    pub fn success_rate(&self, workflow_id: &str) -> Result<f64> {
        let (mut ok, mut total) = (0usize, 0usize);
        for s in self.samples.iter().filter(|s| s.workflow_id == workflow_id) {
            total += 1;
            ok += s.label as usize;
        }
        if total == 0 {
            return Err(Error::NotFound(format!("workflow {workflow_id} has no samples")));
        }
        Ok(ok as f64 / total as f64)
    }

    /// Per-workflow success rates for every workflow with at least one sample.
    pub fn success_rates(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for s in &self.samples {
            let e = acc.entry(s.workflow_id.clone()).or_default();
            e.0 += s.label as usize;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (ok, n))| (k, ok as f64 / n as f64))
            .collect()
    }

    /// Canonical JSON text: workflows and tasks sorted by id, samples in order.
    pub fn to_json(&self) -> Result<String> {
        self.to_json_with_tags(None)
    }

    fn to_json_with_tags(&self, tags: Option<&[Split]>) -> Result<String> {
        let file = DatasetFile {
            split: Some(self.split),
            workflows: self.workflows.values().cloned().collect(),
            tasks: self.tasks.values().cloned().collect(),
            samples: self
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| SampleRecord {
                    workflow_id: s.workflow_id.clone(),
                    task_id: s.task_id.clone(),
                    label: s.label,
                    split: tags.map(|t| t[i]),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<(Self, Vec<Option<Split>>)> {
        let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let tags = file.samples.iter().map(|s| s.split).collect();
        let samples = file
            .samples
            .into_iter()
            .map(|s| LabeledSample {
                workflow_id: s.workflow_id,
                task_id: s.task_id,
                label: s.label,
            })
            .collect();
        let ds = Self::new(file.workflows, file.tasks, samples, file.split.unwrap_or(Split::Train))?;
        Ok((ds, tags))
    }
}

/// Read and validate a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (ds, _) = LabeledDataset::from_json(&text)?;
    let c = ds.counts();
    log::info!(
        "loaded {}: {} workflows, {} tasks, {} samples",
        path.display(),
        c.workflows,
        c.tasks,
        c.samples
    );
    Ok(ds)
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_json()?).map_err(|e| Error::io(path, e))
}

/// Train / validation / test partition over one shared pool of workflows and tasks.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

impl Corpus {
    /// Random 8:1:1 split of the samples (seeded).
    pub fn split(all: &LabeledDataset, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..all.samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = idx.len();
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let pick = |range: &[usize]| {
            let mut r = range.to_vec();
            r.sort_unstable();
            r.into_iter().map(|i| all.samples[i].clone()).collect::<Vec<_>>()
        };
        Self {
            train: all.with_samples(pick(&idx[..n_train]), Split::Train),
            validation: all.with_samples(pick(&idx[n_train..n_train + n_val]), Split::Validation),
            test: all.with_samples(pick(&idx[n_train + n_val..]), Split::Test),
        }
    }

    /// Load a dataset file; explicit per-sample `split` tags are honoured,
    /// otherwise samples are split 8:1:1 with `seed`.
    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (all, tags) = LabeledDataset::from_json(&text)?;
        if tags.iter().all(Option::is_some) && !tags.is_empty() {
            let part = |which: Split| {
                all.samples
                    .iter()
                    .zip(&tags)
                    .filter(|(_, t)| **t == Some(which))
                    .map(|(s, _)| s.clone())
                    .collect::<Vec<_>>()
            };
            return Ok(Self {
                train: all.with_samples(part(Split::Train), Split::Train),
                validation: all.with_samples(part(Split::Validation), Split::Validation),
                test: all.with_samples(part(Split::Test), Split::Test),
            });
        }
        Ok(Self::split(&all, seed))
    }

    /// All samples in one file, each tagged with its split.
    pub fn to_json(&self) -> Result<String> {
        let mut samples = Vec::new();
        let mut tags = Vec::new();
        for ds in [&self.train, &self.validation, &self.test] {
            samples.extend(ds.samples.iter().cloned());
            tags.extend(std::iter::repeat(ds.split).take(ds.samples.len()));
        }
        self.train
            .with_samples(samples, Split::Train)
            .to_json_with_tags(Some(&tags))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn g0() -> AgentWorkflow {
        AgentWorkflow::from_parts(
            "G0",
            &[(0, "Generate code"), (1, "Review code"), (2, "Merge results")],
            &[(0, 1), (0, 2), (1, 2)],
        )
    }

    #[test]
    fn minimal_dag_is_valid() {
        let w = AgentWorkflow::from_parts("w", &[(0, "a"), (1, "b")], &[(0, 1)]);
        assert!(w.validate().is_valid());
    }

    #[test]
    fn two_cycle_is_reported() {
        let w = AgentWorkflow::from_parts("w", &[(0, "a"), (1, "b")], &[(0, 1), (1, 0)]);
        let r = w.validate();
        assert!(matches!(r.violations.as_slice(), [Violation::Cycle(_)]));
        assert!(r.violations[0].to_string().starts_with("cycle"));
    }

    #[test]
    fn dangling_edge_is_reported() {
        let w = AgentWorkflow::from_parts("w", &[(0, "a")], &[(0, 5)]);
        let r = w.validate();
        assert_eq!(
            r.violations,
            vec![Violation::UnknownEndpoint { edge: (0, 5), node: 5 }]
        );
        assert!(r.violations[0].to_string().contains("unknown endpoint 5"));
    }

    #[test]
    fn self_loops_duplicates_and_empty_prompts() {
        let w = AgentWorkflow::from_parts("w", &[(0, ""), (1, "b"), (1, "c")], &[(0, 1), (0, 1), (1, 1)]);
        let r = w.validate();
        assert!(r.violations.contains(&Violation::DuplicateNode(1)));
        assert!(r.violations.contains(&Violation::DuplicateEdge(0, 1)));
        assert!(r.violations.contains(&Violation::SelfLoop(1)));
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn empty_prompt_is_only_a_warning() {
        let w = AgentWorkflow::from_parts("w", &[(0, "")], &[]);
        let r = w.validate();
        assert!(r.is_valid());
        assert_eq!(r.warnings, vec!["node 0 has an empty prompt".to_string()]);
    }

    fn sample(w: &str, t: &str, label: u8) -> LabeledSample {
        LabeledSample {
            workflow_id: w.into(),
            task_id: t.into(),
            label,
        }
    }

    fn task(id: &str) -> TaskInstruction {
        TaskInstruction {
            task_id: id.into(),
            text: format!("solve {id}"),
        }
    }

    #[test]
    fn success_rate_counts_labels() {
        let ds = LabeledDataset::new(
            [g0()],
            ["a", "b", "c", "d"].map(task),
            vec![sample("G0", "a", 1), sample("G0", "b", 1), sample("G0", "c", 0), sample("G0", "d", 1)],
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.success_rate("G0").unwrap(), 0.75);
        assert!(matches!(ds.success_rate("nope"), Err(Error::NotFound(_))));
        let zeros = ds.with_samples(ds.samples.iter().map(|s| sample("G0", &s.task_id, 0)).collect(), Split::Train);
        assert_eq!(zeros.success_rate("G0").unwrap(), 0.0);
        let ones = ds.with_samples(ds.samples.iter().map(|s| sample("G0", &s.task_id, 1)).collect(), Split::Train);
        assert_eq!(ones.success_rate("G0").unwrap(), 1.0);
    }

    #[test]
    fn duplicate_and_missing_references_are_rejected() {
        let dup = LabeledDataset::new([g0()], [task("a")], vec![sample("G0", "a", 1), sample("G0", "a", 0)], Split::Train);
        assert!(matches!(dup, Err(Error::DuplicateSample { .. })));
        let missing = LabeledDataset::new([g0()], [task("a")], vec![sample("G0", "zz", 1)], Split::Train);
        match missing {
            Err(e @ Error::MissingReference { .. }) => assert!(e.to_string().contains("zz")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
