use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_qa::{bfs_distances, longest_path_length};
use crate::seeding::{derive_seed, fnv1a, unit_hash};
use crate::textualize::{render_edges, render_nodes};
use crate::workflow::{AgentWorkflow, LabeledDataset, LabeledSample, Split, TaskInstruction};

use super::space::{sample_workflow, SyntheticSpaceConfig};

/// A keyword reference inside a rule: one of the task's two roles or a literal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    From,
    To,
    Keyword(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    /// Some node's prompt contains the keyword.
    Contains { slot: Slot },
    /// A `to` node is reachable from a distinct `from` node within `max_hops`
    /// edges (any distance when absent).
    Reaches {
        from: Slot,
        to: Slot,
        #[serde(default)]
        max_hops: Option<usize>,
    },
    /// Some node containing the keyword has no incoming edge.
    Entry { slot: Slot },
    /// Longest path has at most this many edges.
    MaxDepth { edges: usize },
}

/// One synthetic task: start from a `from` role and involve a `to` role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub from_role: String,
    pub to_role: String,
}

impl SyntheticTask {
    pub fn instruction(&self) -> TaskInstruction {
        TaskInstruction {
            task_id: self.task_id.clone(),
            text: format!(
                "Start from the {} agent and bring in a {} agent before answering.",
                self.from_role, self.to_role
            ),
        }
    }
}

/// Every ordered pair of distinct roles.
pub fn role_pair_tasks(roles: &[String]) -> Vec<SyntheticTask> {
    let mut out = Vec::new();
    for a in roles {
        for b in roles {
            if a != b {
                out.push(SyntheticTask {
                    task_id: format!("{a}->{b}"),
                    from_role: a.clone(),
                    to_role: b.clone(),
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSpec {
    /// Conjunction; all must hold for success.
    pub conditions: Vec<Condition>,
    /// Probability of flipping the rule's verdict.
    pub noise: f64,
    pub cost_per_call: u64,
    pub seed: u64,
    pub tasks: Vec<SyntheticTask>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        let roles: Vec<String> = super::space::DEFAULT_ROLES.iter().map(|s| s.to_string()).collect();
        Self {
            conditions: vec![Condition::Entry { slot: Slot::From }, Condition::Contains { slot: Slot::To }],
            noise: 0.05,
            cost_per_call: 100,
            seed: 0,
            tasks: role_pair_tasks(&roles),
        }
    }
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise rate {} is outside [0, 0.5)", self.noise)));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("oracle needs at least one task".into()));
        }
        Ok(())
    }

    pub fn task(&self, task_id: &str) -> Result<&SyntheticTask> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::NotFound(format!("task {task_id}")))
    }

    pub fn instructions(&self) -> Vec<TaskInstruction> {
        self.tasks.iter().map(SyntheticTask::instruction).collect()
    }
}

fn keyword<'a>(slot: &'a Slot, task: &'a SyntheticTask) -> &'a str {
    match slot {
        Slot::From => &task.from_role,
        Slot::To => &task.to_role,
        Slot::Keyword(k) => k,
    }
}

/// Verdict of the noiseless rule.
pub fn rule_holds(conditions: &[Condition], w: &AgentWorkflow, task: &SyntheticTask) -> bool {
    let topo = w.topology();
    let has = |k: &str| -> Vec<usize> {
        topo.ids
            .iter()
            .enumerate()
            .filter(|(_, id)| w.prompt(**id).is_some_and(|p| p.to_lowercase().contains(&k.to_lowercase())))
            .map(|(i, _)| i)
            .collect()
    };
    conditions.iter().all(|c| match c {
        Condition::Contains { slot } => !has(keyword(slot, task)).is_empty(),
        Condition::Reaches { from, to, max_hops } => {
            let targets = has(keyword(to, task));
            has(keyword(from, task)).into_iter().any(|u| {
                let dist = bfs_distances(&topo, u);
                targets.iter().any(|&v| {
                    v != u
                        && match dist[v] {
                            Some(d) => max_hops.map_or(true, |m| d <= m),
                            None => false,
                        }
                })
            })
        }
        Condition::Entry { slot } => has(keyword(slot, task)).into_iter().any(|i| topo.in_adj[i].is_empty()),
        Condition::MaxDepth { edges } => longest_path_length(w) <= *edges,
    })
}

/// Running cost of a search or labelling session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub oracle_calls: u64,
    pub surrogate_calls: u64,
    pub total: u64,
}

impl CostLedger {
    pub fn charge_oracle(&mut self, cost: u64) {
        self.oracle_calls += 1;
        self.total += cost;
    }

    pub fn charge_surrogate(&mut self, cost: u64) {
        self.surrogate_calls += 1;
        self.total += cost;
    }
}

fn noisy_label(spec: &OracleSpec, w: &AgentWorkflow, task: &SyntheticTask) -> u8 {
    let clean = rule_holds(&spec.conditions, w, task);
    // Noise depends on graph content, not on the workflow's name.
    let content = format!("{}\n{}", render_nodes(w), render_edges(w));
    let key = fnv1a(content.as_bytes()) ^ derive_seed(spec.seed, &task.task_id);
    let flip = spec.noise > 0.0 && unit_hash(key) < spec.noise;
    (clean != flip) as u8
}

/// Label of one (workflow, task) pair; charges one call to `ledger`.
pub fn ground_truth_oracle(spec: &OracleSpec, w: &AgentWorkflow, task_id: &str, ledger: &mut CostLedger) -> Result<u8> {
    let task = spec.task(task_id)?;
    ledger.charge_oracle(spec.cost_per_call);
    Ok(noisy_label(spec, w, task))
}

/// Fraction of the spec's tasks that `w` completes.
pub fn true_success_rate(spec: &OracleSpec, w: &AgentWorkflow) -> f64 {
    let hits: u32 = spec.tasks.iter().map(|t| noisy_label(spec, w, t) as u32).sum();
    hits as f64 / spec.tasks.len() as f64
}

/// Labelled corpus: `n_workflows` sampled graphs crossed with every task.
pub fn synthetic_corpus(
    space: &SyntheticSpaceConfig,
    spec: &OracleSpec,
    n_workflows: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut workflows = Vec::with_capacity(n_workflows);
    let mut seen = std::collections::HashSet::new();
    let mut k = 0u64;
    while workflows.len() < n_workflows {
        let mut w = sample_workflow(space, derive_seed(seed, &format!("corpus/{k}")))?;
        k += 1;
        if !seen.insert(w.workflow_id.clone()) {
            continue;
        }
        w.workflow_id = format!("syn-{:04}", workflows.len());
        workflows.push(w);
        if k > 100 * n_workflows as u64 + 100 {
            return Err(Error::Precondition("synthetic space too small for the requested corpus".into()));
        }
    }
    let mut samples = Vec::new();
    for w in &workflows {
        for t in &spec.tasks {
            samples.push(LabeledSample {
                workflow_id: w.workflow_id.clone(),
                task_id: t.task_id.clone(),
                label: noisy_label(spec, w, t),
            });
        }
    }
    LabeledDataset::new(workflows, spec.instructions(), samples, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(a: &str, b: &str) -> SyntheticTask {
        SyntheticTask {
            task_id: format!("{a}->{b}"),
            from_role: a.into(),
            to_role: b.into(),
        }
    }

    fn review_after_generate() -> OracleSpec {
        OracleSpec {
            conditions: vec![Condition::Reaches {
                from: Slot::From,
                to: Slot::To,
                max_hops: None,
            }],
            noise: 0.0,
            tasks: vec![task("generate", "review")],
            ..OracleSpec::default()
        }
    }

    #[test]
    fn g0_satisfies_generate_then_review() {
        let g0 = AgentWorkflow::from_parts(
            "G0",
            &[(0, "Generate code"), (1, "Review code"), (2, "Merge results")],
            &[(0, 1), (0, 2), (1, 2)],
        );
        let spec = review_after_generate();
        let mut ledger = CostLedger::default();
        assert_eq!(ground_truth_oracle(&spec, &g0, "generate->review", &mut ledger).unwrap(), 1);
        let wrong = AgentWorkflow::from_parts("c", &[(0, "Review code"), (1, "Generate code")], &[(0, 1)]);
        assert_eq!(ground_truth_oracle(&spec, &wrong, "generate->review", &mut ledger).unwrap(), 0);
        assert_eq!(ground_truth_oracle(&spec, &wrong, "generate->review", &mut ledger).unwrap(), 0);
        assert_eq!(ledger.oracle_calls, 3);
        assert_eq!(ledger.total, 300);
    }

    #[test]
    fn hop_bound_and_depth() {
        let chain = AgentWorkflow::from_parts(
            "c",
            &[(0, "plan"), (1, "generate"), (2, "review")],
            &[(0, 1), (1, 2)],
        );
        let t = task("plan", "review");
        let direct = [Condition::Reaches {
            from: Slot::From,
            to: Slot::To,
            max_hops: Some(1),
        }];
        assert!(!rule_holds(&direct, &chain, &t));
        let two = [Condition::Reaches {
            from: Slot::From,
            to: Slot::To,
            max_hops: Some(2),
        }];
        assert!(rule_holds(&two, &chain, &t));
        assert!(rule_holds(&[Condition::MaxDepth { edges: 2 }], &chain, &t));
        assert!(!rule_holds(&[Condition::MaxDepth { edges: 1 }], &chain, &t));
        assert!(rule_holds(&[Condition::Entry { slot: Slot::From }], &chain, &t));
        assert!(!rule_holds(&[Condition::Entry { slot: Slot::To }], &chain, &t));
        assert!(rule_holds(
            &[Condition::Contains {
                slot: Slot::Keyword("generate".into())
            }],
            &chain,
            &t
        ));
    }

    #[test]
    fn noise_rate_is_respected() {
        let space = SyntheticSpaceConfig::default();
        let spec = OracleSpec::default();
        let ds = synthetic_corpus(&space, &spec, 200, 3).unwrap();
        let mut flips = 0;
        for s in &ds.samples {
            let w = ds.workflow(&s.workflow_id).unwrap();
            let t = spec.task(&s.task_id).unwrap();
            if rule_holds(&spec.conditions, w, t) as u8 != s.label {
                flips += 1;
            }
        }
        let rate = flips as f64 / ds.samples.len() as f64;
        assert!((0.03..0.07).contains(&rate), "flip rate {rate}");
    }

    #[test]
    fn corpus_shape_and_balance() {
        let space = SyntheticSpaceConfig::default();
        let spec = OracleSpec::default();
        let ds = synthetic_corpus(&space, &spec, 400, 0).unwrap();
        assert_eq!(ds.workflows.len(), 400);
        assert_eq!(ds.tasks.len(), 20);
        assert_eq!(ds.samples.len(), 8000);
        let pos = ds.samples.iter().filter(|s| s.label == 1).count() as f64 / 8000.0;
        assert!((0.25..0.75).contains(&pos), "positive rate {pos}");
    }
}
