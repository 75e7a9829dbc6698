use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{SemanticEmbeddingProvider, TextEmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::{FeatureSet, SurrogateModel};
use crate::scalar::Scalar;
use crate::seeding::derive_seed;
use crate::workflow::AgentWorkflow;

use super::oracle::{true_success_rate, CostLedger, OracleSpec};
use super::space::{mutate_workflow, sample_workflow, SyntheticSpaceConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Surrogate,
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Surrogate, Strategy::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Surrogate => "surrogate",
            Strategy::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Cost of one surrogate evaluation (all tasks of one candidate).
    pub cost_pred: u64,
    /// Consecutive rejected mutants before restarting from a fresh sample.
    pub restart_after: usize,
    /// Hard cap on scored candidates; the only stop for zero-cost scoring.
    pub max_evaluations: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            cost_pred: 1,
            restart_after: 30,
            max_evaluations: 2000,
        }
    }
}

/// Scores candidates; the surrogate variant grows its feature cache as new
/// workflows appear.
pub enum Evaluator<'a, T> {
    Random,
    Surrogate {
        model: &'a SurrogateModel<T>,
        feats: FeatureSet<T>,
        text: &'a dyn TextEmbeddingProvider,
        semantic: &'a dyn SemanticEmbeddingProvider,
    },
    Oracle,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    pub fn surrogate(
        model: &'a SurrogateModel<T>,
        spec: &OracleSpec,
        text: &'a dyn TextEmbeddingProvider,
        semantic: &'a dyn SemanticEmbeddingProvider,
    ) -> Result<Self> {
        let mut feats = FeatureSet::new();
        for t in spec.instructions() {
            feats.add_task(&t, text)?;
        }
        Ok(Evaluator::Surrogate {
            model,
            feats,
            text,
            semantic,
        })
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            Evaluator::Random => Strategy::Random,
            Evaluator::Surrogate { .. } => Strategy::Surrogate,
            Evaluator::Oracle => Strategy::Oracle,
        }
    }

    fn unit_cost(&self, spec: &OracleSpec, cfg: &SearchConfig) -> u64 {
        match self {
            Evaluator::Random => 0,
            Evaluator::Surrogate { .. } => cfg.cost_pred,
            Evaluator::Oracle => spec.cost_per_call,
        }
    }

    fn score(
        &mut self,
        w: &AgentWorkflow,
        spec: &OracleSpec,
        cfg: &SearchConfig,
        rng: &mut ChaCha8Rng,
        ledger: &mut CostLedger,
    ) -> Result<f64> {
        match self {
            Evaluator::Random => Ok(rng.gen::<f64>()),
            Evaluator::Surrogate {
                model,
                feats,
                text,
                semantic,
            } => {
                feats.add_workflow(w, *text, *semantic)?;
                let pairs: Vec<(&str, &str)> = spec
                    .tasks
                    .iter()
                    .map(|t| (w.workflow_id.as_str(), t.task_id.as_str()))
                    .collect();
                let s = model.predict(feats, &pairs, pairs.len())?;
                ledger.charge_surrogate(cfg.cost_pred);
                Ok(s.iter().sum::<f64>() / s.len() as f64)
            }
            Evaluator::Oracle => Ok(oracle_score(spec, w, ledger)),
        }
    }
}

/// One execution of `w` over the whole task set, charged as a single call.
pub fn oracle_score(spec: &OracleSpec, w: &AgentWorkflow, ledger: &mut CostLedger) -> f64 {
    ledger.charge_oracle(spec.cost_per_call);
    true_success_rate(spec, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub workflow_id: String,
    pub evaluator: Strategy,
    /// Evaluator score (random draw, surrogate mean, or oracle rate).
    pub score: f64,
    /// Known only when the evaluator is the oracle.
    pub true_score: Option<f64>,
    pub accepted: bool,
    pub restart: bool,
    pub cumulative_cost: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub strategy: Strategy,
    pub budget: u64,
    pub seed: u64,
    pub steps: Vec<TraceStep>,
    pub final_workflow: AgentWorkflow,
    pub final_true_score: f64,
    pub ledger: CostLedger,
}

impl SearchTrace {
    pub fn total_cost(&self) -> u64 {
        self.ledger.total
    }

    /// One JSON object per iteration, then a closing summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serialises"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "final": {
                "strategy": self.strategy,
                "budget": self.budget,
                "seed": self.seed,
                "workflow_id": self.final_workflow.workflow_id,
                "true_score": self.final_true_score,
                "oracle_calls": self.ledger.oracle_calls,
                "surrogate_calls": self.ledger.surrogate_calls,
                "total_cost": self.ledger.total,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Seeded hill climbing with restarts. One oracle call is reserved for
/// verifying the best candidate found, so `budget` must cover it.
pub fn run_search<T: Scalar>(
    space: &SyntheticSpaceConfig,
    spec: &OracleSpec,
    evaluator: &mut Evaluator<'_, T>,
    cfg: &SearchConfig,
    budget: u64,
    seed: u64,
) -> Result<SearchTrace> {
    space.validate()?;
    spec.validate()?;
    if budget < spec.cost_per_call {
        return Err(Error::Precondition(format!(
            "budget {budget} cannot pay for the final verification ({} per call)",
            spec.cost_per_call
        )));
    }
    let strategy = evaluator.strategy();
    let unit = evaluator.unit_cost(spec, cfg);
    let spendable = budget - spec.cost_per_call;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("search/{}", strategy.name())));
    let mut ledger = CostLedger::default();
    let mut steps = Vec::new();

    let mut restarts = 0u64;
    let fresh = |restarts: &mut u64| -> Result<AgentWorkflow> {
        *restarts += 1;
        sample_workflow(space, derive_seed(seed, &format!("search/start/{restarts}")))
    };
    let mut current: Option<(AgentWorkflow, f64)> = None;
    let mut best: Option<(AgentWorkflow, f64)> = None;
    let mut stall = 0usize;
    let mut iteration = 0usize;
    while steps.len() < cfg.max_evaluations && ledger.total + unit <= spendable {
        let restart = current.is_none() || stall >= cfg.restart_after;
        let cand = match (&current, restart) {
            (Some((w, _)), false) => {
                let m = mutate_workflow(w, space, derive_seed(seed, &format!("search/mutate/{iteration}")));
                if m.kind.is_none() {
                    stall = cfg.restart_after;
                    iteration += 1;
                    continue;
                }
                m.workflow
            }
            _ => fresh(&mut restarts)?,
        };
        cand.ensure_valid()?;
        let score = evaluator.score(&cand, spec, cfg, &mut rng, &mut ledger)?;
        let accepted = restart || current.as_ref().is_some_and(|(_, s)| score > *s);
        if accepted {
            stall = 0;
        } else {
            stall += 1;
        }
        steps.push(TraceStep {
            iteration,
            workflow_id: cand.workflow_id.clone(),
            evaluator: strategy,
            score,
            true_score: (strategy == Strategy::Oracle).then_some(score),
            accepted,
            restart,
            cumulative_cost: ledger.total,
        });
        if best.as_ref().map_or(true, |(_, s)| score > *s) {
            best = Some((cand.clone(), score));
        }
        if accepted {
            current = Some((cand, score));
        }
        iteration += 1;
    }
    let final_workflow = match best {
        Some((w, _)) => w,
        // Nothing could be scored within the budget: verify one fresh sample.
        None => fresh(&mut restarts)?,
    };
    let final_true_score = oracle_score(spec, &final_workflow, &mut ledger);
    Ok(SearchTrace {
        strategy,
        budget,
        seed,
        steps,
        final_workflow,
        final_true_score,
        ledger,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub budget: u64,
    pub runs: usize,
    pub mean_score: f64,
    pub std_score: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, strategy: Strategy, budget: u64) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.budget == budget)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Run every strategy at every budget for every seed. Returns the report and
/// all traces (strategy, budget, seed order).
#[allow(clippy::too_many_arguments)]
pub fn compare_strategies<T: Scalar>(
    space: &SyntheticSpaceConfig,
    spec: &OracleSpec,
    model: &SurrogateModel<T>,
    text: &dyn TextEmbeddingProvider,
    semantic: &dyn SemanticEmbeddingProvider,
    cfg: &SearchConfig,
    budgets: &[u64],
    seeds: &[u64],
) -> Result<(ComparisonReport, Vec<SearchTrace>)> {
    if seeds.is_empty() || budgets.is_empty() {
        return Err(Error::Precondition("need at least one budget and one seed".into()));
    }
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for strategy in Strategy::ALL {
        for &budget in budgets {
            let mut scores = Vec::new();
            let mut costs = Vec::new();
            for &seed in seeds {
                let mut ev = match strategy {
                    Strategy::Random => Evaluator::Random,
                    Strategy::Surrogate => Evaluator::surrogate(model, spec, text, semantic)?,
                    Strategy::Oracle => Evaluator::Oracle,
                };
                let t = run_search(space, spec, &mut ev, cfg, budget, seed)?;
                scores.push(t.final_true_score);
                costs.push(t.total_cost() as f64);
                traces.push(t);
            }
            let (mean_score, std_score) = mean_std(&scores);
            let (mean_cost, std_cost) = mean_std(&costs);
            rows.push(ComparisonRow {
                strategy,
                budget,
                runs: seeds.len(),
                mean_score,
                std_score,
                mean_cost,
                std_cost,
            });
        }
    }
    Ok((
        ComparisonReport {
            seeds: seeds.to_vec(),
            rows,
        },
        traces,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::oracle::{Condition, Slot, SyntheticTask};

    fn small() -> (SyntheticSpaceConfig, OracleSpec) {
        let space = SyntheticSpaceConfig {
            min_nodes: 2,
            max_nodes: 3,
            roles: vec!["x".into(), "y".into()],
            ..SyntheticSpaceConfig::default()
        };
        let spec = OracleSpec {
            conditions: vec![Condition::Entry { slot: Slot::From }, Condition::Contains { slot: Slot::To }],
            noise: 0.0,
            tasks: vec![
                SyntheticTask {
                    task_id: "x->y".into(),
                    from_role: "x".into(),
                    to_role: "y".into(),
                },
                SyntheticTask {
                    task_id: "y->x".into(),
                    from_role: "y".into(),
                    to_role: "x".into(),
                },
            ],
            ..OracleSpec::default()
        };
        (space, spec)
    }

    #[test]
    fn budget_below_one_call_is_rejected() {
        let (space, spec) = small();
        let r = run_search::<f64>(&space, &spec, &mut Evaluator::Oracle, &SearchConfig::default(), 99, 0);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn oracle_with_large_budget_finds_the_optimum() {
        let (space, spec) = small();
        for seed in 0..5 {
            let t = run_search::<f64>(&space, &spec, &mut Evaluator::Oracle, &SearchConfig::default(), 20_000, seed)
                .unwrap();
            assert_eq!(t.final_true_score, 1.0);
            let best_seen = t.steps.iter().filter_map(|s| s.true_score).fold(0.0, f64::max);
            assert_eq!(t.final_true_score, best_seen);
        }
    }

    #[test]
    fn ledger_and_trace_invariants() {
        let (space, spec) = small();
        let t = run_search::<f64>(&space, &spec, &mut Evaluator::Oracle, &SearchConfig::default(), 1_050, 3).unwrap();
        assert!(t.total_cost() <= 1_050);
        assert_eq!(t.ledger.total, t.ledger.oracle_calls * spec.cost_per_call);
        assert!(t.steps.windows(2).all(|w| w[0].cumulative_cost <= w[1].cumulative_cost));
        assert_eq!(t.steps.len(), 9);
        let again =
            run_search::<f64>(&space, &spec, &mut Evaluator::Oracle, &SearchConfig::default(), 1_050, 3).unwrap();
        assert_eq!(t, again);
        assert_eq!(t.to_jsonl().lines().count(), t.steps.len() + 1);
    }

    #[test]
    fn random_costs_only_the_verification() {
        let (space, spec) = small();
        let cfg = SearchConfig {
            max_evaluations: 50,
            ..SearchConfig::default()
        };
        let t = run_search::<f64>(&space, &spec, &mut Evaluator::Random, &cfg, 100, 1).unwrap();
        assert_eq!(t.steps.len(), 50);
        assert_eq!(t.total_cost(), 100);
        assert_eq!(t.ledger.oracle_calls, 1);
    }

    #[test]
    fn surrogate_cost_accounting() {
        use crate::encoders::{HashingTextEmbedder, StructFeatureProvider};
        use crate::training::TrainConfig;
        let (space, spec) = small();
        let cfg = TrainConfig {
            d: 8,
            text_dim: 16,
            sem_dim: 8,
            gnn_heads: 2,
            fusion_heads: 2,
            fusion_layers: 1,
            ..TrainConfig::default()
        };
        let model = SurrogateModel::<f32>::new(cfg.model_config(), 0).unwrap();
        let text = HashingTextEmbedder::new(16);
        let sem = StructFeatureProvider::new(8);
        let mut ev = Evaluator::surrogate(&model, &spec, &text, &sem).unwrap();
        let scfg = SearchConfig {
            max_evaluations: 100,
            ..SearchConfig::default()
        };
        let t = run_search(&space, &spec, &mut ev, &scfg, 10_000, 2).unwrap();
        assert_eq!(t.ledger.surrogate_calls, 100);
        assert_eq!(t.ledger.oracle_calls, 1);
        assert_eq!(t.total_cost(), 200);
        assert!(t.steps.iter().all(|s| s.true_score.is_none() && (0.0..=1.0).contains(&s.score)));
    }
}
