//! Accuracy and top-k utility, the evaluation report and sweep driver.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureSet, SurrogateModel};
use crate::scalar::Scalar;
use crate::training::{fit, TrainConfig, EVAL_CHUNK};
use crate::workflow::{Corpus, LabeledDataset};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Scores at or above `threshold` count as a predicted success.
pub fn binarize(score: f64, threshold: f64) -> u8 {
    (score >= threshold) as u8
}

/// Percentage of samples whose binarized score equals the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "accuracy needs equal, non-empty inputs (got {} scores, {} labels)",
            scores.len(),
            labels.len()
        )));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| binarize(s, threshold) == y)
        .count();
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// Workflow ids ordered by descending rate, ties by ascending id.
pub fn ranking(rates: &BTreeMap<String, f64>) -> Vec<&str> {
    let mut v: Vec<(&str, f64)> = rates.iter().map(|(k, &r)| (k.as_str(), r)).collect();
    // BTreeMap iteration is already id-ascending, and the sort is stable.
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    v.into_iter().map(|(k, _)| k).collect()
}

fn check_keys(gt: &BTreeMap<String, f64>, pred: &BTreeMap<String, f64>) -> Result<()> {
    let a: BTreeSet<&String> = gt.keys().collect();
    let b: BTreeSet<&String> = pred.keys().collect();
    if a != b {
        let diff: Vec<&str> = a.symmetric_difference(&b).map(|s| s.as_str()).collect();
        return Err(Error::KeyMismatch(format!(
            "ground-truth and predicted rates differ on: {}",
            diff.join(", ")
        )));
    }
    if a.is_empty() {
        return Err(Error::Precondition("utility needs at least one workflow".into()));
    }
    Ok(())
}

/// Overlap ratio |H_k ∩ Ĥ_k| / k for k = 1..=K.
pub fn overlap_curve(gt: &BTreeMap<String, f64>, pred: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    check_keys(gt, pred)?;
    let rg = ranking(gt);
    let rp = ranking(pred);
    let mut seen_g = BTreeSet::new();
    let mut seen_p = BTreeSet::new();
    let mut common = 0usize;
    let mut out = Vec::with_capacity(rg.len());
    for k in 0..rg.len() {
        // Incremental intersection size as both prefixes grow by one.
        let (g, p) = (rg[k], rp[k]);
        if g == p {
            common += 1;
        } else {
            if seen_p.contains(g) {
                common += 1;
            }
            if seen_g.contains(p) {
                common += 1;
            }
        }
        seen_g.insert(g);
        seen_p.insert(p);
        out.push(common as f64 / (k + 1) as f64);
    }
    Ok(out)
}

/// Mean top-k overlap over k = 1..=K, as a percentage.
pub fn utility(gt: &BTreeMap<String, f64>, pred: &BTreeMap<String, f64>) -> Result<f64> {
    let c = overlap_curve(gt, pred)?;
    Ok(100.0 * c.iter().sum::<f64>() / c.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowRates {
    pub workflow_id: String,
    pub tasks: usize,
    pub ground_truth: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub k: usize,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Scores >= threshold count as predicted success.
    pub threshold: f64,
    pub accuracy: f64,
    pub utility: f64,
    pub samples: usize,
    pub workflows: Vec<WorkflowRates>,
    /// Workflows of the dataset with no sample in the evaluated split.
    pub excluded_workflows: Vec<String>,
    pub overlap: Vec<OverlapRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Report from precomputed scores aligned with `ds.samples`.
pub fn report_from_scores(ds: &LabeledDataset, scores: &[f64], threshold: f64) -> Result<EvalReport> {
    let labels: Vec<u8> = ds.samples.iter().map(|s| s.label).collect();
    let acc = accuracy(scores, &labels, threshold)?;
    let mut per: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for (s, &p) in ds.samples.iter().zip(scores) {
        let e = per.entry(s.workflow_id.as_str()).or_default();
        e.0 += 1;
        e.1 += s.label as f64;
        e.2 += p;
    }
    let excluded: Vec<String> = ds
        .workflows
        .keys()
        .filter(|id| !per.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !excluded.is_empty() {
        log::warn!("{} workflow(s) have no evaluated tasks and are left out of utility", excluded.len());
    }
    let workflows: Vec<WorkflowRates> = per
        .iter()
        .map(|(id, &(n, y, p))| WorkflowRates {
            workflow_id: id.to_string(),
            tasks: n,
            ground_truth: y / n as f64,
            predicted: p / n as f64,
        })
        .collect();
    let gt: BTreeMap<String, f64> = workflows.iter().map(|w| (w.workflow_id.clone(), w.ground_truth)).collect();
    let pr: BTreeMap<String, f64> = workflows.iter().map(|w| (w.workflow_id.clone(), w.predicted)).collect();
    let curve = overlap_curve(&gt, &pr)?;
    let util = 100.0 * curve.iter().sum::<f64>() / curve.len() as f64;
    Ok(EvalReport {
        threshold,
        accuracy: acc,
        utility: util,
        samples: scores.len(),
        workflows,
        excluded_workflows: excluded,
        overlap: curve
            .into_iter()
            .enumerate()
            .map(|(i, o)| OverlapRow { k: i + 1, overlap: o })
            .collect(),
    })
}

/// Score every sample of `ds` and build the report.
pub fn evaluate<T: Scalar>(model: &SurrogateModel<T>, feats: &FeatureSet<T>, ds: &LabeledDataset) -> Result<EvalReport> {
    if ds.samples.is_empty() {
        return Err(Error::Precondition("evaluation split is empty".into()));
    }
    let pairs: Vec<(&str, &str)> = ds
        .samples
        .iter()
        .map(|s| (s.workflow_id.as_str(), s.task_id.as_str()))
        .collect();
    let scores = model.predict(feats, &pairs, EVAL_CHUNK)?;
    report_from_scores(ds, &scores, DEFAULT_THRESHOLD)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Alpha => "alpha",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, v: f64) {
        match self {
            SweepParam::Lambda => cfg.lambda = v,
            SweepParam::Alpha => cfg.alpha = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
    pub accuracy: f64,
    pub utility: f64,
    pub best_epoch: usize,
}

/// Train one model per value of `param` (other settings from `base`) and
/// evaluate each on the test split.
pub fn sweep<T: Scalar>(
    feats: &FeatureSet<T>,
    corpus: &Corpus,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, v);
        cfg.validate()?;
        let run = fit::<T>(feats, corpus, &cfg)?;
        let report = evaluate(&run.model, feats, &corpus.test)?;
        log::info!("{} = {v}: accuracy {:.2}", param.name(), report.accuracy);
        out.push(SweepPoint {
            param,
            value: v,
            accuracy: report.accuracy,
            utility: report.utility,
            best_epoch: run.history.best_epoch,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rates(v: &[(&str, f64)]) -> BTreeMap<String, f64> {
        v.iter().map(|(k, r)| (k.to_string(), *r)).collect()
    }

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[1.0, 0.0, 1.0], &[1, 1, 1], 0.5).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 100.0);
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 100.0);
        assert!(matches!(accuracy(&[], &[], 0.5), Err(Error::Precondition(_))));
    }

    #[test]
    fn utility_examples() {
        let gt = rates(&[("A", 0.9), ("B", 0.5), ("C", 0.1)]);
        let pred = rates(&[("A", 0.8), ("B", 0.2), ("C", 0.6)]);
        assert!((utility(&gt, &pred).unwrap() - 250.0 / 3.0).abs() < 1e-9);
        assert_eq!(utility(&gt, &gt).unwrap(), 100.0);
        assert_eq!(utility(&rates(&[("X", 0.3)]), &rates(&[("X", 0.9)])).unwrap(), 100.0);
    }

    #[test]
    fn key_mismatch_lists_difference() {
        let gt = rates(&[("A", 0.9), ("B", 0.5)]);
        let pred = rates(&[("A", 0.8), ("C", 0.6)]);
        match utility(&gt, &pred) {
            Err(Error::KeyMismatch(m)) => assert!(m.contains('B') && m.contains('C')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ties_break_by_id() {
        let r = rates(&[("b", 0.5), ("a", 0.5), ("c", 0.7)]);
        assert_eq!(ranking(&r), vec!["c", "a", "b"]);
    }

    #[test]
    fn report_shape() {
        use crate::workflow::{AgentWorkflow, LabeledSample, Split, TaskInstruction};
        let ws = ["w1", "w2", "w3"].map(|id| AgentWorkflow::from_parts(id, &[(0, "x")], &[]));
        let tasks = ["t1", "t2"].map(|t| TaskInstruction {
            task_id: t.into(),
            text: t.into(),
        });
        let s = |w: &str, t: &str, y| LabeledSample {
            workflow_id: w.into(),
            task_id: t.into(),
            label: y,
        };
        let samples = vec![s("w1", "t1", 1), s("w1", "t2", 0), s("w2", "t1", 1)];
        let ds = LabeledDataset::new(ws, tasks, samples, Split::Test).unwrap();
        let r = report_from_scores(&ds, &[0.9, 0.2, 0.4], 0.5).unwrap();
        assert!((r.accuracy - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.excluded_workflows, vec!["w3".to_string()]);
        assert_eq!(r.workflows.len(), 2);
        assert_eq!(r.overlap.last().unwrap().overlap, 1.0);
        assert_eq!(r.workflows[0].ground_truth, 0.5);
        assert!((r.workflows[0].predicted - 0.55).abs() < 1e-12);
    }
}
