use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;
use serde_json::{json, Value};

use super::{is_valid_toposort, GoldAnswer, GraphQAItem, TaskType};
use crate::workflow::NodeId;

/// Answer normalisation rules applied before comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Normalization {
    /// Reals are compared after rounding to this many decimals.
    pub real_decimals: u32,
    /// Compare prompts after trimming surrounding whitespace.
    pub trim_prompts: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            real_decimals: 2,
            trim_prompts: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictKind {
    Correct,
    Wrong,
    Unparseable,
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub item_id: String,
    pub task_type: TaskType,
    pub verdict: VerdictKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TypeScore {
    pub correct: usize,
    pub total: usize,
    /// Unit interval; 0 when the type has no items.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradingReport {
    pub per_type: BTreeMap<TaskType, TypeScore>,
    /// Unweighted mean of the six per-type accuracies.
    pub average: f64,
    pub verdicts: Vec<Verdict>,
}

impl GradingReport {
    /// Percentages in the layout `{DBP, DNE, NPR, REACH, KNI, TSORT, Average}`.
    pub fn table_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        for t in TaskType::ALL {
            let acc = self.per_type.get(&t).map_or(0.0, |s| s.accuracy);
            m.insert(t.as_str().into(), json!(acc * 100.0));
        }
        m.insert("Average".into(), json!(self.average * 100.0));
        Value::Object(m)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "accuracy_percent": self.table_json(),
            "counts": self.per_type.iter().map(|(t, s)| (t.as_str().to_string(), json!({"correct": s.correct, "total": s.total}))).collect::<serde_json::Map<_, _>>(),
            "verdicts": self.verdicts,
        })
    }
}

fn int_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+").expect("valid regex"))
}

fn real_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("valid regex"))
}

fn key_re(word: &str) -> Regex {
    Regex::new(&format!(r"(?i){word}\s*[:=]?\s*[\[{{(]([^\]}})]*)[\]}})]")).expect("valid regex")
}

fn ints(text: &str) -> Vec<i64> {
    int_re()
        .find_iter(text)
        .filter_map(|m| m.as_str().parse().ok())
        .collect()
}

/// A single number, or `None` when zero or several distinct numbers appear.
fn single_int(text: &str) -> Option<i64> {
    if let Ok(v) = text.trim().parse::<i64>() {
        return Some(v);
    }
    let all: BTreeSet<i64> = ints(text).into_iter().collect();
    (all.len() == 1).then(|| *all.iter().next().expect("one element"))
}

fn single_real(text: &str) -> Option<f64> {
    if let Ok(v) = text.trim().parse::<f64>() {
        return Some(v);
    }
    let all: Vec<f64> = real_re()
        .find_iter(text)
        .filter_map(|m| m.as_str().parse().ok())
        .collect();
    match all.as_slice() {
        [v] => Some(*v),
        _ => None,
    }
}

fn is_explicit_empty(text: &str) -> bool {
    let t = text.trim().to_ascii_lowercase();
    matches!(t.as_str(), "[]" | "{}" | "()" | "none" | "empty" | "∅" | "set()")
}

fn node_set(text: &str) -> Option<BTreeSet<NodeId>> {
    let found = ints(text);
    if found.is_empty() {
        return is_explicit_empty(text).then(BTreeSet::new);
    }
    found
        .into_iter()
        .map(|v| NodeId::try_from(v).ok())
        .collect()
}

fn keyed_set(text: &str, word: &str) -> Option<BTreeSet<NodeId>> {
    let caps = key_re(word).captures(text)?;
    let inner = caps.get(1).map_or("", |m| m.as_str());
    if inner.trim().is_empty() {
        return Some(BTreeSet::new());
    }
    node_set(inner)
}

enum Outcome {
    Correct,
    Wrong(String),
    Unparseable,
}

fn judge(item: &GraphQAItem, answer: &str, norm: Normalization) -> Outcome {
    let scale = 10f64.powi(norm.real_decimals as i32);
    match &item.gold_answer {
        GoldAnswer::Integer(gold) => {
            if item.task_type == TaskType::Reach && answer.to_ascii_lowercase().contains("unreachable") {
                return Outcome::Wrong("answered unreachable".into());
            }
            match single_int(answer) {
                Some(v) if v == *gold as i64 => Outcome::Correct,
                Some(v) => Outcome::Wrong(format!("got {v}")),
                None => Outcome::Unparseable,
            }
        }
        GoldAnswer::Unreachable => {
            if answer.to_ascii_lowercase().contains("unreachable") {
                Outcome::Correct
            } else if single_int(answer).is_some() {
                Outcome::Wrong("gave a path length".into())
            } else {
                Outcome::Unparseable
            }
        }
        GoldAnswer::Real(gold) => match single_real(answer) {
            Some(v) if (v * scale).round() == (gold * scale).round() => Outcome::Correct,
            Some(v) => Outcome::Wrong(format!("got {v}")),
            None => Outcome::Unparseable,
        },
        GoldAnswer::Text(gold) => {
            let (a, g) = if norm.trim_prompts {
                (answer.trim(), gold.trim())
            } else {
                (answer, gold.as_str())
            };
            let unquoted = a
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .unwrap_or(a);
            if a == g || unquoted == g {
                Outcome::Correct
            } else {
                Outcome::Wrong("prompt differs".into())
            }
        }
        GoldAnswer::NodeSet(gold) => match node_set(answer) {
            Some(s) if &s == gold => Outcome::Correct,
            Some(s) => Outcome::Wrong(format!("got {s:?}")),
            None => Outcome::Unparseable,
        },
        GoldAnswer::KeyNodes { sources, sinks } => {
            match (keyed_set(answer, "sources?"), keyed_set(answer, "sinks?")) {
                (Some(a), Some(b)) if &a == sources && &b == sinks => Outcome::Correct,
                (Some(_), Some(_)) => Outcome::Wrong("key node sets differ".into()),
                _ => Outcome::Unparseable,
            }
        }
        GoldAnswer::Ordering(_) => {
            let found = ints(answer);
            if found.is_empty() {
                return Outcome::Unparseable;
            }
            let Some(order) = found
                .into_iter()
                .map(|v| NodeId::try_from(v).ok())
                .collect::<Option<Vec<_>>>()
            else {
                return Outcome::Wrong("negative node id".into());
            };
            let workflow = match item.workflow() {
                Ok(w) => w,
                Err(e) => return Outcome::Wrong(format!("cannot recover workflow: {e}")),
            };
            let check = is_valid_toposort(&workflow, &order);
            if check.valid {
                Outcome::Correct
            } else {
                Outcome::Wrong(check.reason.unwrap_or_default())
            }
        }
    }
}

/// Grade free-text answers; a missing answer counts as wrong.
pub fn grade_answers(items: &[GraphQAItem], answers: &HashMap<String, String>, norm: Normalization) -> GradingReport {
    let mut per_type: BTreeMap<TaskType, TypeScore> = BTreeMap::new();
    let mut verdicts = Vec::with_capacity(items.len());
    for item in items {
        let (kind, detail) = match answers.get(&item.item_id) {
            None => (VerdictKind::Missing, None),
            Some(a) => match judge(item, a, norm) {
                Outcome::Correct => (VerdictKind::Correct, None),
                Outcome::Wrong(d) => (VerdictKind::Wrong, Some(d)),
                Outcome::Unparseable => (VerdictKind::Unparseable, None),
            },
        };
        let score = per_type.entry(item.task_type).or_default();
        score.total += 1;
        if kind == VerdictKind::Correct {
            score.correct += 1;
        }
        verdicts.push(Verdict {
            item_id: item.item_id.clone(),
            task_type: item.task_type,
            verdict: kind,
            detail,
        });
    }
    for s in per_type.values_mut() {
        s.accuracy = if s.total == 0 {
            0.0
        } else {
            s.correct as f64 / s.total as f64
        };
    }
    let average = TaskType::ALL
        .iter()
        .map(|t| per_type.get(t).map_or(0.0, |s| s.accuracy))
        .sum::<f64>()
        / TaskType::ALL.len() as f64;
    GradingReport {
        per_type,
        average,
        verdicts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_qa::{generate_qa_dataset, Query};
    use crate::workflow::AgentWorkflow;

    fn g0() -> AgentWorkflow {
        AgentWorkflow::from_parts(
            "G0",
            &[(0, "Generate code"), (1, "Review code"), (2, "Merge results")],
            &[(0, 1), (0, 2), (1, 2)],
        )
    }

    fn item(query: Query) -> GraphQAItem {
        let qa = generate_qa_dataset(&[g0()], 100, 0).unwrap();
        qa.items.into_iter().find(|i| i.query == query).unwrap()
    }

    fn grade_one(it: &GraphQAItem, answer: &str) -> VerdictKind {
        let answers = HashMap::from([(it.item_id.clone(), answer.to_string())]);
        grade_answers(std::slice::from_ref(it), &answers, Normalization::default()).verdicts[0].verdict
    }

    #[test]
    fn oracle_answers_score_perfectly() {
        let qa = generate_qa_dataset(&[g0()], 3, 4).unwrap();
        let answers = qa
            .items
            .iter()
            .map(|i| (i.item_id.clone(), i.gold_answer.render()))
            .collect();
        let r = grade_answers(&qa.items, &answers, Normalization::default());
        assert!(r.per_type.values().all(|s| s.accuracy == 1.0));
        assert_eq!(r.average, 1.0);
    }

    #[test]
    fn empty_answers_score_zero() {
        let qa = generate_qa_dataset(&[g0()], 3, 4).unwrap();
        let answers = qa.items.iter().map(|i| (i.item_id.clone(), String::new())).collect();
        let r = grade_answers(&qa.items, &answers, Normalization::default());
        assert_eq!(r.average, 0.0);
    }

    #[test]
    fn missing_answers_count_wrong() {
        let qa = generate_qa_dataset(&[g0()], 1, 4).unwrap();
        let r = grade_answers(&qa.items, &HashMap::new(), Normalization::default());
        assert!(r.verdicts.iter().all(|v| v.verdict == VerdictKind::Missing));
        assert_eq!(r.average, 0.0);
    }

    #[test]
    fn normalisation_rules() {
        let avg = item(Query::AverageDegree);
        assert_eq!(grade_one(&avg, "2"), VerdictKind::Correct);
        assert_eq!(grade_one(&avg, "The average degree is 2.001"), VerdictKind::Correct);
        assert_eq!(grade_one(&avg, "2.1"), VerdictKind::Wrong);

        let outs = item(Query::OutNeighbors { node: 0 });
        assert_eq!(grade_one(&outs, "{2, 1}"), VerdictKind::Correct);
        assert_eq!(grade_one(&outs, "[1]"), VerdictKind::Wrong);
        let ins = item(Query::InNeighbors { node: 0 });
        assert_eq!(grade_one(&ins, "[]"), VerdictKind::Correct);
        assert_eq!(grade_one(&ins, ""), VerdictKind::Unparseable);

        let npr = item(Query::Prompt { node: 1 });
        assert_eq!(grade_one(&npr, "  Review code \n"), VerdictKind::Correct);
        assert_eq!(grade_one(&npr, "\"Review code\""), VerdictKind::Correct);

        let unreachable = item(Query::Reach { src: 2, dst: 0 });
        assert_eq!(grade_one(&unreachable, "Unreachable."), VerdictKind::Correct);
        assert_eq!(grade_one(&unreachable, "2"), VerdictKind::Wrong);
        let reach = item(Query::Reach { src: 0, dst: 2 });
        assert_eq!(grade_one(&reach, "1"), VerdictKind::Correct);

        let kni = item(Query::SourcesAndSinks);
        assert_eq!(grade_one(&kni, "Sources: [0], sinks: {2}"), VerdictKind::Correct);
        assert_eq!(grade_one(&kni, "sources: [0]; sinks: []"), VerdictKind::Wrong);
    }

    #[test]
    fn toposort_is_graded_by_validity() {
        let w = AgentWorkflow::from_parts("E", &[(0, "a"), (1, "b")], &[]);
        let qa = generate_qa_dataset(&[w], 1, 0).unwrap();
        let ts = qa.items.iter().find(|i| i.task_type == TaskType::Tsort).unwrap();
        assert_eq!(grade_one(ts, "[1, 0]"), VerdictKind::Correct);
        assert_eq!(grade_one(ts, "[0, 1]"), VerdictKind::Correct);
        assert_eq!(grade_one(ts, "[0]"), VerdictKind::Wrong);
        let ts0 = item(Query::Toposort { phrasing: 0 });
        assert_eq!(grade_one(&ts0, "1, 0, 2"), VerdictKind::Wrong);
    }

    #[test]
    fn table_json_has_all_columns() {
        let qa = generate_qa_dataset(&[g0()], 1, 4).unwrap();
        let r = grade_answers(&qa.items, &HashMap::new(), Normalization::default());
        let t = r.table_json();
        for col in ["DBP", "DNE", "NPR", "REACH", "KNI", "TSORT", "Average"] {
            assert!(t.get(col).is_some(), "{col}");
        }
    }
}
