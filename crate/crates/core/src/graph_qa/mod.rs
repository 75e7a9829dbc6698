//! Graph-reasoning question answering over serialised workflows: exact
//! oracles, instruction-corpus generation and answer grading.

mod generate;
mod grade;
pub mod oracles;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::textualize::{parse_serialized, FINAL_INSTRUCTION};
use crate::workflow::{AgentWorkflow, NodeId};

pub use generate::{generate_qa_dataset, holdout_workflows, GeneratedQa, CORPUS_METADATA};
pub use grade::{grade_answers, GradingReport, Normalization, TypeScore, Verdict, VerdictKind};
pub use oracles::*;

/// The six question families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "DBP")]
    Dbp,
    #[serde(rename = "DNE")]
    Dne,
    #[serde(rename = "NPR")]
    Npr,
    #[serde(rename = "REACH")]
    Reach,
    #[serde(rename = "KNI")]
    Kni,
    #[serde(rename = "TSORT")]
    Tsort,
}

impl TaskType {
    pub const ALL: [TaskType; 6] = [
        TaskType::Dbp,
        TaskType::Dne,
        TaskType::Npr,
        TaskType::Reach,
        TaskType::Kni,
        TaskType::Tsort,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Dbp => "DBP",
            TaskType::Dne => "DNE",
            TaskType::Npr => "NPR",
            TaskType::Reach => "REACH",
            TaskType::Kni => "KNI",
            TaskType::Tsort => "TSORT",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown task type {s}")))
    }
}

/// What exactly an item asks; distinct items of one type differ in their query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    InDegree { node: NodeId },
    OutDegree { node: NodeId },
    AverageDegree,
    InNeighbors { node: NodeId },
    OutNeighbors { node: NodeId },
    Prompt { node: NodeId },
    Reach { src: NodeId, dst: NodeId },
    Sources,
    Sinks,
    SourcesAndSinks,
    Toposort { phrasing: u8 },
}

impl Query {
    pub fn task_type(self) -> TaskType {
        match self {
            Query::InDegree { .. } | Query::OutDegree { .. } | Query::AverageDegree => TaskType::Dbp,
            Query::InNeighbors { .. } | Query::OutNeighbors { .. } => TaskType::Dne,
            Query::Prompt { .. } => TaskType::Npr,
            Query::Reach { .. } => TaskType::Reach,
            Query::Sources | Query::Sinks | Query::SourcesAndSinks => TaskType::Kni,
            Query::Toposort { .. } => TaskType::Tsort,
        }
    }
}

/// Canonical gold answer.
#[derive(Clone, Debug, PartialEq)]
pub enum GoldAnswer {
    Integer(u64),
    /// Already rounded to two decimals.
    Real(f64),
    Text(String),
    NodeSet(BTreeSet<NodeId>),
    Ordering(Vec<NodeId>),
    Unreachable,
    KeyNodes {
        sources: BTreeSet<NodeId>,
        sinks: BTreeSet<NodeId>,
    },
}

fn render_ids<'a>(ids: impl IntoIterator<Item = &'a NodeId>) -> String {
    let parts: Vec<String> = ids.into_iter().map(ToString::to_string).collect();
    format!("[{}]", parts.join(", "))
}

impl GoldAnswer {
    /// Answer evaluated by the exact oracle for `query`.
    pub fn compute(w: &AgentWorkflow, query: Query) -> Result<Self> {
        Ok(match query {
            Query::InDegree { node } => GoldAnswer::Integer(oracle_degrees(w, node)?.0 as u64),
            Query::OutDegree { node } => GoldAnswer::Integer(oracle_degrees(w, node)?.1 as u64),
            Query::AverageDegree => GoldAnswer::Real(oracle_average_degree(w)),
            Query::InNeighbors { node } => GoldAnswer::NodeSet(oracle_neighbors(w, node)?.0),
            Query::OutNeighbors { node } => GoldAnswer::NodeSet(oracle_neighbors(w, node)?.1),
            Query::Prompt { node } => GoldAnswer::Text(oracle_prompt(w, node)?),
            Query::Reach { src, dst } => match oracle_reachability(w, src, dst)?.shortest_length {
                Some(len) => GoldAnswer::Integer(len as u64),
                None => GoldAnswer::Unreachable,
            },
            Query::Sources => GoldAnswer::NodeSet(oracle_key_nodes(w).0),
            Query::Sinks => GoldAnswer::NodeSet(oracle_key_nodes(w).1),
            Query::SourcesAndSinks => {
                let (sources, sinks) = oracle_key_nodes(w);
                GoldAnswer::KeyNodes { sources, sinks }
            }
            Query::Toposort { .. } => GoldAnswer::Ordering(oracle_toposort(w)?),
        })
    }

    /// Canonical answer text; grading this text always scores as correct.
    pub fn render(&self) -> String {
        match self {
            GoldAnswer::Integer(v) => v.to_string(),
            GoldAnswer::Real(v) => format!("{v:.2}"),
            GoldAnswer::Text(s) => s.clone(),
            GoldAnswer::NodeSet(s) => render_ids(s),
            GoldAnswer::Ordering(o) => render_ids(o),
            GoldAnswer::Unreachable => "unreachable".into(),
            GoldAnswer::KeyNodes { sources, sinks } => {
                format!("sources: {}; sinks: {}", render_ids(sources), render_ids(sinks))
            }
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            GoldAnswer::Integer(v) => json!(v),
            GoldAnswer::Real(v) => json!(v),
            GoldAnswer::Text(s) => json!(s),
            GoldAnswer::NodeSet(s) => json!(s),
            GoldAnswer::Ordering(o) => json!(o),
            GoldAnswer::Unreachable => json!("unreachable"),
            GoldAnswer::KeyNodes { sources, sinks } => json!({ "sources": sources, "sinks": sinks }),
        }
    }

    /// Decode a JSON gold answer; the query decides the canonical form.
    pub fn from_json(query: Query, v: &Value) -> Result<Self> {
        let bad = || Error::Parse(format!("gold answer {v} does not fit query {query:?}"));
        let ids = |v: &Value| -> Result<Vec<NodeId>> {
            v.as_array()
                .ok_or_else(bad)?
                .iter()
                .map(|x| x.as_u64().map(|n| n as NodeId).ok_or_else(bad))
                .collect()
        };
        Ok(match query {
            Query::InDegree { .. } | Query::OutDegree { .. } => GoldAnswer::Integer(v.as_u64().ok_or_else(bad)?),
            Query::AverageDegree => GoldAnswer::Real(v.as_f64().ok_or_else(bad)?),
            Query::InNeighbors { .. } | Query::OutNeighbors { .. } | Query::Sources | Query::Sinks => {
                GoldAnswer::NodeSet(ids(v)?.into_iter().collect())
            }
            Query::Prompt { .. } => GoldAnswer::Text(v.as_str().ok_or_else(bad)?.to_string()),
            Query::Reach { .. } => match v {
                Value::String(s) if s == "unreachable" => GoldAnswer::Unreachable,
                _ => GoldAnswer::Integer(v.as_u64().ok_or_else(bad)?),
            },
            Query::SourcesAndSinks => GoldAnswer::KeyNodes {
                sources: ids(v.get("sources").ok_or_else(bad)?)?.into_iter().collect(),
                sinks: ids(v.get("sinks").ok_or_else(bad)?)?.into_iter().collect(),
            },
            Query::Toposort { .. } => GoldAnswer::Ordering(ids(v)?),
        })
    }
}

/// One instruction-tuning question/answer pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphQAItem {
    pub item_id: String,
    pub workflow_id: String,
    pub task_type: TaskType,
    pub query: Query,
    /// Serialised workflow followed by the question.
    pub question: String,
    pub gold_answer: GoldAnswer,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    item_id: String,
    workflow_id: String,
    task_type: TaskType,
    query: Query,
    question: String,
    gold_answer: Value,
}

impl GraphQAItem {
    /// Recover the workflow embedded in the question text.
    pub fn workflow(&self) -> Result<AgentWorkflow> {
        let marker = format!("\n{FINAL_INSTRUCTION}");
        let end = self
            .question
            .find(&marker)
            .ok_or_else(|| Error::Parse(format!("item {} has no serialised workflow", self.item_id)))?;
        let mut w = parse_serialized(&self.question[..end + marker.len()])?;
        w.workflow_id = self.workflow_id.clone();
        Ok(w)
    }

    pub fn to_jsonl_line(&self) -> String {
        let rec = ItemRecord {
            item_id: self.item_id.clone(),
            workflow_id: self.workflow_id.clone(),
            task_type: self.task_type,
            query: self.query,
            question: self.question.clone(),
            gold_answer: self.gold_answer.to_json(),
        };
        serde_json::to_string(&rec).expect("item serialises")
    }

    pub fn from_jsonl_line(line: &str) -> Result<Self> {
        let rec: ItemRecord = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
        if rec.query.task_type() != rec.task_type {
            return Err(Error::Parse(format!(
                "item {}: query {:?} does not belong to {}",
                rec.item_id, rec.query, rec.task_type
            )));
        }
        Ok(Self {
            gold_answer: GoldAnswer::from_json(rec.query, &rec.gold_answer)?,
            item_id: rec.item_id,
            workflow_id: rec.workflow_id,
            task_type: rec.task_type,
            query: rec.query,
            question: rec.question,
        })
    }
}

pub fn write_qa_jsonl(items: &[GraphQAItem]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&it.to_jsonl_line());
        out.push('\n');
    }
    out
}

pub fn read_qa_jsonl(text: &str) -> Result<Vec<GraphQAItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| GraphQAItem::from_jsonl_line(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Grading input record: `{"item_id": .., "answer": ..}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub item_id: String,
    pub answer: String,
}

pub fn read_answers_jsonl(text: &str) -> Result<std::collections::HashMap<String, String>> {
    let mut out = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: AnswerRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.insert(rec.item_id, rec.answer);
    }
    Ok(out)
}
