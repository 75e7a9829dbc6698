//! Deterministic linearisation of a workflow into descriptive text, and the
//! matching parser.
//!
//! Layout (version [`TEMPLATE_VERSION`]):
//!
//! ```text
//! <PREAMBLE>
//! Nodes: {0: "Generate code", 1: "Review code"}
//! Edges: [(0, 1)]
//! Provide a single token representing the embedding of this graph.
//! ```
//!
//! Prompts are double-quoted with backslash escapes for `\\`, `"`, newline,
//! carriage return and tab.

use crate::error::{Error, Result};
use crate::workflow::{AgentWorkflow, Node, NodeId};

pub const TEMPLATE_VERSION: &str = "1";

pub const PREAMBLE: &str = "The following describes an agentic workflow as a directed acyclic graph. \
Each node is an agent: the node dictionary maps every node ID to the prompt of that agent, \
and the edge list contains (source, target) tuples giving the direction in which information flows.";

pub const NODES_LABEL: &str = "Nodes: ";
pub const EDGES_LABEL: &str = "Edges: ";
pub const FINAL_INSTRUCTION: &str = "Provide a single token representing the embedding of this graph.";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SerializedWorkflow {
    pub workflow_id: String,
    pub text: String,
}

impl SerializedWorkflow {
    /// Parse back into a workflow carrying this serialisation's id.
    pub fn parse(&self) -> Result<AgentWorkflow> {
        let mut w = parse_serialized(&self.text)?;
        w.workflow_id = self.workflow_id.clone();
        Ok(w)
    }
}

fn escape_into(out: &mut String, s: &str) {
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
}

/// The node dictionary literal, ascending by node id.
pub fn render_nodes(w: &AgentWorkflow) -> String {
    let mut nodes: Vec<&Node> = w.nodes.iter().collect();
    nodes.sort_by_key(|n| n.id);
    let mut out = String::from("{");
    for (i, n) in nodes.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&n.id.to_string());
        out.push_str(": \"");
        escape_into(&mut out, &n.prompt);
        out.push('"');
    }
    out.push('}');
    out
}

/// The edge list literal, in input order.
pub fn render_edges(w: &AgentWorkflow) -> String {
    let parts: Vec<String> = w.edges.iter().map(|(s, t)| format!("({s}, {t})")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn serialize_workflow(w: &AgentWorkflow) -> Result<SerializedWorkflow> {
    w.ensure_valid()?;
    let text = format!(
        "{PREAMBLE}\n{NODES_LABEL}{}\n{EDGES_LABEL}{}\n{FINAL_INSTRUCTION}",
        render_nodes(w),
        render_edges(w)
    );
    Ok(SerializedWorkflow {
        workflow_id: w.workflow_id.clone(),
        text,
    })
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::TemplateParse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            let shown: String = lit.chars().take(24).collect();
            self.err(format!("expected {shown:?}"))
        }
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn number(&mut self) -> Result<NodeId> {
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return self.err("expected a node id");
        }
        let text = &self.rest()[..digits];
        let v = text
            .parse::<NodeId>()
            .or_else(|_| self.err(format!("node id {text} out of range")))?;
        self.pos += digits;
        Ok(v)
    }

    fn quoted(&mut self) -> Result<String> {
        self.expect("\"")?;
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return self.err("unterminated prompt string"),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('\\') => out.push('\\'),
                    Some('"') => out.push('"'),
                    Some('n') => out.push('\n'),
                    Some('r') => out.push('\r'),
                    Some('t') => out.push('\t'),
                    _ => return self.err("invalid escape sequence"),
                },
                Some(c) => out.push(c),
            }
        }
    }
}

/// Inverse of [`serialize_workflow`]; the returned workflow has an empty id.
pub fn parse_serialized(text: &str) -> Result<AgentWorkflow> {
    let mut c = Cursor { src: text, pos: 0 };
    c.expect(PREAMBLE)?;
    c.expect("\n")?;
    c.expect(NODES_LABEL)?;
    c.expect("{")?;
    let mut nodes = Vec::new();
    if c.peek() == Some('}') {
        c.bump();
    } else {
        loop {
            let id = c.number()?;
            c.expect(": ")?;
            let prompt = c.quoted()?;
            nodes.push(Node { id, prompt });
            match c.bump() {
                Some(',') => c.expect(" ")?,
                Some('}') => break,
                _ => return c.err("expected ',' or '}' in node dictionary"),
            }
        }
    }
    c.expect("\n")?;
    c.expect(EDGES_LABEL)?;
    c.expect("[")?;
    let mut edges = Vec::new();
    if c.peek() == Some(']') {
        c.bump();
    } else {
        loop {
            c.expect("(")?;
            let s = c.number()?;
            c.expect(", ")?;
            let t = c.number()?;
            c.expect(")")?;
            edges.push((s, t));
            match c.bump() {
                Some(',') => c.expect(" ")?,
                Some(']') => break,
                _ => return c.err("expected ',' or ']' in edge list"),
            }
        }
    }
    c.expect("\n")?;
    c.expect(FINAL_INSTRUCTION)?;
    if c.pos != text.len() {
        return c.err("trailing text after final instruction");
    }
    Ok(AgentWorkflow::new(String::new(), nodes, edges))
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
    fn single_node_rendering() {
        let w = AgentWorkflow::from_parts("w", &[(0, "A")], &[]);
        let s = serialize_workflow(&w).unwrap();
        assert!(s.text.contains(r#"{0: "A"}"#));
        assert!(s.text.contains("[]"));
        assert!(s.text.ends_with(FINAL_INSTRUCTION));
        assert_eq!(parse_serialized(&s.text).unwrap().nodes, w.nodes);
    }

    #[test]
    fn g0_edge_section_and_determinism() {
        let a = serialize_workflow(&g0()).unwrap();
        let b = serialize_workflow(&g0()).unwrap();
        assert_eq!(a, b);
        assert!(a.text.contains("Edges: [(0, 1), (0, 2), (1, 2)]\n"));
        let nodes_at = a.text.find(NODES_LABEL).unwrap();
        let edges_at = a.text.find(EDGES_LABEL).unwrap();
        assert!(nodes_at < edges_at);
    }

    #[test]
    fn g0_round_trip() {
        let s = serialize_workflow(&g0()).unwrap();
        assert_eq!(s.parse().unwrap(), g0());
    }

    #[test]
    fn nodes_render_in_ascending_id_order() {
        let w = AgentWorkflow::from_parts("w", &[(5, "x"), (2, "y")], &[(5, 2)]);
        let s = serialize_workflow(&w).unwrap();
        assert!(s.text.contains(r#"{2: "y", 5: "x"}"#));
    }

    #[test]
    fn escapes_survive_round_trip() {
        let w = AgentWorkflow::from_parts("w", &[(0, "say \"hi\"\nthen\\leave\t}"), (1, "")], &[(0, 1)]);
        let s = serialize_workflow(&w).unwrap();
        let back = parse_serialized(&s.text).unwrap();
        assert_eq!(back.nodes, w.nodes);
    }

    #[test]
    fn truncated_text_is_a_parse_error_with_offset() {
        let s = serialize_workflow(&g0()).unwrap();
        let cut = &s.text[..s.text.find(EDGES_LABEL).unwrap()];
        match parse_serialized(cut) {
            Err(Error::TemplateParse { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_workflow_is_rejected() {
        let w = AgentWorkflow::from_parts("bad", &[(0, "a"), (1, "b")], &[(0, 1), (1, 0)]);
        assert!(matches!(serialize_workflow(&w), Err(Error::InvalidWorkflow { .. })));
    }
}
