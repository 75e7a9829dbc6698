//! Multi-head graph attention over workflow DAGs, plus the pretraining heads.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Graph, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::workflow::AgentWorkflow;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub layers: usize,
    pub heads: usize,
    /// Also pass messages against edge direction.
    pub add_reverse_edges: bool,
    pub negative_slope: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            add_reverse_edges: false,
            negative_slope: 0.2,
        }
    }
}

/// Several workflows packed as one disjoint graph.
///
/// Nodes of each workflow appear in declaration order; every node carries a
/// self-loop in `src`/`dst`.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_nodes: usize,
    pub n_graphs: usize,
    pub offsets: Vec<usize>,
    pub graph_of_node: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl GraphBatch {
    pub fn new(workflows: &[&AgentWorkflow], add_reverse_edges: bool) -> Self {
        let mut offsets = Vec::with_capacity(workflows.len() + 1);
        let mut graph_of_node = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut base = 0;
        for (gi, w) in workflows.iter().enumerate() {
            offsets.push(base);
            let local: HashMap<_, _> = w.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
            for i in 0..w.nodes.len() {
                graph_of_node.push(gi);
                src.push(base + i);
                dst.push(base + i);
            }
            for &(s, t) in &w.edges {
                let (s, t) = (base + local[&s], base + local[&t]);
                src.push(s);
                dst.push(t);
                if add_reverse_edges {
                    src.push(t);
                    dst.push(s);
                }
            }
            base += w.nodes.len();
        }
        offsets.push(base);
        Self {
            n_nodes: base,
            n_graphs: workflows.len(),
            offsets,
            graph_of_node,
            src,
            dst,
        }
    }

    pub fn nodes_of(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }
}

#[derive(Clone, Copy, Debug)]
struct GatHead {
    w: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
}

#[derive(Clone, Debug)]
struct GatLayer {
    heads: Vec<GatHead>,
    bias: ParamId,
}

/// Stack of attention layers; head outputs are concatenated, ELU between layers.
#[derive(Clone, Debug)]
pub struct GatEncoder {
    layers: Vec<GatLayer>,
    pub config: GnnConfig,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GatEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        config: GnnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || out_dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "gnn hidden size {out_dim} is not divisible by {} heads",
                config.heads
            )));
        }
        let dh = out_dim / config.heads;
        let mut layers = Vec::new();
        let mut d_in = in_dim;
        for l in 0..config.layers {
            let heads = (0..config.heads)
                .map(|h| GatHead {
                    w: store.add(format!("{name}.l{l}.h{h}.w"), Matrix::glorot(d_in, dh, rng)),
                    a_src: store.add(format!("{name}.l{l}.h{h}.a_src"), Matrix::glorot(dh, 1, rng)),
                    a_dst: store.add(format!("{name}.l{l}.h{h}.a_dst"), Matrix::glorot(dh, 1, rng)),
                })
                .collect();
            let bias = store.add(format!("{name}.l{l}.bias"), Matrix::zeros(1, out_dim));
            layers.push(GatLayer { heads, bias });
            d_in = out_dim;
        }
        Ok(Self {
            layers,
            config,
            in_dim,
            out_dim: if config.layers == 0 { in_dim } else { out_dim },
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, batch: &GraphBatch) -> Var {
        let slope = T::c(self.config.negative_slope);
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut outs = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let w = g.p(head.w);
                let a_src = g.p(head.a_src);
                let a_dst = g.p(head.a_dst);
                let z = g.tape.matmul(h, w);
                let e_src = g.tape.matmul(z, a_src);
                let e_dst = g.tape.matmul(z, a_dst);
                let s = g.tape.gather_rows(e_src, batch.src.clone());
                let t = g.tape.gather_rows(e_dst, batch.dst.clone());
                let score = g.tape.add(s, t);
                let score = g.tape.leaky_relu(score, slope);
                let alpha = g.tape.segment_softmax(score, batch.dst.clone(), batch.n_nodes);
                let msg = g.tape.gather_rows(z, batch.src.clone());
                let msg = g.tape.mul_col(msg, alpha);
                outs.push(g.tape.scatter_add_rows(msg, batch.dst.clone(), batch.n_nodes));
            }
            let cat = if outs.len() == 1 { outs[0] } else { g.tape.concat_cols(&outs) };
            let bias = g.p(layer.bias);
            h = g.tape.add_row(cat, bias);
            if l + 1 < self.layers.len() {
                h = g.tape.elu(h);
            }
        }
        h
    }
}

/// Bilinear edge scorer `sigmoid(h_i^T W h_j + b)`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeDecoder {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

impl EdgeDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Matrix::glorot(dim, dim, rng)),
            b: store.add(format!("{name}.b"), Matrix::zeros(1, 1)),
            dim,
        }
    }

    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> EdgeDecoderParams<T> {
        EdgeDecoderParams {
            w: store.get(self.w).clone(),
            b: store.get(self.b).item(),
        }
    }

    /// Logits for the given ordered node pairs.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, pairs_i: Vec<usize>, pairs_j: Vec<usize>) -> Var {
        let w = g.p(self.w);
        let b = g.p(self.b);
        let hw = g.tape.matmul(h, w);
        let left = g.tape.gather_rows(hw, pairs_i);
        let right = g.tape.gather_rows(h, pairs_j);
        let dot = g.tape.row_dot(left, right);
        g.tape.add_scalar_var(dot, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDecoderParams<T> {
    pub w: Matrix<T>,
    pub b: T,
}

pub fn edge_probability<T: Scalar>(h_i: &[T], h_j: &[T], params: &EdgeDecoderParams<T>) -> Result<T> {
    let d = params.w.rows();
    if params.w.cols() != d || h_i.len() != d || h_j.len() != d {
        return Err(Error::Config(format!(
            "edge decoder is {}x{} but vectors have lengths {} and {}",
            params.w.rows(),
            params.w.cols(),
            h_i.len(),
            h_j.len()
        )));
    }
    let mut s = params.b;
    for (a, &x) in h_i.iter().enumerate() {
        let row = params.w.row(a);
        s += x * row.iter().zip(h_j).map(|(&w, &y)| w * y).sum::<T>();
    }
    Ok(T::one() / (T::one() + (-s).exp()))
}

/// Loss handles produced by [`pretrain_objective`].
#[derive(Clone, Copy, Debug)]
pub struct PretrainVars {
    pub node: Var,
    pub edge: Var,
    pub total: Var,
}

/// Self-supervised objective averaged over the graphs of a batch.
///
/// Per graph, the node term is the mean over nodes of the squared error
/// between `recon(h_L)` and `h_0`, and the edge term is the mean BCE over all
/// `|V|^2` ordered pairs (self pairs included, labelled 0).
pub fn pretrain_objective<T: Scalar>(
    g: &mut Graph<'_, T>,
    batch: &GraphBatch,
    workflows: &[&AgentWorkflow],
    h0: Var,
    hl: Var,
    recon: &Mlp,
    decoder: &EdgeDecoder,
) -> PretrainVars {
    let n_graphs = T::c(batch.n_graphs as f64);
    let r = recon.forward(g, hl);
    let diff = g.tape.sub(r, h0);
    let sq = g.tape.mul(diff, diff);
    let per_node = g.tape.sum_cols(sq);
    let mut node_w = vec![T::zero(); batch.n_nodes];
    let mut pi = Vec::new();
    let mut pj = Vec::new();
    let mut targets = Vec::new();
    let mut pair_w = Vec::new();
    for (gi, w) in workflows.iter().enumerate() {
        let range = batch.nodes_of(gi);
        let n = range.len();
        for v in range.clone() {
            node_w[v] = T::one() / (T::c(n as f64) * n_graphs);
        }
        let local: HashMap<_, _> = w.nodes.iter().enumerate().map(|(i, nd)| (nd.id, i)).collect();
        let mut adj = vec![false; n * n];
        for &(s, t) in &w.edges {
            adj[local[&s] * n + local[&t]] = true;
        }
        let pw = T::one() / (T::c((n * n) as f64) * n_graphs);
        for i in 0..n {
            for j in 0..n {
                pi.push(range.start + i);
                pj.push(range.start + j);
                targets.push(if adj[i * n + j] { T::one() } else { T::zero() });
                pair_w.push(pw);
            }
        }
    }
    let node = g.tape.weighted_sum(per_node, node_w);
    let logits = decoder.logits(g, hl, pi, pj);
    let edge = g.tape.bce_with_logits(logits, targets, pair_w);
    let total = g.tape.add(node, edge);
    PretrainVars { node, edge, total }
}

/// Reconstruction head mapping `d` back to the provider dimension.
pub fn recon_head<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, base_dim: usize, rng: &mut R) -> Mlp {
    Mlp::new(store, name, d, d, base_dim, rng)
}
