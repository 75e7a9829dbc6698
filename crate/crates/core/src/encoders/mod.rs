//! Representation branches: task text, graph structure (attention GNN with
//! self-supervised pretraining heads) and whole-workflow semantics.

mod gnn;
pub mod providers;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{Graph, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::workflow::{AgentWorkflow, NodeId};

pub use gnn::{
    edge_probability, pretrain_objective, recon_head, EdgeDecoder, EdgeDecoderParams, GatEncoder, GnnConfig,
    GraphBatch, PretrainVars,
};
pub use providers::{
    Cached, EmbeddingCache, HashingTextEmbedder, HttpEmbeddingProvider, SemanticEmbeddingProvider,
    StructFeatureProvider, TextEmbeddingProvider,
};

/// One vector per node, rows in `node_ids` order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings<T> {
    pub node_ids: Vec<NodeId>,
    pub vectors: Matrix<T>,
}

impl<T: Scalar> NodeEmbeddings<T> {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.node_ids.iter().position(|&n| n == id).map(|i| self.vectors.row(i))
    }
}

/// The three d-dimensional branch outputs for one (workflow, task) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle<T> {
    pub r_task: Vec<T>,
    pub r_gnn: Vec<T>,
    pub r_llm: Vec<T>,
}

impl<T: Scalar> EmbeddingBundle<T> {
    pub fn check(&self, d: usize) -> Result<()> {
        for (name, v) in [("task", &self.r_task), ("gnn", &self.r_gnn), ("llm", &self.r_llm)] {
            if v.len() != d {
                return Err(Error::Config(format!("{name} representation has length {}, expected {d}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{name} representation")));
            }
        }
        Ok(())
    }
}

/// Level-0 node vectors: the text provider applied to every prompt.
pub fn init_node_embeddings<T: Scalar>(
    provider: &dyn TextEmbeddingProvider,
    w: &AgentWorkflow,
) -> Result<NodeEmbeddings<T>> {
    w.ensure_valid()?;
    let dim = provider.base_dim();
    let mut data = Vec::with_capacity(w.nodes.len() * dim);
    for n in &w.nodes {
        let v = provider.embed(&n.prompt).map_err(|e| Error::Provider {
            provider: provider.name().to_string(),
            subject: format!("workflow {} node {}", w.workflow_id, n.id),
            message: e.to_string(),
        })?;
        if v.len() != dim {
            return Err(Error::Provider {
                provider: provider.name().to_string(),
                subject: format!("workflow {} node {}", w.workflow_id, n.id),
                message: format!("expected {dim} values, got {}", v.len()),
            });
        }
        data.extend(v.into_iter().map(T::c));
    }
    Ok(NodeEmbeddings {
        node_ids: w.nodes.iter().map(|n| n.id).collect(),
        vectors: Matrix::from_vec(w.nodes.len(), dim, data),
    })
}

/// Run the encoder on one workflow outside of training.
pub fn gnn_forward<T: Scalar>(
    h0: &NodeEmbeddings<T>,
    w: &AgentWorkflow,
    encoder: &GatEncoder,
    store: &ParamStore<T>,
) -> Result<NodeEmbeddings<T>> {
    if h0.dim() != encoder.in_dim {
        return Err(Error::Config(format!(
            "node embeddings have dimension {}, encoder expects {}",
            h0.dim(),
            encoder.in_dim
        )));
    }
    let order: HashMap<NodeId, usize> = h0.node_ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    if w.nodes.len() != h0.len() || w.nodes.iter().any(|n| !order.contains_key(&n.id)) {
        return Err(Error::Precondition(format!(
            "node embeddings do not cover workflow {}",
            w.workflow_id
        )));
    }
    // Put h0 rows in the workflow's declaration order expected by GraphBatch.
    let rows: Vec<Vec<T>> = w.nodes.iter().map(|n| h0.vectors.row(order[&n.id]).to_vec()).collect();
    let batch = GraphBatch::new(&[w], encoder.config.add_reverse_edges);
    let mut g = Graph::new(store);
    let x = g.constant(Matrix::from_rows(&rows));
    let h = encoder.forward(&mut g, x, &batch);
    Ok(NodeEmbeddings {
        node_ids: w.nodes.iter().map(|n| n.id).collect(),
        vectors: g.value(h).clone(),
    })
}

pub fn pool_mean<T: Scalar>(h: &NodeEmbeddings<T>) -> Result<Vec<T>> {
    if h.is_empty() {
        return Err(Error::Precondition("mean pooling over an empty node set".into()));
    }
    let n = T::c(h.len() as f64);
    let mut out = vec![T::zero(); h.dim()];
    for i in 0..h.len() {
        for (o, &x) in out.iter_mut().zip(h.vectors.row(i)) {
            *o += x;
        }
    }
    Ok(out.into_iter().map(|x| x / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainLosses<T> {
    pub node: T,
    pub edge: T,
    pub total: T,
}

/// Pretraining losses for one workflow from given level-0 and level-L vectors.
pub fn pretrain_losses<T: Scalar>(
    w: &AgentWorkflow,
    h0: &NodeEmbeddings<T>,
    hl: &NodeEmbeddings<T>,
    recon: &Mlp,
    decoder: &EdgeDecoder,
    store: &ParamStore<T>,
) -> Result<PretrainLosses<T>> {
    let ids: Vec<NodeId> = w.nodes.iter().map(|n| n.id).collect();
    if h0.node_ids != ids || hl.node_ids != ids {
        return Err(Error::Precondition("h0 and hL must list the workflow's nodes in order".into()));
    }
    if recon.in_dim() != hl.dim() || recon.out_dim() != h0.dim() || decoder.dim != hl.dim() {
        return Err(Error::Config("pretraining head dimensions do not match embeddings".into()));
    }
    let batch = GraphBatch::new(&[w], false);
    let mut g = Graph::new(store);
    let x0 = g.constant(h0.vectors.clone());
    let xl = g.constant(hl.vectors.clone());
    let v = pretrain_objective(&mut g, &batch, &[w], x0, xl, recon, decoder);
    Ok(PretrainLosses {
        node: g.value(v.node).item(),
        edge: g.value(v.edge).item(),
        total: g.value(v.total).item(),
    })
}

/// Projected text embedding for a task instruction.
pub fn project<T: Scalar>(input: &[f64], projector: &Mlp, store: &ParamStore<T>) -> Result<Vec<T>> {
    if input.len() != projector.in_dim() {
        return Err(Error::Config(format!(
            "projector expects {} inputs, got {}",
            projector.in_dim(),
            input.len()
        )));
    }
    let mut g = Graph::new(store);
    let x = g.constant(Matrix::from_f64(1, input.len(), input));
    let y = projector.forward(&mut g, x);
    Ok(g.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g0() -> AgentWorkflow {
        AgentWorkflow::from_parts(
            "G0",
            &[(0, "Generate code"), (1, "Review code"), (2, "Merge results")],
            &[(0, 1), (0, 2), (1, 2)],
        )
    }

    #[test]
    fn pool_mean_examples() {
        let h = NodeEmbeddings {
            node_ids: vec![0, 1],
            vectors: Matrix::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        };
        assert_eq!(pool_mean(&h).unwrap(), vec![0.5, 0.5]);
        let one = NodeEmbeddings {
            node_ids: vec![4],
            vectors: Matrix::<f64>::from_rows(&[vec![0.3, -2.0]]),
        };
        assert_eq!(pool_mean(&one).unwrap(), vec![0.3, -2.0]);
        let empty = NodeEmbeddings::<f64> {
            node_ids: vec![],
            vectors: Matrix::zeros(0, 2),
        };
        assert!(matches!(pool_mean(&empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn edge_probability_closed_forms() {
        let zero = EdgeDecoderParams {
            w: Matrix::<f64>::zeros(2, 2),
            b: 0.0,
        };
        assert_eq!(edge_probability(&[1.0, 2.0], &[3.0, -1.0], &zero).unwrap(), 0.5);
        let id = EdgeDecoderParams {
            w: Matrix::<f64>::identity(2),
            b: 0.0,
        };
        let p = edge_probability(&[1.0, 0.0], &[1.0, 0.0], &id).unwrap();
        assert!((p - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((p - 0.7311).abs() < 1e-4);
        let hi = EdgeDecoderParams { b: 50.0, ..zero.clone() };
        let lo = EdgeDecoderParams { b: -50.0, ..zero.clone() };
        assert!(edge_probability(&[0.0, 0.0], &[0.0, 0.0], &hi).unwrap() > 1.0 - 1e-12);
        assert!(edge_probability(&[0.0, 0.0], &[0.0, 0.0], &lo).unwrap() < 1e-12);
        assert!(matches!(edge_probability(&[1.0], &[1.0, 0.0], &id), Err(Error::Config(_))));
    }

    #[test]
    fn init_embeddings_follow_prompts() {
        let p = HashingTextEmbedder::new(16);
        let w = AgentWorkflow::from_parts("w", &[(0, "same"), (1, "same"), (2, "other")], &[(0, 1)]);
        let h: NodeEmbeddings<f64> = init_node_embeddings(&p, &w).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h.dim(), 16);
        assert_eq!(h.get(0), h.get(1));
        assert_ne!(h.get(0), h.get(2));
    }

    fn encoder(store: &mut ParamStore<f64>, layers: usize) -> GatEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GnnConfig {
            layers,
            heads: 2,
            ..GnnConfig::default()
        };
        GatEncoder::new(store, "gnn", 16, 8, cfg, &mut rng).unwrap()
    }

    #[test]
    fn single_node_depends_only_on_itself() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 2);
        let p = HashingTextEmbedder::new(16);
        let a = AgentWorkflow::from_parts("a", &[(0, "solo agent")], &[]);
        let h0 = init_node_embeddings(&p, &a).unwrap();
        let out = gnn_forward(&h0, &a, &enc, &store).unwrap();
        assert_eq!(out.vectors.shape(), (1, 8));
        // Same prompt embedded inside a bigger graph with no incoming edges.
        let b = AgentWorkflow::from_parts("b", &[(0, "solo agent"), (1, "downstream")], &[(0, 1)]);
        let hb = gnn_forward(&init_node_embeddings(&p, &b).unwrap(), &b, &enc, &store).unwrap();
        for (x, y) in out.vectors.row(0).iter().zip(hb.get(0).unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 2);
        let p = HashingTextEmbedder::new(16);
        let w = g0();
        let permuted = AgentWorkflow::from_parts(
            "G0p",
            &[(7, "Merge results"), (3, "Generate code"), (5, "Review code")],
            &[(3, 5), (3, 7), (5, 7)],
        );
        let a = gnn_forward(&init_node_embeddings(&p, &w).unwrap(), &w, &enc, &store).unwrap();
        let b = gnn_forward(&init_node_embeddings(&p, &permuted).unwrap(), &permuted, &enc, &store).unwrap();
        for (orig, relabeled) in [(0, 3), (1, 5), (2, 7)] {
            for (x, y) in a.get(orig).unwrap().iter().zip(b.get(relabeled).unwrap()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        let pa = pool_mean(&a).unwrap();
        let pb = pool_mean(&b).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn reverse_edges_flag_changes_sources() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GnnConfig {
            layers: 1,
            heads: 2,
            add_reverse_edges: true,
            ..GnnConfig::default()
        };
        let enc = GatEncoder::new(&mut store, "gnn", 16, 8, cfg, &mut rng).unwrap();
        let mut plain = enc.clone();
        plain.config.add_reverse_edges = false;
        let p = HashingTextEmbedder::new(16);
        let w = g0();
        let h0 = init_node_embeddings(&p, &w).unwrap();
        let a = gnn_forward(&h0, &w, &enc, &store).unwrap();
        let b = gnn_forward(&h0, &w, &plain, &store).unwrap();
        // Node 0 is a source: it only hears from others when edges are reversed.
        assert_ne!(a.get(0), b.get(0));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GnnConfig {
            heads: 3,
            ..GnnConfig::default()
        };
        assert!(matches!(
            GatEncoder::new(&mut store, "gnn", 4, 8, cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretrain_loss_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let recon = recon_head(&mut store, "recon", 2, 3, &mut rng);
        let dec = EdgeDecoder::new(&mut store, "edge", 2, &mut rng);
        // recon output is the constant fc2.b; the decoder is zeroed.
        *store.get_mut(recon.second.w) = Matrix::zeros(2, 3);
        *store.get_mut(recon.second.b) = Matrix::row_vector(vec![0.5, -1.0, 2.0]);
        *store.get_mut(dec.w) = Matrix::zeros(2, 2);
        let w = AgentWorkflow::from_parts("w", &[(0, "a"), (1, "b")], &[(0, 1)]);
        let h0 = NodeEmbeddings {
            node_ids: vec![0, 1],
            vectors: Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0]]),
        };
        let hl = NodeEmbeddings {
            node_ids: vec![0, 1],
            vectors: Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]]),
        };
        let l = pretrain_losses(&w, &h0, &hl, &recon, &dec, &store).unwrap();
        assert_eq!(l.node, 0.0);
        assert!((l.edge - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.total, l.node + l.edge);
    }

    #[test]
    fn edge_term_counts_all_ordered_pairs() {
        // With a decoder of constant logit z, the loss is the average of
        // per-pair BCE over |V|^2 pairs, so it is determined by the edge count.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let recon = recon_head(&mut store, "recon", 2, 2, &mut rng);
        let dec = EdgeDecoder::new(&mut store, "edge", 2, &mut rng);
        *store.get_mut(dec.w) = Matrix::zeros(2, 2);
        *store.get_mut(dec.b) = Matrix::scalar(0.7);
        let w = g0();
        let h = NodeEmbeddings {
            node_ids: vec![0, 1, 2],
            vectors: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]),
        };
        let l = pretrain_losses(&w, &h, &h, &recon, &dec, &store).unwrap();
        let z: f64 = 0.7;
        let pos = (1.0 + (-z).exp()).ln();
        let neg = (1.0 + z.exp()).ln();
        let expect = (3.0 * pos + 6.0 * neg) / 9.0;
        assert!((l.edge - expect).abs() < 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cfg = GnnConfig {
            layers: 1,
            heads: 2,
            ..GnnConfig::default()
        };
        let enc = GatEncoder::new(&mut store, "gnn", 6, 8, cfg, &mut rng).unwrap();
        let recon = recon_head(&mut store, "recon", 8, 6, &mut rng);
        let dec = EdgeDecoder::new(&mut store, "edge", 8, &mut rng);
        let p = HashingTextEmbedder::new(6);
        let w = g0();
        let h0: NodeEmbeddings<f64> = init_node_embeddings(&p, &w).unwrap();
        let loss = |s: &ParamStore<f64>| -> (f64, Vec<Option<Matrix<f64>>>) {
            let batch = GraphBatch::new(&[&w], false);
            let mut g = Graph::new(s);
            let x = g.constant(h0.vectors.clone());
            let hl = enc.forward(&mut g, x, &batch);
            let v = pretrain_objective(&mut g, &batch, &[&w], x, hl, &recon, &dec);
            (g.value(v.total).item(), g.param_grads(v.total))
        };
        let (_, grads) = loss(&store);
        let eps = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = grads[id.0].clone().expect("every parameter gets a gradient");
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + eps;
                let up = loss(&store).0;
                store.get_mut(id).data_mut()[k] = orig - eps;
                let down = loss(&store).0;
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.data()[k];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!((a - numeric).abs() / denom < 1e-4, "{} [{k}]: {a} vs {numeric}", store.name(id));
            }
        }
    }
}
