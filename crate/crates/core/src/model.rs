//! The complete surrogate: projectors, structural encoder, pretraining heads,
//! fusion and head, sharing one parameter store.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoders::{
    gnn_forward, init_node_embeddings, pool_mean, project, recon_head, EdgeDecoder, EmbeddingBundle, GatEncoder,
    GnnConfig, GraphBatch, SemanticEmbeddingProvider, TextEmbeddingProvider,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, predict_score, sigmoid, Fusion, FusionConfig, PredictionOutput, SEQ_LEN};
use crate::nn::{Graph, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::textualize::serialize_workflow;
use crate::workflow::{AgentWorkflow, LabeledDataset, TaskInstruction};

/// Which fusion inputs are live; a disabled branch enters as a zero token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_gnn: bool,
    pub use_llm: bool,
    pub use_task: bool,
    pub use_type_embeddings: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_gnn: true,
            use_llm: true,
            use_task: true,
            use_type_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    /// Text provider output size (tasks and node prompts).
    pub text_dim: usize,
    /// Semantic provider output size.
    pub sem_dim: usize,
    pub gnn: GnnConfig,
    pub fusion: FusionConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            text_dim: 384,
            sem_dim: 64,
            gnn: GnnConfig::default(),
            fusion: FusionConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

/// Provider outputs cached per workflow and task; providers stay frozen so
/// these never change during training.
#[derive(Clone, Debug, Default)]
pub struct FeatureSet<T> {
    pub workflows: BTreeMap<String, AgentWorkflow>,
    pub nodes: BTreeMap<String, Matrix<T>>,
    pub semantic: BTreeMap<String, Vec<T>>,
    pub tasks: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn new() -> Self {
        Self {
            workflows: BTreeMap::new(),
            nodes: BTreeMap::new(),
            semantic: BTreeMap::new(),
            tasks: BTreeMap::new(),
        }
    }

    pub fn from_dataset(
        ds: &LabeledDataset,
        text: &dyn TextEmbeddingProvider,
        sem: &dyn SemanticEmbeddingProvider,
    ) -> Result<Self> {
        let mut f = Self::new();
        for w in ds.workflows.values() {
            f.add_workflow(w, text, sem)?;
        }
        for t in ds.tasks.values() {
            f.add_task(t, text)?;
        }
        Ok(f)
    }

    pub fn add_workflow(
        &mut self,
        w: &AgentWorkflow,
        text: &dyn TextEmbeddingProvider,
        sem: &dyn SemanticEmbeddingProvider,
    ) -> Result<()> {
        if self.workflows.contains_key(&w.workflow_id) {
            return Ok(());
        }
        let h0 = init_node_embeddings::<T>(text, w)?;
        let s = serialize_workflow(w)?;
        let v = sem.embed_workflow(&s).map_err(|e| Error::Provider {
            provider: sem.name().to_string(),
            subject: format!("workflow {}", w.workflow_id),
            message: e.to_string(),
        })?;
        if v.len() != sem.base_dim() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Provider {
                provider: sem.name().to_string(),
                subject: format!("workflow {}", w.workflow_id),
                message: format!("bad vector of length {}", v.len()),
            });
        }
        self.nodes.insert(w.workflow_id.clone(), h0.vectors);
        self.semantic.insert(w.workflow_id.clone(), v.into_iter().map(T::c).collect());
        self.workflows.insert(w.workflow_id.clone(), w.clone());
        Ok(())
    }

    pub fn add_task(&mut self, t: &TaskInstruction, text: &dyn TextEmbeddingProvider) -> Result<()> {
        if self.tasks.contains_key(&t.task_id) {
            return Ok(());
        }
        let v = embed_task_text(text, t)?;
        self.tasks.insert(t.task_id.clone(), v.into_iter().map(T::c).collect());
        Ok(())
    }

    fn workflow(&self, id: &str) -> Result<&AgentWorkflow> {
        self.workflows
            .get(id)
            .ok_or_else(|| Error::MissingReference { kind: "workflow", id: id.into() })
    }
}

fn embed_task_text(text: &dyn TextEmbeddingProvider, t: &TaskInstruction) -> Result<Vec<f64>> {
    text.embed(&t.text).map_err(|e| Error::Provider {
        provider: text.name().to_string(),
        subject: format!("task {}", t.task_id),
        message: e.to_string(),
    })
}

/// Tape handles for one batched forward pass.
pub struct BatchVars {
    /// `B x 1` prediction logits, sample order.
    pub logits: Var,
    /// Rows indexed by `workflow_index`; `None` when the branch is disabled.
    pub r_gnn: Option<Var>,
    pub r_llm: Option<Var>,
    pub workflow_index: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct SurrogateModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub task_proj: Mlp,
    pub sem_proj: Mlp,
    pub gnn: GatEncoder,
    pub recon: Mlp,
    pub edge: EdgeDecoder,
    pub fusion: Fusion,
    pub head: Mlp,
}

impl<T: Scalar> SurrogateModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.d == 0 || config.text_dim == 0 || config.sem_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let task_proj = Mlp::new(&mut store, "task_proj", config.text_dim, d, d, &mut rng);
        let sem_proj = Mlp::new(&mut store, "sem_proj", config.sem_dim, d, d, &mut rng);
        let gnn = GatEncoder::new(&mut store, "gnn", config.text_dim, d, config.gnn, &mut rng)?;
        if gnn.out_dim != d {
            return Err(Error::Config("the structural encoder needs at least one layer".into()));
        }
        let recon = recon_head(&mut store, "recon", d, config.text_dim, &mut rng);
        let edge = EdgeDecoder::new(&mut store, "edge", d, &mut rng);
        let fusion = Fusion::new(&mut store, "fusion", d, config.fusion, &mut rng)?;
        let head = Mlp::new(&mut store, "head", d, d, 1, &mut rng);
        Ok(Self {
            config,
            store,
            task_proj,
            sem_proj,
            gnn,
            recon,
            edge,
            fusion,
            head,
        })
    }

    /// Mask for pretraining: structural encoder and its two heads.
    pub fn pretrain_mask(&self) -> Vec<bool> {
        self.mask_for(&["gnn", "recon", "edge"])
    }

    /// Mask for end-to-end training: everything except the pretraining heads.
    pub fn train_mask(&self) -> Vec<bool> {
        self.mask_for(&["task_proj", "sem_proj", "gnn", "fusion", "head"])
    }

    fn mask_for(&self, modules: &[&str]) -> Vec<bool> {
        self.store
            .ids()
            .map(|id| {
                let name = self.store.name(id);
                let module = name.split('.').next().unwrap_or("");
                modules.contains(&module)
            })
            .collect()
    }

    pub fn encode_task(&self, provider: &dyn TextEmbeddingProvider, task: &TaskInstruction) -> Result<Vec<T>> {
        let v = embed_task_text(provider, task)?;
        project(&v, &self.task_proj, &self.store)
    }

    pub fn encode_semantic(&self, provider: &dyn SemanticEmbeddingProvider, w: &AgentWorkflow) -> Result<Vec<T>> {
        let s = serialize_workflow(w)?;
        let v = provider.embed_workflow(&s).map_err(|e| Error::Provider {
            provider: provider.name().to_string(),
            subject: format!("workflow {}", w.workflow_id),
            message: e.to_string(),
        })?;
        project(&v, &self.sem_proj, &self.store)
    }

    pub fn encode_structure(&self, provider: &dyn TextEmbeddingProvider, w: &AgentWorkflow) -> Result<Vec<T>> {
        let h0 = init_node_embeddings(provider, w)?;
        let hl = gnn_forward(&h0, w, &self.gnn, &self.store)?;
        pool_mean(&hl)
    }

    pub fn bundle(
        &self,
        text: &dyn TextEmbeddingProvider,
        sem: &dyn SemanticEmbeddingProvider,
        w: &AgentWorkflow,
        task: &TaskInstruction,
    ) -> Result<EmbeddingBundle<T>> {
        Ok(EmbeddingBundle {
            r_task: self.encode_task(text, task)?,
            r_gnn: self.encode_structure(text, w)?,
            r_llm: self.encode_semantic(sem, w)?,
        })
    }

    pub fn fuse(&self, bundle: &EmbeddingBundle<T>) -> Result<Vec<T>> {
        let a = self.config.ablation;
        fuse(
            bundle,
            &self.fusion,
            &self.store,
            [a.use_llm, a.use_gnn, a.use_task],
            a.use_type_embeddings,
        )
    }

    pub fn predict_score(&self, z_pred: &[T]) -> Result<PredictionOutput<T>> {
        predict_score(z_pred, &self.head, &self.store)
    }

    /// Single-sample path through every branch.
    pub fn forward(
        &self,
        text: &dyn TextEmbeddingProvider,
        sem: &dyn SemanticEmbeddingProvider,
        w: &AgentWorkflow,
        task: &TaskInstruction,
    ) -> Result<PredictionOutput<T>> {
        let b = self.bundle(text, sem, w, task)?;
        let z = self.fuse(&b)?;
        self.predict_score(&z)
    }

    /// Batched forward on a tape. Each distinct workflow and task is encoded
    /// once; `extra_workflows` are encoded too (for contrastive terms) even if
    /// no sample refers to them.
    pub fn forward_batch(
        &self,
        g: &mut Graph<'_, T>,
        feats: &FeatureSet<T>,
        samples: &[(&str, &str)],
        extra_workflows: &[&str],
    ) -> Result<BatchVars> {
        let a = self.config.ablation;
        let mut workflow_index: HashMap<String, usize> = HashMap::new();
        let mut wids: Vec<&str> = Vec::new();
        for &id in samples.iter().map(|(w, _)| w).chain(extra_workflows) {
            if !workflow_index.contains_key(id) {
                workflow_index.insert(id.to_string(), wids.len());
                wids.push(id);
            }
        }
        let mut task_index: HashMap<&str, usize> = HashMap::new();
        let mut tids: Vec<&str> = Vec::new();
        for &(_, t) in samples {
            if !task_index.contains_key(t) {
                task_index.insert(t, tids.len());
                tids.push(t);
            }
        }
        let d = self.config.d;
        let u = wids.len();

        let r_gnn = if a.use_gnn && u > 0 {
            let ws: Vec<&AgentWorkflow> = wids.iter().map(|id| feats.workflow(id)).collect::<Result<_>>()?;
            let mut data = Vec::new();
            for id in &wids {
                data.extend_from_slice(feats.nodes[*id].data());
            }
            let batch = GraphBatch::new(&ws, self.gnn.config.add_reverse_edges);
            let x = g.constant(Matrix::from_vec(batch.n_nodes, self.config.text_dim, data));
            let h = self.gnn.forward(g, x, &batch);
            Some(g.tape.segment_mean(h, batch.graph_of_node.clone(), batch.n_graphs))
        } else {
            None
        };
        let r_llm = if a.use_llm && u > 0 {
            let mut data = Vec::new();
            for id in &wids {
                let v = feats
                    .semantic
                    .get(*id)
                    .ok_or_else(|| Error::MissingReference { kind: "workflow", id: id.to_string() })?;
                data.extend_from_slice(v);
            }
            let x = g.constant(Matrix::from_vec(u, self.config.sem_dim, data));
            Some(self.sem_proj.forward(g, x))
        } else {
            None
        };
        if samples.is_empty() {
            let logits = g.constant(Matrix::zeros(0, 1));
            return Ok(BatchVars {
                logits,
                r_gnn,
                r_llm,
                workflow_index,
            });
        }
        let r_task = if a.use_task {
            let mut data = Vec::new();
            for t in &tids {
                let v = feats
                    .tasks
                    .get(*t)
                    .ok_or_else(|| Error::MissingReference { kind: "task", id: t.to_string() })?;
                data.extend_from_slice(v);
            }
            let x = g.constant(Matrix::from_vec(tids.len(), self.config.text_dim, data));
            Some(self.task_proj.forward(g, x))
        } else {
            None
        };

        // Token table: [pred; llm rows; gnn rows; task rows; zero row].
        let mut parts = vec![g.p(self.fusion.pred_token)];
        let mut offset = 1;
        let mut place = |v: Option<Var>, n: usize, parts: &mut Vec<Var>| -> Option<usize> {
            v.map(|v| {
                parts.push(v);
                let at = offset;
                offset += n;
                at
            })
        };
        let llm_at = place(r_llm, u, &mut parts);
        let gnn_at = place(r_gnn, u, &mut parts);
        let task_at = place(r_task, tids.len(), &mut parts);
        let zero_row = offset;
        parts.push(g.constant(Matrix::zeros(1, d)));
        let table = g.tape.concat_rows(&parts);
        let mut idx = Vec::with_capacity(samples.len() * SEQ_LEN);
        for &(w, t) in samples {
            let wi = workflow_index[w];
            idx.push(0);
            idx.push(llm_at.map_or(zero_row, |o| o + wi));
            idx.push(gnn_at.map_or(zero_row, |o| o + wi));
            idx.push(task_at.map_or(zero_row, |o| o + task_index[t]));
        }
        let tokens = g.tape.gather_rows(table, idx);
        let z = self.fusion.forward(g, tokens, a.use_type_embeddings);
        let logits = self.head.forward(g, z);
        Ok(BatchVars {
            logits,
            r_gnn,
            r_llm,
            workflow_index,
        })
    }

    /// Scores for many samples, evaluated in chunks.
    pub fn predict(&self, feats: &FeatureSet<T>, samples: &[(&str, &str)], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let mut g = Graph::new(&self.store);
            let v = self.forward_batch(&mut g, feats, part, &[])?;
            out.extend(g.value(v.logits).data().iter().map(|&z| sigmoid(z).f64()));
        }
        Ok(out)
    }

    /// Branch representations (R^GNN, R^LLM) per workflow, for diagnostics.
    pub fn representations(
        &self,
        feats: &FeatureSet<T>,
        workflow_ids: &[&str],
    ) -> Result<(BTreeMap<String, Vec<f64>>, BTreeMap<String, Vec<f64>>)> {
        let mut g = Graph::new(&self.store);
        let v = self.forward_batch(&mut g, feats, &[], workflow_ids)?;
        let collect = |var: Option<Var>| -> BTreeMap<String, Vec<f64>> {
            let mut m = BTreeMap::new();
            if let Some(var) = var {
                let val = g.value(var);
                for (id, &i) in &v.workflow_index {
                    m.insert(id.clone(), val.row(i).iter().map(|x| x.f64()).collect());
                }
            }
            m
        };
        Ok((collect(v.r_gnn), collect(v.r_llm)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{HashingTextEmbedder, StructFeatureProvider};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 8,
            text_dim: 12,
            sem_dim: 10,
            gnn: GnnConfig {
                layers: 1,
                heads: 2,
                ..GnnConfig::default()
            },
            fusion: FusionConfig {
                layers: 1,
                heads: 2,
                ..FusionConfig::default()
            },
            ablation: Ablation::default(),
        }
    }

    fn data() -> (Vec<AgentWorkflow>, Vec<TaskInstruction>) {
        let ws = vec![
            AgentWorkflow::from_parts(
                "G0",
                &[(0, "Generate code"), (1, "Review code"), (2, "Merge results")],
                &[(0, 1), (0, 2), (1, 2)],
            ),
            AgentWorkflow::from_parts("G1", &[(0, "Plan steps"), (1, "Test code")], &[(0, 1)]),
        ];
        let ts = vec![
            TaskInstruction {
                task_id: "t0".into(),
                text: "Write a sorting function".into(),
            },
            TaskInstruction {
                task_id: "t1".into(),
                text: "Summarise an article".into(),
            },
        ];
        (ws, ts)
    }

    #[test]
    fn batched_and_single_paths_agree() {
        let text = HashingTextEmbedder::new(12);
        let sem = StructFeatureProvider::new(10);
        let m = SurrogateModel::<f64>::new(tiny(), 4).unwrap();
        let (ws, ts) = data();
        let mut feats = FeatureSet::new();
        for w in &ws {
            feats.add_workflow(w, &text, &sem).unwrap();
        }
        for t in &ts {
            feats.add_task(t, &text).unwrap();
        }
        let samples = [("G0", "t0"), ("G1", "t0"), ("G0", "t1"), ("G1", "t1")];
        let batched = m.predict(&feats, &samples, 3).unwrap();
        assert_eq!(batched.len(), 4);
        for (k, &(w, t)) in samples.iter().enumerate() {
            let w = ws.iter().find(|x| x.workflow_id == w).unwrap();
            let t = ts.iter().find(|x| x.task_id == t).unwrap();
            let single = m.forward(&text, &sem, w, t).unwrap();
            assert!((single.score - batched[k]).abs() < 1e-12);
            assert_eq!(single.score, m.forward(&text, &sem, w, t).unwrap().score);
        }
    }

    #[test]
    fn ablation_zeroes_the_token_but_keeps_four_positions() {
        let text = HashingTextEmbedder::new(12);
        let sem = StructFeatureProvider::new(10);
        let mut cfg = tiny();
        cfg.ablation.use_gnn = false;
        let m = SurrogateModel::<f64>::new(cfg, 4).unwrap();
        let (ws, ts) = data();
        let mut feats = FeatureSet::new();
        for w in &ws {
            feats.add_workflow(w, &text, &sem).unwrap();
        }
        feats.add_task(&ts[0], &text).unwrap();
        let batched = m.predict(&feats, &[("G0", "t0")], 8).unwrap();
        let single = m.forward(&text, &sem, &ws[0], &ts[0]).unwrap();
        assert!((single.score - batched[0]).abs() < 1e-12);
    }

    #[test]
    fn f32_model_runs() {
        let text = HashingTextEmbedder::new(12);
        let sem = StructFeatureProvider::new(10);
        let m = SurrogateModel::<f32>::new(tiny(), 4).unwrap();
        let (ws, ts) = data();
        let s = m.forward(&text, &sem, &ws[0], &ts[0]).unwrap().score;
        assert!(s > 0.0 && s < 1.0);
    }
}
