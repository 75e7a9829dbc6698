//! Pretraining of the structural encoder and end-to-end surrogate training
//! with the prediction and triplet objectives.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoders::{pretrain_objective, GnnConfig, GraphBatch};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{Ablation, FeatureSet, ModelConfig, SurrogateModel};
use crate::nn::{AdamW, AdamWConfig, Graph, ParamStore};
use crate::scalar::Scalar;
use crate::seeding::derive_seed;
use crate::tensor::Matrix;
use crate::workflow::{AgentWorkflow, Corpus, LabeledDataset};

/// Cosine distance guard added to vector norms during training.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub text_dim: usize,
    pub sem_dim: usize,
    pub gnn_layers: usize,
    pub gnn_heads: usize,
    pub add_reverse_edges: bool,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub alpha: f64,
    /// Optional weight on positive samples in the prediction loss.
    pub pos_weight: Option<f64>,
    pub pretrain_steps: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_workflows: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 256,
            text_dim: 384,
            sem_dim: 64,
            gnn_layers: 2,
            gnn_heads: 4,
            add_reverse_edges: false,
            fusion_layers: 2,
            fusion_heads: 4,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 512,
            max_epochs: 200,
            patience: 30,
            lambda: 1.0,
            alpha: 0.2,
            pos_weight: None,
            pretrain_steps: 200,
            pretrain_learning_rate: 1e-3,
            pretrain_batch_workflows: 64,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0 (got {})", self.lambda));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0 (got {})", self.alpha));
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 || self.pretrain_batch_workflows == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.learning_rate <= 0.0 || self.pretrain_learning_rate <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.gnn_layers == 0 {
            return bad("gnn_layers must be at least 1".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            text_dim: self.text_dim,
            sem_dim: self.sem_dim,
            gnn: GnnConfig {
                layers: self.gnn_layers,
                heads: self.gnn_heads,
                add_reverse_edges: self.add_reverse_edges,
                ..GnnConfig::default()
            },
            fusion: FusionConfig {
                layers: self.fusion_layers,
                heads: self.fusion_heads,
                ..FusionConfig::default()
            },
            ablation: self.ablation,
        }
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Mean binary cross-entropy of probabilities against 0/1 labels.
pub fn bce_prediction_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "need equal, non-empty score and label lists (got {} and {})",
            scores.len(),
            labels.len()
        )));
    }
    let s: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    Ok(s / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub task_id: String,
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// One (positive, negative) draw per successful anchor on `task_id`.
pub fn build_triplets(ds: &LabeledDataset, task_id: &str, seed: u64) -> Vec<Triplet> {
    let mut pos = BTreeSet::new();
    let mut neg = BTreeSet::new();
    for s in ds.samples.iter().filter(|s| s.task_id == task_id) {
        if s.label == 1 {
            pos.insert(s.workflow_id.as_str());
        } else {
            neg.insert(s.workflow_id.as_str());
        }
    }
    if pos.len() < 2 || neg.is_empty() {
        return Vec::new();
    }
    let pos: Vec<&str> = pos.into_iter().collect();
    let neg: Vec<&str> = neg.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, task_id));
    pos.iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut j = rng.gen_range(0..pos.len() - 1);
            if j >= i {
                j += 1;
            }
            Triplet {
                task_id: task_id.to_string(),
                anchor: a.to_string(),
                positive: pos[j].to_string(),
                negative: neg[rng.gen_range(0..neg.len())].to_string(),
            }
        })
        .collect()
}

/// Triplets for every task of `ds`, in task order.
pub fn build_all_triplets(ds: &LabeledDataset, seed: u64) -> Vec<Triplet> {
    ds.tasks.keys().flat_map(|t| build_triplets(ds, t, seed)).collect()
}

/// `1 - <a,b> / (|a| |b|)`; zero vectors are rejected.
pub fn cos_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!("vector lengths {} and {} differ", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NumericGuard("cosine distance of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

pub fn triplet_contrastive_loss(
    triplets: &[Triplet],
    reps: &BTreeMap<String, Vec<f64>>,
    alpha: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let get = |id: &str| {
        reps.get(id)
            .ok_or_else(|| Error::MissingReference { kind: "representation", id: id.into() })
    };
    let mut s = 0.0;
    for t in triplets {
        let a = get(&t.anchor)?;
        let dp = cos_dist(a, get(&t.positive)?)?;
        let dn = cos_dist(a, get(&t.negative)?)?;
        s += (dp - dn + alpha).max(0.0);
    }
    Ok(s / triplets.len() as f64)
}

pub fn total_loss(l_pred: f64, l_con_gnn: f64, l_con_llm: f64, lambda: f64) -> f64 {
    l_pred + lambda / 2.0 * (l_con_gnn + l_con_llm)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Full-set objective before the first step and after every step.
    pub loss_curve: Vec<f64>,
    pub initial: f64,
    pub last: f64,
    pub steps: usize,
}

fn pretrain_full_loss<T: Scalar>(model: &SurrogateModel<T>, feats: &FeatureSet<T>, ws: &[&AgentWorkflow]) -> Result<T> {
    let mut g = Graph::new(&model.store);
    let v = pretrain_pass(model, &mut g, feats, ws)?;
    Ok(g.value(v).item())
}

fn pretrain_pass<T: Scalar>(
    model: &SurrogateModel<T>,
    g: &mut Graph<'_, T>,
    feats: &FeatureSet<T>,
    ws: &[&AgentWorkflow],
) -> Result<Var> {
    let mut data = Vec::new();
    for w in ws {
        let x = feats
            .nodes
            .get(&w.workflow_id)
            .ok_or_else(|| Error::MissingReference { kind: "workflow", id: w.workflow_id.clone() })?;
        data.extend_from_slice(x.data());
    }
    let batch = GraphBatch::new(ws, model.gnn.config.add_reverse_edges);
    let x = g.constant(Matrix::from_vec(batch.n_nodes, model.config.text_dim, data));
    let h = model.gnn.forward(g, x, &batch);
    Ok(pretrain_objective(g, &batch, ws, x, h, &model.recon, &model.edge).total)
}

/// Self-supervised pretraining of the structural encoder on `workflow_ids`.
///
/// Node inputs stay fixed; only the encoder and its two heads move. On a
/// non-finite loss the last finite parameters are restored and an error is
/// returned.
pub fn pretrain_gnn<T: Scalar>(
    model: &mut SurrogateModel<T>,
    feats: &FeatureSet<T>,
    workflow_ids: &[String],
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let ws: Vec<&AgentWorkflow> = workflow_ids
        .iter()
        .map(|id| {
            feats
                .workflows
                .get(id)
                .ok_or_else(|| Error::MissingReference { kind: "workflow", id: id.clone() })
        })
        .collect::<Result<_>>()?;
    if ws.is_empty() {
        return Err(Error::Precondition("no workflows to pretrain on".into()));
    }
    let mask = model.pretrain_mask();
    let mut opt = AdamW::new(&model.store, cfg.adamw(cfg.pretrain_learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain"));
    let mut order: Vec<usize> = (0..ws.len()).collect();
    let mut cursor = order.len();
    let initial = pretrain_full_loss(model, feats, &ws)?.f64();
    let mut curve = vec![initial];
    let mut last_good: ParamStore<T> = model.store.clone();
    for step in 0..cfg.pretrain_steps {
        let take = cfg.pretrain_batch_workflows.min(ws.len());
        if cursor + take > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&AgentWorkflow> = order[cursor..cursor + take].iter().map(|&i| ws[i]).collect();
        cursor += take;
        let grads = {
            let mut g = Graph::new(&model.store).with_trainable(&mask);
            let loss = pretrain_pass(model, &mut g, feats, &batch)?;
            if !g.value(loss).item().is_finite() {
                model.store = last_good;
                return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
            }
            g.param_grads(loss)
        };
        opt.step(&mut model.store, &grads);
        let full = pretrain_full_loss(model, feats, &ws)?.f64();
        if !full.is_finite() {
            model.store = last_good;
            return Err(Error::NonFinite(format!("pretraining loss after step {step}")));
        }
        last_good = model.store.clone();
        curve.push(full);
    }
    Ok(PretrainReport {
        initial,
        last: *curve.last().expect("curve has the initial point"),
        steps: cfg.pretrain_steps,
        loss_curve: curve,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

/// Early stopping on a score where larger is better; ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Record the next epoch's score; returns (improved, should_stop).
    pub fn observe(&mut self, score: f64) -> (bool, bool) {
        self.epoch += 1;
        let improved = self.best.map_or(true, |b| score > b);
        if improved {
            self.best = Some(score);
            self.best_epoch = self.epoch;
        }
        (improved, self.epoch - self.best_epoch >= self.patience)
    }

    /// 1-based epoch of the best score so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_con_gnn: f64,
    pub l_con_llm: f64,
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainingHistory {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("record serialises"));
            out.push('\n');
        }
        out
    }
}

/// Fraction of samples whose thresholded score matches the label.
pub fn binary_accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= 0.5) as u8 == y)
        .count();
    hits as f64 / scores.len() as f64
}

pub const EVAL_CHUNK: usize = 1024;

fn dataset_accuracy<T: Scalar>(model: &SurrogateModel<T>, feats: &FeatureSet<T>, ds: &LabeledDataset) -> Result<f64> {
    let pairs: Vec<(&str, &str)> = ds
        .samples
        .iter()
        .map(|s| (s.workflow_id.as_str(), s.task_id.as_str()))
        .collect();
    let labels: Vec<u8> = ds.samples.iter().map(|s| s.label).collect();
    let scores = model.predict(feats, &pairs, EVAL_CHUNK)?;
    Ok(binary_accuracy(&scores, &labels))
}

fn hinge<T: Scalar>(g: &mut Graph<'_, T>, reps: Var, idx: &[[usize; 3]], alpha: f64) -> Var {
    let a = g.tape.gather_rows(reps, idx.iter().map(|t| t[0]).collect());
    let p = g.tape.gather_rows(reps, idx.iter().map(|t| t[1]).collect());
    let n = g.tape.gather_rows(reps, idx.iter().map(|t| t[2]).collect());
    let eps = T::c(NORM_EPS);
    let dp = g.tape.row_cos_dist(a, p, eps);
    let dn = g.tape.row_cos_dist(a, n, eps);
    let diff = g.tape.sub(dp, dn);
    let shifted = g.tape.add_const(diff, T::c(alpha));
    let h = g.tape.relu(shifted);
    g.tape.mean_all(h)
}

/// End-to-end training on `train` with early stopping on `validation`.
///
/// The best-validation parameters are restored into `model` on return.
pub fn train<T: Scalar>(
    model: &mut SurrogateModel<T>,
    feats: &FeatureSet<T>,
    train: &LabeledDataset,
    validation: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    if train.samples.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    let eval_set = if validation.samples.is_empty() {
        log::warn!("validation split is empty; early stopping uses training accuracy");
        train
    } else {
        validation
    };
    let mask = model.train_mask();
    let mut opt = AdamW::new(&model.store, cfg.adamw(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train"));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let use_con = cfg.lambda > 0.0;
    let mut order: Vec<usize> = (0..train.samples.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let n_batches = order.len().div_ceil(cfg.batch_size);
        let mut triplets = if use_con {
            build_all_triplets(train, derive_seed(cfg.seed, &format!("triplets/{epoch}")))
        } else {
            Vec::new()
        };
        triplets.shuffle(&mut rng);
        let (mut s_pred, mut s_gnn, mut s_llm, mut s_tot) = (0.0, 0.0, 0.0, 0.0);
        for b in 0..n_batches {
            let chunk = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let samples: Vec<(&str, &str)> = chunk
                .iter()
                .map(|&i| (train.samples[i].workflow_id.as_str(), train.samples[i].task_id.as_str()))
                .collect();
            let tri = &triplets[b * triplets.len() / n_batches..(b + 1) * triplets.len() / n_batches];
            let extra: Vec<&str> = tri
                .iter()
                .flat_map(|t| [t.anchor.as_str(), t.positive.as_str(), t.negative.as_str()])
                .collect();
            let grads = {
                let mut g = Graph::new(&model.store).with_trainable(&mask);
                let v = model.forward_batch(&mut g, feats, &samples, &extra)?;
                let inv = 1.0 / samples.len() as f64;
                let targets: Vec<T> = chunk.iter().map(|&i| T::c(train.samples[i].label as f64)).collect();
                let weights: Vec<T> = chunk
                    .iter()
                    .map(|&i| {
                        let w = if train.samples[i].label == 1 { cfg.pos_weight.unwrap_or(1.0) } else { 1.0 };
                        T::c(w * inv)
                    })
                    .collect();
                let l_pred = g.tape.bce_with_logits(v.logits, targets, weights);
                let idx: Vec<[usize; 3]> = tri
                    .iter()
                    .map(|t| {
                        [
                            v.workflow_index[&t.anchor],
                            v.workflow_index[&t.positive],
                            v.workflow_index[&t.negative],
                        ]
                    })
                    .collect();
                let mut total = l_pred;
                let mut con = [0.0, 0.0];
                if use_con && !idx.is_empty() {
                    let mut parts = Vec::new();
                    for (k, reps) in [v.r_gnn, v.r_llm].into_iter().enumerate() {
                        if let Some(reps) = reps {
                            let h = hinge(&mut g, reps, &idx, cfg.alpha);
                            con[k] = g.value(h).item().f64();
                            parts.push(h);
                        }
                    }
                    for h in parts {
                        let scaled = g.tape.scale(h, T::c(cfg.lambda / 2.0));
                        total = g.tape.add(total, scaled);
                    }
                }
                let lp = g.value(l_pred).item().f64();
                let lt = g.value(total).item().f64();
                if !lt.is_finite() {
                    model.store = best_store;
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, batch {b} (prediction {lp}, contrastive {:?})",
                        con
                    )));
                }
                s_pred += lp;
                s_gnn += con[0];
                s_llm += con[1];
                s_tot += lt;
                g.param_grads(total)
            };
            opt.step(&mut model.store, &grads);
        }
        let nb = n_batches as f64;
        let val_accuracy = dataset_accuracy(model, feats, eval_set)?;
        epochs.push(EpochRecord {
            epoch,
            l_pred: s_pred / nb,
            l_con_gnn: s_gnn / nb,
            l_con_llm: s_llm / nb,
            loss: s_tot / nb,
            val_accuracy,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} (pred {:.4}) val acc {:.4}",
            s_tot / nb,
            s_pred / nb,
            val_accuracy
        );
        let (improved, stop) = stopper.observe(val_accuracy);
        if improved {
            best_store = model.store.clone();
        }
        if stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    model.store = best_store;
    Ok(TrainingHistory {
        epochs,
        best_epoch: stopper.best_epoch(),
        stop_reason,
    })
}

/// A freshly initialised model after pretraining and training.
pub struct FitRun<T> {
    pub model: SurrogateModel<T>,
    pub pretrain: PretrainReport,
    pub history: TrainingHistory,
}

/// Workflows referenced by the samples of `ds`, in id order.
pub fn referenced_workflows(ds: &LabeledDataset) -> Vec<String> {
    let ids: BTreeSet<&str> = ds.samples.iter().map(|s| s.workflow_id.as_str()).collect();
    ids.into_iter().map(String::from).collect()
}

/// Initialise from `cfg.seed`, pretrain on the training workflows (skipped
/// when the structural branch is off or no steps are configured), then train.
pub fn fit<T: Scalar>(feats: &FeatureSet<T>, corpus: &Corpus, cfg: &TrainConfig) -> Result<FitRun<T>> {
    cfg.validate()?;
    let mut model = SurrogateModel::new(cfg.model_config(), cfg.seed)?;
    let pretrain = if cfg.ablation.use_gnn && cfg.pretrain_steps > 0 {
        pretrain_gnn(&mut model, feats, &referenced_workflows(&corpus.train), cfg)?
    } else {
        PretrainReport::default()
    };
    let history = train(&mut model, feats, &corpus.train, &corpus.validation, cfg)?;
    Ok(FitRun {
        model,
        pretrain,
        history,
    })
}

/// Mean anchor-positive and anchor-negative cosine distances of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceGap {
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub triplets: usize,
}

impl DistanceGap {
    pub fn gap(&self) -> f64 {
        self.mean_negative - self.mean_positive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveDiagnostics {
    pub gnn: Option<DistanceGap>,
    pub llm: Option<DistanceGap>,
}

/// Distances on triplets drawn once (fixed seed) from `ds`.
pub fn contrastive_diagnostics<T: Scalar>(
    model: &SurrogateModel<T>,
    feats: &FeatureSet<T>,
    ds: &LabeledDataset,
    seed: u64,
) -> Result<ContrastiveDiagnostics> {
    let triplets = build_all_triplets(ds, seed);
    let ids: BTreeSet<&str> = triplets
        .iter()
        .flat_map(|t| [t.anchor.as_str(), t.positive.as_str(), t.negative.as_str()])
        .collect();
    let ids: Vec<&str> = ids.into_iter().collect();
    let (gnn, llm) = model.representations(feats, &ids)?;
    let gap = |reps: &BTreeMap<String, Vec<f64>>| -> Result<Option<DistanceGap>> {
        if reps.is_empty() || triplets.is_empty() {
            return Ok(None);
        }
        let (mut p, mut n) = (0.0, 0.0);
        for t in &triplets {
            p += cos_dist(&reps[&t.anchor], &reps[&t.positive])?;
            n += cos_dist(&reps[&t.anchor], &reps[&t.negative])?;
        }
        let k = triplets.len() as f64;
        Ok(Some(DistanceGap {
            mean_positive: p / k,
            mean_negative: n / k,
            triplets: triplets.len(),
        }))
    };
    Ok(ContrastiveDiagnostics {
        gnn: gap(&gnn)?,
        llm: gap(&llm)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::{LabeledSample, Split, TaskInstruction};

    fn ds(labels: &[(&str, u8)]) -> LabeledDataset {
        let ws: Vec<AgentWorkflow> = labels
            .iter()
            .map(|(id, _)| AgentWorkflow::from_parts(*id, &[(0, "a")], &[]))
            .collect();
        let samples = labels
            .iter()
            .map(|(id, y)| LabeledSample {
                workflow_id: id.to_string(),
                task_id: "t".into(),
                label: *y,
            })
            .collect();
        let tasks = [TaskInstruction {
            task_id: "t".into(),
            text: "task".into(),
        }];
        LabeledDataset::new(ws, tasks, samples, Split::Train).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((bce_prediction_loss(&[0.5], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let v = bce_prediction_loss(&[0.9, 0.1], &[1, 0]).unwrap();
        assert!((v - 0.1054).abs() < 1e-4);
        assert!(bce_prediction_loss(&[1.0 - 1e-12], &[1]).unwrap() < 1e-11);
        assert!(matches!(bce_prediction_loss(&[], &[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn forced_triplets() {
        let d = ds(&[("A", 1), ("B", 1), ("C", 0)]);
        let t = build_triplets(&d, "t", 7);
        let got: Vec<_> = t
            .iter()
            .map(|t| (t.anchor.as_str(), t.positive.as_str(), t.negative.as_str()))
            .collect();
        assert_eq!(got, vec![("A", "B", "C"), ("B", "A", "C")]);
        assert!(build_triplets(&ds(&[("A", 1), ("C", 0)]), "t", 7).is_empty());
        assert!(build_triplets(&ds(&[("A", 1), ("B", 1)]), "t", 7).is_empty());
    }

    #[test]
    fn triplet_anchor_restriction_and_determinism() {
        let labels: Vec<(String, u8)> = (0..60).map(|i| (format!("w{i:02}"), (i % 3 != 0) as u8)).collect();
        let refs: Vec<(&str, u8)> = labels.iter().map(|(s, y)| (s.as_str(), *y)).collect();
        let d = ds(&refs);
        let label = |id: &str| d.samples.iter().find(|s| s.workflow_id == id).unwrap().label;
        let mut n = 0;
        for seed in 0..30 {
            let t = build_triplets(&d, "t", seed);
            assert_eq!(t, build_triplets(&d, "t", seed));
            for tr in &t {
                assert_eq!(label(&tr.anchor), 1);
                assert_eq!(label(&tr.positive), 1);
                assert_eq!(label(&tr.negative), 0);
                assert_ne!(tr.anchor, tr.positive);
                n += 1;
            }
        }
        assert!(n >= 1000);
    }

    fn reps(v: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        v.iter().map(|(k, x)| (k.to_string(), x.clone())).collect()
    }

    fn unit_at(angle_dist: f64) -> Vec<f64> {
        // Unit vector whose cosine distance to e1 is `angle_dist`.
        let c = 1.0 - angle_dist;
        vec![c, (1.0 - c * c).max(0.0).sqrt()]
    }

    fn tri() -> Vec<Triplet> {
        vec![Triplet {
            task_id: "t".into(),
            anchor: "a".into(),
            positive: "p".into(),
            negative: "n".into(),
        }]
    }

    #[test]
    fn triplet_loss_examples() {
        let r = reps(&[("a", vec![1.0, 0.0]), ("p", unit_at(0.1)), ("n", unit_at(0.9))]);
        assert_eq!(triplet_contrastive_loss(&tri(), &r, 0.2).unwrap(), 0.0);
        let r = reps(&[("a", vec![1.0, 0.0]), ("p", unit_at(0.6)), ("n", unit_at(0.5))]);
        assert!((triplet_contrastive_loss(&tri(), &r, 0.2).unwrap() - 0.3).abs() < 1e-12);
        let r = reps(&[("a", vec![1.0, 0.0]), ("p", vec![1.0, 0.0]), ("n", vec![0.0, 1.0])]);
        assert_eq!(triplet_contrastive_loss(&tri(), &r, 0.2).unwrap(), 0.0);
        let r = reps(&[("a", vec![0.0, 0.0]), ("p", vec![1.0, 0.0]), ("n", vec![0.0, 1.0])]);
        assert!(matches!(triplet_contrastive_loss(&tri(), &r, 0.2), Err(Error::NumericGuard(_))));
    }

    #[test]
    fn triplet_loss_is_monotone_in_positive_distance() {
        let mut prev = -1.0;
        for k in 0..=20 {
            let dp = k as f64 / 10.0;
            let r = reps(&[("a", vec![1.0, 0.0]), ("p", unit_at(dp.min(1.0))), ("n", unit_at(0.5))]);
            let l = triplet_contrastive_loss(&tri(), &r, 0.2).unwrap();
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, 0.3, 0.9, 0.0), 0.5);
        assert!((total_loss(0.5, 0.2, 0.2, 1.0) - 0.7).abs() < 1e-15);
        let c1 = total_loss(0.5, 0.2, 0.4, 1.0) - 0.5;
        let c2 = total_loss(0.5, 0.2, 0.4, 2.0) - 0.5;
        assert!((c2 - 2.0 * c1).abs() < 1e-15);
    }

    #[test]
    fn patience_rule() {
        let mut accs = vec![0.6, 0.7];
        accs.extend(std::iter::repeat(0.7).take(40));
        let mut es = EarlyStopping::new(30);
        let mut stopped_at = None;
        for (i, &a) in accs.iter().enumerate() {
            if es.observe(a).1 {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(32));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn config_validation_and_toml() {
        let c = TrainConfig::default();
        assert_eq!(c.d, 256);
        assert_eq!(c.batch_size, 512);
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_toml("lambda = -1.0").is_err());
        assert!(TrainConfig::from_toml("patience = 300").is_err());
        assert!(TrainConfig::from_toml("nonsense_key = 1").is_err());
        let c = TrainConfig::from_toml("d = 32\nlambda = 0.5").unwrap();
        assert_eq!((c.d, c.lambda, c.alpha), (32, 0.5, 0.2));
    }
}
