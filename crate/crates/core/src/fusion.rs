//! Four-token transformer fusion (prediction, semantic, structural, task)
//! and the scoring head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoders::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Rows of the type-embedding table, in order.
pub const TOKEN_TYPES: [&str; 4] = ["pred", "llm", "gnn", "task"];
pub const SEQ_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ln_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, d, T::one())),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, d)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, eps: T) -> Var {
        let n = g.tape.layer_norm(x, eps);
        let gain = g.p(self.gain);
        let bias = g.p(self.bias);
        let y = g.tape.mul_row(n, gain);
        g.tape.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNormParams,
}

/// Prediction token, type embeddings and the post-norm encoder stack.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub pred_token: ParamId,
    pub type_embeddings: ParamId,
    layers: Vec<EncoderLayer>,
    pub d: usize,
    pub config: FusionConfig,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        config: FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!(
                "fusion width {d} is not divisible by {} heads",
                config.heads
            )));
        }
        let pred_token = store.add(format!("{name}.pred_token"), Matrix::normal(1, d, 0.1, rng));
        let type_embeddings = store.add(format!("{name}.type_embeddings"), Matrix::normal(SEQ_LEN, d, 0.1, rng));
        let ff = d * config.ffn_mult;
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.l{l}");
                EncoderLayer {
                    q: Linear::new(store, &format!("{p}.q"), d, d, rng),
                    k: Linear::new(store, &format!("{p}.k"), d, d, rng),
                    v: Linear::new(store, &format!("{p}.v"), d, d, rng),
                    o: Linear::new(store, &format!("{p}.o"), d, d, rng),
                    norm1: LayerNormParams::new(store, &format!("{p}.norm1"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, ff, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), ff, d, rng),
                    norm2: LayerNormParams::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Ok(Self {
            pred_token,
            type_embeddings,
            layers,
            d,
            config,
        })
    }

    /// `tokens` holds `B` consecutive blocks of [pred, llm, gnn, task] rows;
    /// returns the `B x d` final prediction-token states.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, use_type_embeddings: bool) -> Var {
        let (rows, _) = g.tape.shape(tokens);
        let b = rows / SEQ_LEN;
        let mut z = tokens;
        if use_type_embeddings {
            let table = g.p(self.type_embeddings);
            let idx = (0..rows).map(|r| r % SEQ_LEN).collect();
            let te = g.tape.gather_rows(table, idx);
            z = g.tape.add(z, te);
        }
        let heads = self.config.heads;
        let scale = T::c(1.0 / ((self.d / heads) as f64).sqrt());
        let eps = T::c(self.config.ln_eps);
        for layer in &self.layers {
            let q = layer.q.forward(g, z);
            let k = layer.k.forward(g, z);
            let v = layer.v.forward(g, z);
            let s = g.tape.block_qk(q, k, SEQ_LEN, heads, scale);
            let p = g.tape.softmax_groups(s, SEQ_LEN);
            let a = g.tape.block_av(p, v, SEQ_LEN, heads);
            let a = layer.o.forward(g, a);
            let r = g.tape.add(z, a);
            z = layer.norm1.forward(g, r, eps);
            let f = layer.ff1.forward(g, z);
            let f = g.tape.gelu(f);
            let f = layer.ff2.forward(g, f);
            let r = g.tape.add(z, f);
            z = layer.norm2.forward(g, r, eps);
        }
        g.tape.gather_rows(z, (0..b).map(|i| i * SEQ_LEN).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput<T> {
    pub score: T,
    pub logit: T,
    pub z_pred: Vec<T>,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Fuse one bundle into the prediction-token state.
///
/// `mask` lists which of (llm, gnn, task) take part; masked tokens enter as
/// zero vectors so the sequence keeps its four positions.
pub fn fuse<T: Scalar>(
    bundle: &EmbeddingBundle<T>,
    fusion: &Fusion,
    store: &ParamStore<T>,
    mask: [bool; 3],
    use_type_embeddings: bool,
) -> Result<Vec<T>> {
    bundle.check(fusion.d)?;
    let zero = vec![T::zero(); fusion.d];
    let pick = |on: bool, v: &Vec<T>| if on { v.clone() } else { zero.clone() };
    let pred = store.get(fusion.pred_token).row(0).to_vec();
    let rows = vec![
        pred,
        pick(mask[0], &bundle.r_llm),
        pick(mask[1], &bundle.r_gnn),
        pick(mask[2], &bundle.r_task),
    ];
    let mut g = Graph::new(store);
    let tokens = g.constant(Matrix::from_rows(&rows));
    let z = fusion.forward(&mut g, tokens, use_type_embeddings);
    Ok(g.value(z).row(0).to_vec())
}

pub fn predict_score<T: Scalar>(z_pred: &[T], head: &Mlp, store: &ParamStore<T>) -> Result<PredictionOutput<T>> {
    if z_pred.len() != head.in_dim() {
        return Err(Error::Config(format!(
            "head expects {} inputs, got {}",
            head.in_dim(),
            z_pred.len()
        )));
    }
    let mut g = Graph::new(store);
    let x = g.constant(Matrix::row_vector(z_pred.to_vec()));
    let y = head.forward(&mut g, x);
    let logit = g.value(y).item();
    Ok(PredictionOutput {
        score: sigmoid(logit),
        logit,
        z_pred: z_pred.to_vec(),
    })
}
