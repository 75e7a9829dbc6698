//! Parameter storage, basic layers and the AdamW optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, MatrixBlob};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, named collection of trainable matrices.
///
/// Names are dotted paths (`gnn.layer0.head1.w`); the first segment is the
/// submodule a parameter belongs to and decides which checkpoint blob it is
/// written to.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Parameters grouped by submodule (first name segment).
    pub fn blobs_by_module(&self) -> BTreeMap<String, BTreeMap<String, MatrixBlob>> {
        let mut out: BTreeMap<String, BTreeMap<String, MatrixBlob>> = BTreeMap::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            let module = name.split('.').next().unwrap_or(name).to_string();
            out.entry(module)
                .or_default()
                .insert(name.clone(), MatrixBlob::from(value));
        }
        out
    }

    /// Overwrite values from blobs; every provided name must exist with the same shape.
    pub fn load_blobs(&mut self, blobs: &BTreeMap<String, MatrixBlob>) -> Result<()> {
        for (name, blob) in blobs {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let current = self.get(id);
            if current.shape() != (blob.rows, blob.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, checkpoint has ({}, {})",
                    current.shape(),
                    blob.rows,
                    blob.cols
                )));
            }
            *self.get_mut(id) = blob.to_matrix();
        }
        Ok(())
    }

    /// Copy values of every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<()> {
        for (name, value) in other.names.iter().zip(&other.values) {
            if !name.starts_with(prefix) {
                continue;
            }
            let id = self
                .find(name)
                .ok_or_else(|| Error::Config(format!("parameter {name} missing from target model")))?;
            if self.get(id).shape() != value.shape() {
                return Err(Error::Config(format!("parameter {name} shape mismatch")));
            }
            *self.get_mut(id) = value.clone();
        }
        Ok(())
    }
}

/// One forward pass: a tape plus the lazily bound parameter leaves.
pub struct Graph<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: Option<&'a [bool]>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: None,
        }
    }

    /// Restrict which parameters are bound as trainable leaves; the rest are constants.
    pub fn with_trainable(mut self, mask: &'a [bool]) -> Self {
        self.trainable = Some(mask);
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let trainable = self.trainable.map_or(true, |m| m[id.0]);
        let v = if trainable {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        self.tape.value(v)
    }

    /// Backpropagate and collect gradients for every bound parameter.
    pub fn param_grads(&self, root: Var) -> Vec<Option<Matrix<T>>> {
        let mut grads: Gradients<T> = self.tape.backward(root);
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Matrix::glorot(in_dim, out_dim, rng));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.p(self.w);
        let b = g.p(self.b);
        let xw = g.tape.matmul(x, w);
        g.tape.add_row(xw, b)
    }
}

/// Two-layer perceptron `Linear -> GELU -> Linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng),
            second: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = g.tape.gelu(h);
        self.second.forward(g, h)
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Matrix<T>> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Matrix<T>>]) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::c(self.cfg.beta1);
        let b2 = T::c(self.cfg.beta2);
        let one = T::one();
        let bc1 = T::c(1.0 - self.cfg.beta1.powf(t));
        let bc2 = T::c(1.0 - self.cfg.beta2.powf(t));
        let lr = T::c(self.cfg.lr);
        let eps = T::c(self.cfg.eps);
        let decay = T::c(1.0 - self.cfg.lr * self.cfg.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(ParamId(i));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adamw_minimises_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Matrix::from_f64(1, 2, &[3.0, -2.0]));
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let mut g = Graph::new(&store);
            let xv = g.p(x);
            let sq = g.tape.mul(xv, xv);
            let loss = g.tape.sum_all(sq);
            let grads = g.param_grads(loss);
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn blobs_round_trip_into_fresh_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::<f32>::new();
        Mlp::new(&mut a, "head", 3, 4, 1, &mut rng);
        let mut b = ParamStore::<f32>::new();
        Mlp::new(&mut b, "head", 3, 4, 1, &mut rng);
        let blobs = a.blobs_by_module();
        b.load_blobs(&blobs["head"]).unwrap();
        for id in a.ids() {
            assert_eq!(a.get(id), b.get(id));
        }
    }

    #[test]
    fn frozen_mask_binds_constants() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Matrix::scalar(2.0));
        let b = store.add("b", Matrix::scalar(3.0));
        let mask = [false, true];
        let mut g = Graph::new(&store).with_trainable(&mask);
        let (va, vb) = (g.p(a), g.p(b));
        let prod = g.tape.mul(va, vb);
        let grads = g.param_grads(prod);
        assert!(grads[0].is_none());
        assert_eq!(grads[1].as_ref().unwrap().item(), 2.0);
    }
}
