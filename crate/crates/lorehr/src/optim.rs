//! Parameters and a Riemannian Adam optimizer.
//!
//! Parameters are tagged as Euclidean or manifold-point. Euclidean tensors
//! take standard Adam steps (with weight decay); manifold tensors are updated
//! row-wise: the Euclidean gradient is turned into a Riemannian one (metric
//! flip + tangent projection), moments are kept in ambient coordinates, the
//! update is retracted with the exponential map, and the first moment is
//! re-projected onto the new tangent space. That re-projection is an
//! approximation of parallel transport; the second moment stays element-wise
//! so it remains nonnegative.

use crate::error::{Error, Result};
use crate::manifold::Geometry;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ManifoldPoint,
    Euclidean,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub id: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: &str, kind: ParamKind, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { id: id.to_string(), kind, value, grad }
    }
}

/// Ordered parameter collection; iteration order is insertion order, which
/// makes checkpoints and optimizer traversal deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> usize {
        assert!(
            !self.index.contains_key(&param.id),
            "duplicate parameter id {}",
            param.id
        );
        self.index.insert(param.id.clone(), self.params.len());
        self.params.push(param);
        self.params.len() - 1
    }

    pub fn add(&mut self, id: &str, kind: ParamKind, value: Tensor) -> usize {
        self.insert(Parameter::new(id, kind, value))
    }

    pub fn get(&self, id: &str) -> &Parameter {
        &self.params[self.index[id]]
    }

    pub fn try_get(&self, id: &str) -> Option<&Parameter> {
        self.index.get(id).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, id: &str) -> &mut Parameter {
        let i = self.index[id];
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    pub fn accumulate_grad(&mut self, id: &str, g: &Tensor) {
        self.get_mut(id).grad.add_assign(g);
    }

    /// Global L2 norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    /// SHA-256 over the raw parameter bytes, in insertion order.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.id.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash restricted to ids with the given prefix (freeze verification).
    pub fn content_hash_prefixed(&self, prefix: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.id.starts_with(prefix)) {
            h.update(p.id.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Riemannian gradient rows for a manifold parameter: metric flip of the
/// Euclidean gradient followed by projection onto the tangent space at each
/// row's point.
pub fn riemannian_grad(geom: &Geometry, value: &Tensor, grad: &Tensor) -> Tensor {
    let (n, da) = (value.rows(), value.cols());
    let mut out = Vec::with_capacity(n * da);
    for r in 0..n {
        let point = value.row_slice(r);
        let mut flipped = grad.row_slice(r).to_vec();
        flipped[0] = -flipped[0];
        out.extend_from_slice(&geom.project_to_tangent(point, &flipped));
    }
    Tensor::new(vec![n, da], out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to Euclidean parameters only.
    pub weight_decay: f64,
    /// Global L2 gradient clip; <= 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

pub struct RiemannianAdam {
    pub cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl RiemannianAdam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let states = store
            .iter()
            .map(|p| AdamState {
                step: 0,
                m: Tensor::zeros(p.value.shape().to_vec()),
                v: Tensor::zeros(p.value.shape().to_vec()),
            })
            .collect();
        RiemannianAdam { cfg, states }
    }

    /// One optimization step at the given learning rate. Gradients must have
    /// been accumulated into the store.
    pub fn step(&mut self, geom: &Geometry, store: &mut ParamStore, lr: f64) -> Result<()> {
        // global clip over the raw gradient buffers
        if self.cfg.clip_norm > 0.0 {
            let gn = store.grad_norm();
            if gn > self.cfg.clip_norm {
                let scale = self.cfg.clip_norm / gn;
                for p in store.iter_mut() {
                    p.grad.scale_assign(scale);
                }
            }
        }

        for (p, st) in store.iter_mut().zip(self.states.iter_mut()) {
            st.step += 1;
            let t = st.step as f64;
            let bc1 = 1.0 - self.cfg.beta1.powf(t);
            let bc2 = 1.0 - self.cfg.beta2.powf(t);

            match p.kind {
                ParamKind::Euclidean => {
                    let wd = self.cfg.weight_decay;
                    for i in 0..p.value.len() {
                        let g = p.grad.data()[i] + wd * p.value.data()[i];
                        let m = &mut st.m.data_mut()[i];
                        *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                        let v = &mut st.v.data_mut()[i];
                        *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        let upd = lr * mhat / (vhat.sqrt() + self.cfg.eps);
                        if !upd.is_finite() {
                            return Err(Error::Training(format!(
                                "non-finite update for parameter {}",
                                p.id
                            )));
                        }
                        p.value.data_mut()[i] -= upd;
                    }
                }
                ParamKind::ManifoldPoint => {
                    let rgrad = riemannian_grad(geom, &p.value, &p.grad);
                    let (rows, da) = (p.value.rows(), p.value.cols());
                    for r in 0..rows {
                        for c in 0..da {
                            let i = r * da + c;
                            let g = rgrad.data()[i];
                            let m = &mut st.m.data_mut()[i];
                            *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                            let v = &mut st.v.data_mut()[i];
                            *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                        }
                        let point = p.value.row_slice(r).to_vec();
                        let mut update = vec![0.0; da];
                        for c in 0..da {
                            let i = r * da + c;
                            let mhat = st.m.data()[i] / bc1;
                            let vhat = st.v.data()[i] / bc2;
                            update[c] = -lr * mhat / (vhat.sqrt() + self.cfg.eps);
                        }
                        // element-wise scaling breaks tangency; restore it
                        let tangent = geom.project_to_tangent(&point, &update);
                        let moved = geom
                            .exp_map(&point, &tangent)
                            .and_then(|q| geom.project_to_manifold(&q))
                            .map_err(|e| {
                                Error::Training(format!("retraction failed for {}: {e}", p.id))
                            })?;
                        if !moved.iter().all(|x| x.is_finite()) {
                            return Err(Error::Training(format!(
                                "non-finite update for parameter {}",
                                p.id
                            )));
                        }
                        // transport approximation: re-project first moment
                        let m_row = st.m.row_slice(r).to_vec();
                        let m_new = geom.project_to_tangent(&moved, &m_row);
                        st.m.row_slice_mut(r).copy_from_slice(&m_new);
                        p.value.row_slice_mut(r).copy_from_slice(&moved);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Cosine,
}

/// Linear warmup to `base_lr` over the first `warmup_frac` of steps, then
/// cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
    pub decay: Decay,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_frac: f64, total_steps: u64) -> Self {
        Schedule { base_lr, warmup_frac, total_steps, decay: Decay::Cosine }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).round() as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Argument(format!(
                "step {step} out of range 0..={}",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.base_lr * step as f64 / warmup as f64);
        }
        if self.total_steps == warmup {
            return Ok(self.base_lr);
        }
        let progress = (step - warmup) as f64 / (self.total_steps - warmup) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
