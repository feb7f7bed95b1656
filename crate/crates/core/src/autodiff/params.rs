//! Named parameter storage living outside any tape.
//!
//! A forward pass binds every entry onto a fresh tape ([`ParamSet::bind`]);
//! after backward the leaf gradients are folded back with
//! [`ParamSet::collect_grads`]. Non-trainable entries (batch-norm running
//! statistics) ride along in the same set so checkpoints capture them.

use super::ops::norm::GroupStats;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

/// Tape variables for every entry of a [`ParamSet`], in entry order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Batch-norm statistics observed during a training pass.
#[derive(Clone, Debug)]
pub struct BnRecord {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub groups: Vec<GroupStats>,
}

/// Per-forward-pass switches and side outputs.
#[derive(Clone, Debug)]
pub struct Pass {
    pub training: bool,
    /// Batch elements per batch-norm group in training mode (`None` = whole batch).
    pub bn_group: Option<usize>,
    pub bn_updates: Vec<BnRecord>,
}

impl Pass {
    pub fn train(bn_group: Option<usize>) -> Self {
        Self {
            training: true,
            bn_group,
            bn_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            bn_group: None,
            bn_updates: Vec::new(),
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = vec![0.0; value.numel()];
        self.entries.push(Entry {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name, value, true)
    }

    /// Non-trainable state saved with the parameters.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Leaves for every entry; trainable ones request gradients when `train` is set.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), train && e.trainable))
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of bound trainable leaves into the gradient buffers.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (e, v) in self.entries.iter_mut().zip(&bound.vars) {
            if !e.trainable {
                continue;
            }
            if let Some(g) = tape.grad(*v) {
                e.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Concatenated gradients of trainable entries.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for e in self.entries.iter().filter(|e| e.trainable) {
            out.extend_from_slice(&e.grad);
        }
        out
    }

    pub fn set_flat_grads(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::dim(
                "set_flat_grads",
                &[self.num_trainable()],
                &[flat.len()],
            ));
        }
        let mut off = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.grad.len();
            e.grad.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnRecord]) {
        for rec in updates {
            for g in &rec.groups {
                let m = &mut self.entries[rec.running_mean.0].value;
                m.data_mut()
                    .iter_mut()
                    .zip(&g.mean)
                    .for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
                let s = &mut self.entries[rec.running_var.0].value;
                s.data_mut()
                    .iter_mut()
                    .zip(&g.var)
                    .for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
            }
        }
    }

    /// FNV-1a over names, shapes and value bit patterns of every entry.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::util::Fnv64::new();
        for e in &self.entries {
            h.write(e.name.as_bytes());
            for d in e.value.shape() {
                h.write(&(*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// `(name, value, trainable)` for every entry in order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    /// Overwrites values from another set with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.00075,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_shapes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &ParamSet) -> Self {
        Self::for_shapes(
            params
                .entries
                .iter()
                .filter(|e| e.trainable)
                .map(|e| e.value.numel()),
        )
    }
}

/// One bias-corrected Adam update of `params` from `grads`.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::dim("adam", &[p.len()], &[g.len(), m.len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

impl ParamSet {
    /// Applies one Adam step to the trainable entries using their gradient buffers.
    pub fn adam_update(&mut self, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
        let (mut ps, mut gs) = (Vec::new(), Vec::new());
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            ps.push(e.value.data_mut());
            gs.push(e.grad.as_slice());
        }
        adam_step(&mut ps, &gs, state, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::for_shapes([3]);
        adam_step(
            &mut [p.as_mut_slice()],
            &[g.as_slice()],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = vec![0.0, 0.0, 0.0];
        let g = vec![3.0, -0.5, 0.25];
        let mut st = AdamState::for_shapes([3]);
        adam_step(&mut [p.as_mut_slice()], &[g.as_slice()], &mut st, &cfg).unwrap();
        // closed form: -lr * g / (|g| + eps)
        for (pi, gi) in p.iter().zip(&g) {
            let expect = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((pi - expect).abs() < 1e-15);
            // equals -lr * sign(g) up to the epsilon offset lr * eps / |g|
            assert!((pi + cfg.lr * gi.signum()).abs() <= cfg.lr * cfg.eps / gi.abs() + 1e-15);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = vec![0.0; 3];
        let g = vec![0.0; 2];
        let mut st = AdamState::for_shapes([3]);
        assert!(adam_step(
            &mut [p.as_mut_slice()],
            &[g.as_slice()],
            &mut st,
            &AdamConfig::default()
        )
        .is_err());
    }

    #[test]
    fn bind_and_collect() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let r = ps.add_buffer("r", Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape, true);
        let y = tape.mul(b.get(w), b.get(w)).unwrap();
        let y = tape.add(y, b.get(r)).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        ps.collect_grads(&tape, &b);
        assert_eq!(ps.grad(w), &[2.0, 4.0]);
        assert_eq!(ps.grad(r), &[0.0, 0.0]);
        assert_eq!(ps.num_trainable(), 2);
    }
}
