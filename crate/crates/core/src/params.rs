//! Named parameter storage, initialization, and the tape binding used at
//! each forward pass.
//!
//! Modules register parameters once at construction time (in a fixed order,
//! which makes binding, checkpointing and finite-difference perturbation
//! deterministic) and hold `ParamId` handles. A `Binder` leases parameters
//! onto a fresh tape per step and maps gradients back afterwards.

use crate::tape::{GradStore, NodeId, Tape};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Truncated normal: resample anything beyond two standard deviations.
    TruncNormal { std: f64 },
}

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::from_elem((rows, cols), 1.0),
            Init::Constant(c) => Array2::from_elem((rows, cols), c),
            Init::TruncNormal { std } => Array2::from_shape_fn((rows, cols), |_| loop {
                // Box-Muller from two uniforms keeps us off rand_distr's
                // ziggurat internals and is trivially reproducible.
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                let x = z * std;
                if x.abs() <= 2.0 * std {
                    break x;
                }
            }),
        };
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.values[id.0].dim(), value.dim());
        self.values[id.0] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Lookup by name; used by the checkpoint loader and tests.
    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Leases parameters onto a tape, at most once each per forward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: HashMap<usize, NodeId>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            bound: HashMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> NodeId {
        *self
            .bound
            .entry(id.0)
            .or_insert_with(|| tape.leaf(self.store.get(id).clone()))
    }

    /// Collect parameter gradients after a backward sweep. Parameters that
    /// were never bound or never reached get zero gradients.
    pub fn grads(&self, store: &GradStore) -> Vec<(ParamId, Array2<f64>)> {
        let mut out = Vec::with_capacity(self.store.len());
        for (pid, _, value) in self.store.iter() {
            let (r, c) = value.dim();
            let g = match self.bound.get(&pid.0) {
                Some(&nid) => store.get_or_zeros(nid, r, c),
                None => Array2::zeros((r, c)),
            };
            out.push((pid, g));
        }
        out
    }

    pub fn node_of(&self, id: ParamId) -> Option<NodeId> {
        self.bound.get(&id.0).copied()
    }
}

/// SGD with momentum and optional weight decay over a `ParamStore`.
pub struct SgdMomentum {
    velocity: Vec<Array2<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            velocity: store.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)], lr: f64) {
        for (pid, grad) in grads {
            let i = pid.0;
            let mut g = grad.clone();
            if self.weight_decay > 0.0 {
                g += &(store.get(*pid) * self.weight_decay);
            }
            self.velocity[i] = &self.velocity[i] * self.momentum + &g;
            let update = &self.velocity[i] * lr;
            *store.get_mut(*pid) -= &update;
        }
    }

    pub fn velocities(&self) -> &[Array2<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, idx: usize, v: Array2<f64>) {
        assert_eq!(self.velocity[idx].dim(), v.dim());
        self.velocity[idx] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let id = store.add("w", 64, 64, Init::TruncNormal { std: 0.02 }, &mut rng);
        assert!(store.get(id).iter().all(|x| x.abs() <= 0.04));
        // not all identical
        let first = store.get(id)[[0, 0]];
        assert!(store.get(id).iter().any(|&x| x != first));
    }

    #[test]
    fn binder_leases_once_and_collects_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", 2, 2, Init::Ones, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let a = binder.get(&mut tape, w);
        let b = binder.get(&mut tape, w);
        assert_eq!(a, b);
        let sq = tape.mul(a, a);
        let loss = tape.sum_all(sq);
        let gs = tape.backward(loss);
        let grads = binder.grads(&gs);
        assert_eq!(grads.len(), 1);
        assert!(grads[0].1.iter().all(|&g| (g - 2.0).abs() < 1e-12));
    }

    #[test]
    fn sgd_momentum_updates_match_hand_rolled() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 1, Init::Constant(1.0), &mut rng);
        let mut opt = SgdMomentum::new(&store, 0.9, 0.0);
        let g = ndarray::array![[0.5]];
        opt.step(&mut store, &[(w, g.clone())], 0.1);
        // v = 0.5, w = 1 - 0.05
        assert!((store.get(w)[[0, 0]] - 0.95).abs() < 1e-12);
        opt.step(&mut store, &[(w, g)], 0.1);
        // v = 0.45 + 0.5 = 0.95, w = 0.95 - 0.095
        assert!((store.get(w)[[0, 0]] - 0.855).abs() < 1e-12);
    }
}
