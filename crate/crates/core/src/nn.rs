//! Shared neural building blocks composed from tape primitives: linear
//! layers, layer/batch normalization, multi-head attention and the
//! feed-forward block. Weight matrices use truncated-normal init
//! (sigma 0.02), biases start at zero, norm gains at one.

use crate::params::{Binder, Init, ParamId, ParamStore};
use crate::tape::{NodeId, Tape};
use rand_chacha::ChaCha8Rng;

pub const WEIGHT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            in_dim,
            out_dim,
            Init::TruncNormal { std: WEIGHT_STD },
            rng,
        );
        let b = store.add(&format!("{name}.b"), 1, out_dim, Init::Zeros, rng);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// `[r x in] -> [r x out]`
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: NodeId) -> NodeId {
        let w = binder.get(tape, self.w);
        let b = binder.get(tape, self.b);
        let xw = tape.matmul(x, w);
        tape.add_rowvec(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), 1, dim, Init::Ones, rng);
        let beta = store.add(&format!("{name}.beta"), 1, dim, Init::Zeros, rng);
        LayerNorm { gamma, beta }
    }

    /// Normalize each row to zero mean / unit variance, then scale and shift.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: NodeId) -> NodeId {
        let mu = tape.mean_axis1(x);
        let xc = tape.sub_colvec(x, mu);
        let sq = tape.square(xc);
        let var = tape.mean_axis1(sq);
        let inv = tape.rsqrt_eps(var, NORM_EPS);
        let y = tape.mul_colvec(xc, inv);
        let gamma = binder.get(tape, self.gamma);
        let beta = binder.get(tape, self.beta);
        let scaled = tape.mul_rowvec(y, gamma);
        tape.add_rowvec(scaled, beta)
    }
}

/// 1-d batch normalization over feature columns, batch statistics only
/// (training-mode). Evaluation embeddings use pre-norm features, so no
/// running statistics are kept.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNorm {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), 1, dim, Init::Ones, rng);
        let beta = store.add(&format!("{name}.beta"), 1, dim, Init::Zeros, rng);
        BatchNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: NodeId) -> NodeId {
        let mu = tape.mean_axis0(x);
        let xc = tape.sub_rowvec(x, mu);
        let sq = tape.square(xc);
        let var = tape.mean_axis0(sq);
        let inv = tape.rsqrt_eps(var, BN_EPS);
        let y = tape.mul_rowvec(xc, inv);
        let gamma = binder.get(tape, self.gamma);
        let beta = binder.get(tape, self.beta);
        let scaled = tape.mul_rowvec(y, gamma);
        tape.add_rowvec(scaled, beta)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            q: Linear::register(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::register(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::register(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::register(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Attend `q_in` (`[sq x d]`) over `kv_in` (`[skv x d]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> NodeId {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(tape, binder, q_in);
        let k = self.k.forward(tape, binder, kv_in);
        let v = self.v.forward(tape, binder, kv_in);
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled);
            ctx.push(tape.matmul(probs, vh));
        }
        let merged = tape.concat_cols(&ctx);
        self.o.forward(tape, binder, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            lin1: Linear::register(store, rng, &format!("{name}.fc1"), dim, hidden),
            lin2: Linear::register(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: NodeId) -> NodeId {
        let h = self.lin1.forward(tape, binder, x);
        let a = tape.gelu(h);
        self.lin2.forward(tape, binder, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;

    fn setup() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(11))
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let (mut store, mut rng) = setup();
        let ln = LayerNorm::register(&mut store, &mut rng, "ln", 6);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let x = tape.leaf(Array2::from_shape_fn((3, 6), |_| rng.random_range(-2.0..2.0)));
        let y = ln.forward(&mut tape, &mut binder, x);
        for row in tape.value(y).rows() {
            let mean: f64 = row.sum() / 6.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn attention_with_zero_value_proj_is_identity_after_residual() {
        let (mut store, mut rng) = setup();
        let mha = MultiHeadAttention::register(&mut store, &mut rng, "attn", 8, 2);
        // zero the value and output projections: attention contributes nothing
        for pid in [mha.v.w, mha.v.b, mha.o.w, mha.o.b] {
            let z = Array2::zeros(store.get(pid).dim());
            store.set(pid, z);
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let x = tape.leaf(Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0)));
        let out = mha.forward(&mut tape, &mut binder, x, x);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_grads_match_finite_differences() {
        let (mut store, mut rng) = setup();
        let mha = MultiHeadAttention::register(&mut store, &mut rng, "attn", 4, 2);
        let x_val = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));

        let run = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let mut binder = Binder::new(store);
            let x = tape.leaf(x_val.clone());
            let out = mha.forward(&mut tape, &mut binder, x, x);
            let sq = tape.square(out);
            let loss = tape.sum_all(sq);
            tape.scalar_value(loss)
        };

        // analytic
        let grads = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store);
            let x = tape.leaf(x_val.clone());
            let out = mha.forward(&mut tape, &mut binder, x, x);
            let sq = tape.square(out);
            let loss = tape.sum_all(sq);
            let gs = tape.backward(loss);
            binder.grads(&gs)
        };

        let eps = 1e-6;
        for (pid, analytic) in &grads {
            let dim = store.get(*pid).dim();
            for i in 0..dim.0 {
                for j in 0..dim.1 {
                    let orig = store.get(*pid)[[i, j]];
                    store.get_mut(*pid)[[i, j]] = orig + eps;
                    let plus = run(&store);
                    store.get_mut(*pid)[[i, j]] = orig - eps;
                    let minus = run(&store);
                    store.get_mut(*pid)[[i, j]] = orig;
                    let numeric = (plus - minus) / (2.0 * eps);
                    let a = analytic[[i, j]];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (a - numeric).abs() / denom < 1e-4,
                        "{} [{i},{j}]: analytic {a} vs numeric {numeric}",
                        store.name(*pid)
                    );
                }
            }
        }
    }
}
