//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A `Tape` records a computation as a flat list of nodes in topological
//! order; every node stores its value as an `Array2<f64>` plus a backward
//! closure that scatters the node's output gradient into its parents.
//! Scalars are `[1 x 1]` matrices, row vectors `[1 x d]`, batches `[b x d]`.
//! One tape is built per forward pass and dropped afterwards.

use ndarray::{s, Array2, Axis};

pub type NodeId = usize;

type BackFn = Box<dyn Fn(&Tape, &Array2<f64>, &mut GradStore)>;

struct Node {
    value: Array2<f64>,
    back: Option<BackFn>,
}

/// Gradients accumulated during a backward pass, indexed by `NodeId`.
pub struct GradStore {
    grads: Vec<Option<Array2<f64>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn accum(&mut self, id: NodeId, g: Array2<f64>) {
        match &mut self.grads[id] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape if the node was never
    /// reached by the backward sweep.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Array2<f64> {
        match self.grads[id].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros((rows, cols)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), [1, 1], "node {id} is not a scalar");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, back: Option<BackFn>) -> NodeId {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN entering tape");
        self.nodes.push(Node { value, back });
        self.nodes.len() - 1
    }

    /// Leaf node: inputs, parameters and constants. Gradients accumulate
    /// into leaves but do not propagate further.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, None)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    /// Backward sweep from a scalar node, seeding its gradient with 1.
    pub fn backward(&self, loss: NodeId) -> GradStore {
        assert_eq!(
            self.value(loss).shape(),
            [1, 1],
            "backward source must be scalar"
        );
        let mut store = GradStore::new(self.nodes.len());
        store.accum(loss, Array2::from_elem((1, 1), 1.0));
        for id in (0..=loss).rev() {
            let Some(g) = store.grads[id].clone() else {
                continue;
            };
            if let Some(back) = &self.nodes[id].back {
                back(self, &g, &mut store);
            }
        }
        store
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.clone());
                gs.accum(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.clone());
                gs.accum(b, -g);
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                gs.accum(a, g * t.value(b));
                gs.accum(b, g * t.value(a));
            })),
        )
    }

    // ── broadcast binary (row / column vectors) ─────────────────────────

    /// `[r x c] + [1 x c]`, the row vector broadcast over rows.
    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.value(a).dim();
        assert_eq!(self.value(v).dim(), (1, c));
        let mut out = self.value(a).clone();
        out += &self.value(v).row(0);
        let _ = r;
        self.push(
            out,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.clone());
                gs.accum(v, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            })),
        )
    }

    pub fn sub_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (_, c) = self.value(a).dim();
        assert_eq!(self.value(v).dim(), (1, c));
        let mut out = self.value(a).clone();
        out -= &self.value(v).row(0);
        self.push(
            out,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.clone());
                gs.accum(v, -g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            })),
        )
    }

    /// `[r x c] + [r x 1]`, the column vector broadcast over columns.
    pub fn add_colvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, _) = self.value(a).dim();
        assert_eq!(self.value(v).dim(), (r, 1));
        let mut out = self.value(a).clone();
        out += &self.value(v).column(0).insert_axis(Axis(1));
        self.push(
            out,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.clone());
                gs.accum(v, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            })),
        )
    }

    pub fn sub_colvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, _) = self.value(a).dim();
        assert_eq!(self.value(v).dim(), (r, 1));
        let mut out = self.value(a).clone();
        out -= &self.value(v).column(0).insert_axis(Axis(1));
        self.push(
            out,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.clone());
                gs.accum(v, -g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            })),
        )
    }

    /// `[r x c] * [1 x c]` elementwise with row-vector broadcast.
    pub fn mul_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (_, c) = self.value(a).dim();
        assert_eq!(self.value(v).dim(), (1, c));
        let out = self.value(a) * &self.value(v).row(0);
        self.push(
            out,
            Some(Box::new(move |t, g, gs| {
                gs.accum(a, g * &t.value(v).row(0));
                gs.accum(
                    v,
                    (g * t.value(a)).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
            })),
        )
    }

    /// `[r x c] * [r x 1]` elementwise with column-vector broadcast.
    pub fn mul_colvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, _) = self.value(a).dim();
        assert_eq!(self.value(v).dim(), (r, 1));
        let col = self.value(v).column(0).insert_axis(Axis(1)).to_owned();
        let out = self.value(a) * &col;
        self.push(
            out,
            Some(Box::new(move |t, g, gs| {
                let col = t.value(v).column(0).insert_axis(Axis(1)).to_owned();
                gs.accum(a, g * &col);
                gs.accum(
                    v,
                    (g * t.value(a)).sum_axis(Axis(1)).insert_axis(Axis(1)),
                );
            })),
        )
    }

    // ── constants mixed in ──────────────────────────────────────────────

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g * c);
            })),
        )
    }

    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        assert_eq!(self.value(a).dim(), c.dim());
        let v = self.value(a) + c;
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.clone());
            })),
        )
    }

    pub fn mul_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        assert_eq!(self.value(a).dim(), c.dim());
        let v = self.value(a) * c;
        let c = c.clone();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g * &c);
            })),
        )
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, ka) = self.value(a).dim();
        let (kb, _) = self.value(b).dim();
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let v = self.value(a).dot(self.value(b));
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                gs.accum(a, g.dot(&t.value(b).t()));
                gs.accum(b, t.value(a).t().dot(g));
            })),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.t().to_owned());
            })),
        )
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let (r0, c0) = self.value(a).dim();
        assert_eq!(r0 * c0, rows * cols, "reshape element count");
        let v = self
            .value(a)
            .to_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape");
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(
                    a,
                    g.to_owned()
                        .into_shape_with_order((r0, c0))
                        .expect("reshape back"),
                );
            })),
        )
    }

    // ── structure: concat / slice / select ──────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        let parts: Vec<NodeId> = parts.to_vec();
        let row_counts: Vec<usize> = parts.iter().map(|&p| self.value(p).nrows()).collect();
        let _ = cols;
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut off = 0;
                for (i, &p) in parts.iter().enumerate() {
                    let r = row_counts[i];
                    gs.accum(p, g.slice(s![off..off + r, ..]).to_owned());
                    off += r;
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        let parts: Vec<NodeId> = parts.to_vec();
        let col_counts: Vec<usize> = parts.iter().map(|&p| self.value(p).ncols()).collect();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut off = 0;
                for (i, &p) in parts.iter().enumerate() {
                    let c = col_counts[i];
                    gs.accum(p, g.slice(s![.., off..off + c]).to_owned());
                    off += c;
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (r, c) = self.value(a).dim();
        assert!(start < end && end <= c);
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut full = Array2::zeros((r, c));
                full.slice_mut(s![.., start..end]).assign(g);
                gs.accum(a, full);
            })),
        )
    }

    /// Select rows by index; duplicate indices are allowed (gradients
    /// scatter-add back).
    pub fn select_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let (r, c) = self.value(a).dim();
        assert!(indices.iter().all(|&i| i < r), "row index out of range");
        let mut v = Array2::zeros((indices.len(), c));
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).assign(&self.value(a).row(i));
        }
        let indices = indices.to_vec();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut full = Array2::zeros((r, c));
                for (k, &i) in indices.iter().enumerate() {
                    let mut row = full.row_mut(i);
                    row += &g.row(k);
                }
                gs.accum(a, full);
            })),
        )
    }

    pub fn get_element(&mut self, a: NodeId, i: usize, j: usize) -> NodeId {
        let (r, c) = self.value(a).dim();
        assert!(i < r && j < c);
        let v = Array2::from_elem((1, 1), self.value(a)[[i, j]]);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut full = Array2::zeros((r, c));
                full[[i, j]] = g[[0, 0]];
                gs.accum(a, full);
            })),
        )
    }

    /// Multiply every element of `a` by a scalar node `s` (`[1 x 1]`).
    pub fn scale_by(&mut self, a: NodeId, sc: NodeId) -> NodeId {
        assert_eq!(self.value(sc).shape(), [1, 1]);
        let v = self.value(a) * self.value(sc)[[0, 0]];
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                gs.accum(a, g * t.value(sc)[[0, 0]]);
                let ds = (g * t.value(a)).sum();
                gs.accum(sc, Array2::from_elem((1, 1), ds));
            })),
        )
    }

    /// Tile the rows of `p` (`[n x c]`) `times` times to `[times*n x c]`.
    pub fn tile_rows(&mut self, p: NodeId, times: usize) -> NodeId {
        let (n, c) = self.value(p).dim();
        let mut v = Array2::zeros((times * n, c));
        for t in 0..times {
            v.slice_mut(s![t * n..(t + 1) * n, ..]).assign(self.value(p));
        }
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut acc = Array2::zeros((n, c));
                for t in 0..times {
                    acc += &g.slice(s![t * n..(t + 1) * n, ..]);
                }
                gs.accum(p, acc);
            })),
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.value(a).dim();
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, Array2::from_elem((r, c), g[[0, 0]]));
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.value(a).dim();
        let n = (r * c) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `[r x c] -> [1 x c]`.
    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.value(a).dim();
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_axis0")
            .insert_axis(Axis(0));
        let _ = c;
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let row = g.row(0).to_owned() / r as f64;
                let mut full = Array2::zeros((r, g.ncols()));
                for mut out_row in full.rows_mut() {
                    out_row.assign(&row);
                }
                gs.accum(a, full);
            })),
        )
    }

    /// Row sums: `[r x c] -> [r x 1]`.
    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.value(a).dim();
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let col = g.column(0).insert_axis(Axis(1)).to_owned();
                let ones = Array2::from_elem((1, c), 1.0);
                gs.accum(a, col.dot(&ones));
            })),
        )
    }

    /// Row means: `[r x c] -> [r x 1]`.
    pub fn mean_axis1(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.value(a).dim();
        let s = self.sum_axis1(a);
        self.scale(s, 1.0 / c as f64)
    }

    /// Row-wise maximum: `[r x c] -> [r x 1]`. Gradient routes to the first
    /// maximal element of each row.
    pub fn max_axis1(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.value(a).dim();
        let mut v = Array2::zeros((r, 1));
        let mut arg = vec![0usize; r];
        for i in 0..r {
            let row = self.value(a).row(i);
            let mut best = row[0];
            let mut bi = 0;
            for j in 1..c {
                if row[j] > best {
                    best = row[j];
                    bi = j;
                }
            }
            v[[i, 0]] = best;
            arg[i] = bi;
        }
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut full = Array2::zeros((r, c));
                for i in 0..r {
                    full[[i, arg[i]]] = g[[i, 0]];
                }
                gs.accum(a, full);
            })),
        )
    }

    // ── elementwise nonlinear ───────────────────────────────────────────

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let mask = t.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                gs.accum(a, g * &mask);
            })),
        )
    }

    /// GELU with the tanh approximation (used as the definition throughout).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A3: f64 = 0.044715;
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (C * (x + A3 * x * x * x)).tanh()));
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let d = t.value(a).mapv(|x| {
                    let u = C * (x + A3 * x * x * x);
                    let th = u.tanh();
                    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A3 * x * x)
                });
                gs.accum(a, g * &d);
            })),
        )
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                gs.accum(a, g * &(t.value(a) * 2.0));
            })),
        )
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::abs);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let sign = t.value(a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                gs.accum(a, g * &sign);
            })),
        )
    }

    /// `1 / sqrt(x + eps)` elementwise; inputs must keep `x + eps > 0`.
    pub fn rsqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        assert!(
            self.value(a).iter().all(|&x| x + eps > 0.0),
            "rsqrt_eps domain"
        );
        let v = self.value(a).mapv(|x| 1.0 / (x + eps).sqrt());
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let d = t.value(a).mapv(|x| {
                    let y = 1.0 / (x + eps).sqrt();
                    -0.5 * y * y * y
                });
                gs.accum(a, g * &d);
            })),
        )
    }

    /// `1 / x` elementwise; every entry must be nonzero.
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        assert!(self.value(a).iter().all(|&x| x != 0.0), "recip domain");
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let d = t.value(a).mapv(|x| -1.0 / (x * x));
                gs.accum(a, g * &d);
            })),
        )
    }

    /// Clamp to `[0, 1]`; gradient passes only strictly inside the interval.
    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(0.0, 1.0));
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let mask = t
                    .value(a)
                    .mapv(|x| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 });
                gs.accum(a, g * &mask);
            })),
        )
    }

    // ── fused softmax family ────────────────────────────────────────────

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        // The Jacobian needs the softmax output itself, so the closure is
        // attached after the node id is known.
        let out = self.push(v, None);
        let back: BackFn = Box::new(move |t: &Tape, g: &Array2<f64>, gs: &mut GradStore| {
            let p = t.value(out);
            let mut dx = g * p;
            for (mut drow, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = drow.sum();
                drow.scaled_add(-dot, &prow);
            }
            gs.accum(a, dx);
        });
        self.nodes[out].back = Some(back);
        out
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let out = self.push(v, None);
        let back: BackFn = Box::new(move |t: &Tape, g: &Array2<f64>, gs: &mut GradStore| {
            let logp = t.value(out);
            let mut dx = g.clone();
            for (mut drow, lrow) in dx.rows_mut().into_iter().zip(logp.rows()) {
                let gsum: f64 = drow.sum();
                for (d, &lp) in drow.iter_mut().zip(lrow.iter()) {
                    *d -= gsum * lp.exp();
                }
            }
            gs.accum(a, dx);
        });
        self.nodes[out].back = Some(back);
        out
    }

    // ── fused row normalization ─────────────────────────────────────────

    /// L2-normalize each row; rows with norm below `floor` are divided by
    /// `floor` instead (keeping the op differentiable there as a constant
    /// scale). Returns the node id.
    pub fn normalize_rows(&mut self, a: NodeId, floor: f64) -> NodeId {
        let x = self.value(a).clone();
        let (r, _) = x.dim();
        let mut norms = vec![0.0f64; r];
        let mut v = x.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let n = row.iter().map(|&e| e * e).sum::<f64>().sqrt();
            norms[i] = n;
            let d = if n > floor { n } else { floor };
            row.mapv_inplace(|e| e / d);
        }
        let out = self.push(v, None);
        let back: BackFn = Box::new(move |t: &Tape, g: &Array2<f64>, gs: &mut GradStore| {
            let y = t.value(out);
            let mut dx = Array2::zeros(g.dim());
            for i in 0..g.nrows() {
                let n = norms[i];
                if n > floor {
                    let yi = y.row(i);
                    let gi = g.row(i);
                    let dot: f64 = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                    for (k, out_e) in dx.row_mut(i).iter_mut().enumerate() {
                        *out_e = (gi[k] - yi[k] * dot) / n;
                    }
                } else {
                    for (k, out_e) in dx.row_mut(i).iter_mut().enumerate() {
                        *out_e = g[[i, k]] / floor;
                    }
                }
            }
            gs.accum(a, dx);
        });
        self.nodes[out].back = Some(back);
        out
    }

    // ── fused losses ────────────────────────────────────────────────────

    /// Mean binary cross-entropy with logits. `targets` entries are 0 or 1.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &Array2<f64>) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim());
        let n = x.len() as f64;
        let mut total = 0.0;
        for (&xi, &vi) in x.iter().zip(targets.iter()) {
            total += xi.max(0.0) - xi * vi + (-xi.abs()).exp().ln_1p();
        }
        let targets = targets.clone();
        self.push(
            Array2::from_elem((1, 1), total / n),
            Some(Box::new(move |t, g, gs| {
                let x = t.value(logits);
                let mut dx = Array2::zeros(x.dim());
                for ((d, &xi), &vi) in dx.iter_mut().zip(x.iter()).zip(targets.iter()) {
                    let sig = if xi >= 0.0 {
                        1.0 / (1.0 + (-xi).exp())
                    } else {
                        let e = xi.exp();
                        e / (1.0 + e)
                    };
                    *d = (sig - vi) / n * g[[0, 0]];
                }
                gs.accum(logits, dx);
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued rebuild function.
    fn fd_grad(
        inputs: &[Array2<f64>],
        which: usize,
        eps: f64,
        f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) -> Array2<f64> {
        let mut grad = Array2::zeros(inputs[which].dim());
        for idx in 0..inputs[which].len() {
            let run = |delta: f64| {
                let mut perturbed: Vec<Array2<f64>> = inputs.to_vec();
                let flat = perturbed[which].as_slice_mut().unwrap();
                flat[idx] += delta;
                let mut t = Tape::new();
                let ids: Vec<NodeId> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
                let loss = f(&mut t, &ids);
                t.scalar_value(loss)
            };
            let g = (run(eps) - run(-eps)) / (2.0 * eps);
            grad.as_slice_mut().unwrap()[idx] = g;
        }
        grad
    }

    fn check_op(inputs: &[Array2<f64>], f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let loss = f(&mut t, &ids);
        let store = t.backward(loss);
        for (w, id) in ids.iter().enumerate() {
            let (r, c) = inputs[w].dim();
            let analytic = store.get_or_zeros(*id, r, c);
            let numeric = fd_grad(inputs, w, 1e-6, f);
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < 1e-5,
                    "input {w}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_and_elementwise_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        check_op(&[a, b], &|t, ids| {
            let m = t.matmul(ids[0], ids[1]);
            let sq = t.square(m);
            t.sum_all(sq)
        });

        let x = rand_mat(&mut rng, 3, 3);
        let y = rand_mat(&mut rng, 3, 3);
        check_op(&[x, y], &|t, ids| {
            let p = t.mul(ids[0], ids[1]);
            let d = t.sub(p, ids[1]);
            let a = t.add(d, ids[0]);
            t.mean_all(a)
        });
    }

    #[test]
    fn broadcast_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 4, 3);
        let rv = rand_mat(&mut rng, 1, 3);
        let cv = rand_mat(&mut rng, 4, 1);
        check_op(&[a.clone(), rv.clone()], &|t, ids| {
            let s = t.add_rowvec(ids[0], ids[1]);
            let m = t.mul_rowvec(s, ids[1]);
            t.sum_all(m)
        });
        check_op(&[a.clone(), cv.clone()], &|t, ids| {
            let s = t.sub_colvec(ids[0], ids[1]);
            let m = t.mul_colvec(s, ids[1]);
            t.sum_all(m)
        });
        check_op(&[a.clone(), rv, cv], &|t, ids| {
            let s = t.sub_rowvec(ids[0], ids[1]);
            let c = t.add_colvec(s, ids[2]);
            let w = t.square(c);
            t.sum_all(w)
        });
    }

    #[test]
    fn softmax_and_logsoftmax_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 5);
        check_op(&[a.clone()], &|t, ids| {
            let p = t.softmax_rows(ids[0]);
            let sq = t.square(p);
            t.sum_all(sq)
        });
        check_op(&[a], &|t, ids| {
            let lp = t.log_softmax_rows(ids[0]);
            let w = t.square(lp);
            t.mean_all(w)
        });
    }

    #[test]
    fn nonlinear_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // keep away from relu/abs kinks and clamp boundaries
        let a = Array2::from_shape_fn((3, 4), |_| {
            let x: f64 = rng.random_range(0.1..0.9);
            x
        });
        let b = rand_mat(&mut rng, 3, 4).mapv(|x| x + if x >= 0.0 { 0.05 } else { -0.05 });
        check_op(&[b.clone()], &|t, ids| {
            let r = t.relu(ids[0]);
            t.sum_all(r)
        });
        check_op(&[b.clone()], &|t, ids| {
            let g = t.gelu(ids[0]);
            t.sum_all(g)
        });
        check_op(&[b], &|t, ids| {
            let g = t.abs(ids[0]);
            t.mean_all(g)
        });
        check_op(&[a.clone()], &|t, ids| {
            let c = t.clamp01(ids[0]);
            let sq = t.square(c);
            t.sum_all(sq)
        });
        check_op(&[a.clone()], &|t, ids| {
            let r = t.rsqrt_eps(ids[0], 1e-5);
            t.sum_all(r)
        });
        check_op(&[a], &|t, ids| {
            let r = t.recip(ids[0]);
            t.mean_all(r)
        });
    }

    #[test]
    fn structural_op_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 2, 4);
        check_op(&[a.clone(), b.clone()], &|t, ids| {
            let c = t.concat_rows(&[ids[0], ids[1]]);
            let sel = t.select_rows(c, &[0, 4, 2, 0]);
            let sq = t.square(sel);
            t.sum_all(sq)
        });
        check_op(&[a.clone()], &|t, ids| {
            let tr = t.transpose(ids[0]);
            let sl = t.slice_cols(tr, 1, 3);
            let sq = t.square(sl);
            t.sum_all(sq)
        });
        check_op(&[a.clone()], &|t, ids| {
            let r = t.reshape(ids[0], 4, 3);
            let m = t.max_axis1(r);
            t.sum_all(m)
        });
        check_op(&[a.clone()], &|t, ids| {
            let e = t.get_element(ids[0], 1, 2);
            let s = t.scale_by(ids[0], e);
            t.sum_all(s)
        });
        check_op(&[b], &|t, ids| {
            let tiled = t.tile_rows(ids[0], 3);
            let sq = t.square(tiled);
            t.mean_all(sq)
        });
        check_op(&[a], &|t, ids| {
            let m0 = t.mean_axis0(ids[0]);
            let s1 = t.sum_axis1(m0);
            t.sum_all(s1)
        });
    }

    #[test]
    fn normalize_rows_grad_and_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 3, 4) + 0.5;
        check_op(&[a], &|t, ids| {
            let n = t.normalize_rows(ids[0], 1e-12);
            let sq = t.square(n);
            t.sum_all(sq)
        });
        // a zero row maps to zero output under the floor
        let mut t = Tape::new();
        let z = t.leaf(Array2::zeros((1, 3)));
        let n = t.normalize_rows(z, 1e-12);
        assert!(t.value(n).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bce_with_logits_matches_fd_and_known_values() {
        let logits = array![[0.0], [0.0]];
        let targets = array![[1.0], [0.0]];
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let loss = t.bce_with_logits_mean(l, &targets);
        assert!((t.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_mat(&mut rng, 5, 1);
        let tg = Array2::from_shape_fn((5, 1), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        check_op(&[x], &|t, ids| t.bce_with_logits_mean(ids[0], &tg));
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        // y = x*x + x used twice: dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0]]);
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let store = t.backward(y);
        let g = store.get(x).unwrap();
        assert!((g[[0, 0]] - 7.0).abs() < 1e-12);
    }
}
