//! Reverse-mode differentiation over dense per-point feature maps.
//!
//! Every value is a row-major matrix: `N x C` feature maps, or `N x (L·C)`
//! gathered tangent images where pixel `ℓ`, channel `c` of point `n` sits at
//! column `ℓ·C + c`. A [`Graph`] records operations as they run; index and
//! weight matrices are borrowed from precomputed plans for the graph's
//! lifetime. [`Graph::backward`] walks the tape in reverse.

mod checkpoint;
mod params;
mod real;

use thiserror::Error;

use crate::io::UNLABELED;
use crate::par;
use crate::precompute::PoolPlan;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError,
};
pub use params::{Adam, Param, ParamId, ParamStore};
pub use real::Real;

/// Negative slope of the network's activations.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite values produced by {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },
    #[error("every point is unlabeled; the loss is undefined")]
    NoLabels,
    #[error("backward needs a scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle of a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Max,
}

enum Op<'a, T> {
    Leaf,
    Param(ParamId),
    Gather {
        x: Var,
        index: &'a [u32],
    },
    Mix {
        inputs: Vec<Var>,
        weights: Vec<&'a [T]>,
        pixels: usize,
    },
    ConcatPixels {
        a: Var,
        b: Var,
        pixels: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    PoolAvg {
        x: Var,
        plan: &'a PoolPlan,
    },
    PoolMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Unpool {
        x: Var,
        plan: &'a PoolPlan,
    },
    Concat {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: &'a [u32],
        class_weights: &'a [T],
        /// softmax of the logits, cached for the backward pass
        probs: Vec<T>,
        labeled: usize,
    },
    WeightedSum {
        x: Var,
        coeffs: &'a [T],
    },
}

struct Node<'a, T> {
    value: Tensor<T>,
    op: Op<'a, T>,
}

/// Recorded computation.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if the output does not depend on it.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every parameter that took part, in recording order.
    /// A parameter recorded more than once gets the sum.
    pub fn params(&self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = Vec::new();
        for &(node, id) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match out.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(), EngineError> {
    let bad = t.data.iter().filter(|x| !x.is_finite()).count();
    if bad > 0 {
        return Err(EngineError::NonFinite {
            op,
            detail: format!("{bad} of {} entries in a {}x{} output", t.data.len(), t.rows, t.cols),
        });
    }
    Ok(())
}

fn shape_err<V>(msg: String) -> Result<V, EngineError> {
    Err(EngineError::Shape(msg))
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<'a, T>) -> Result<Var, EngineError> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Total scalars held by recorded values.
    pub fn memory_scalars(&self) -> usize {
        self.nodes.iter().map(|n| n.value.data.len()).sum()
    }

    /// Largest magnitude among recorded values, for diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|n| n.value.data.iter())
            .fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    /// A value that is not a parameter. Gradients still flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var, EngineError> {
        self.push("input", t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var, EngineError> {
        let p = store.get(id);
        self.push("param", Tensor::new(p.rows, p.cols, p.value.clone()), Op::Param(id))
    }

    /// `M[n, ℓ, c] = X[I[n, ℓ], c]` for an `N_out x L` index matrix `I`.
    pub fn gather(&mut self, x: Var, index: &'a [u32], pixels: usize) -> Result<Var, EngineError> {
        let src = &self.nodes[x.0].value;
        if pixels == 0 || index.len() % pixels != 0 {
            return shape_err(format!("index length {} not a multiple of L={pixels}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= src.rows) {
            return Err(EngineError::IndexOutOfRange {
                index: bad as usize,
                len: src.rows,
            });
        }
        let c = src.cols;
        let rows = index.len() / pixels;
        let mut out = vec![T::zero(); rows * pixels * c];
        par::for_each_row_mut(&mut out, pixels * c, |n, row| {
            for (l, dst) in row.chunks_mut(c.max(1)).enumerate() {
                dst.copy_from_slice(src.row(index[n * pixels + l] as usize));
            }
        });
        self.push("gather", Tensor::new(rows, pixels * c, out), Op::Gather { x, index })
    }

    /// `M = Σᵢ Hᵢ ⊙ Mᵢ` with constant `N x L` weights broadcast over channels.
    pub fn weighted_mix(
        &mut self,
        inputs: &[Var],
        weights: &[&'a [T]],
        pixels: usize,
    ) -> Result<Var, EngineError> {
        if inputs.is_empty() || inputs.len() != weights.len() {
            return shape_err(format!("{} inputs with {} weight matrices", inputs.len(), weights.len()));
        }
        let first = &self.nodes[inputs[0].0].value;
        let (rows, cols) = (first.rows, first.cols);
        if pixels == 0 || cols % pixels != 0 {
            return shape_err(format!("{cols} columns not divisible by L={pixels}"));
        }
        for (v, w) in inputs.iter().zip(weights) {
            let t = &self.nodes[v.0].value;
            if (t.rows, t.cols) != (rows, cols) || w.len() != rows * pixels {
                return shape_err("weighted_mix operands disagree".into());
            }
        }
        let c = cols / pixels;
        let sources: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let mut out = vec![T::zero(); rows * cols];
        par::for_each_row_mut(&mut out, cols, |n, row| {
            for (src, w) in sources.iter().zip(weights) {
                let srow = src.row(n);
                for l in 0..pixels {
                    let h = w[n * pixels + l];
                    for k in l * c..(l + 1) * c {
                        row[k] = row[k] + h * srow[k];
                    }
                }
            }
        });
        self.push(
            "weighted_mix",
            Tensor::new(rows, cols, out),
            Op::Mix {
                inputs: inputs.to_vec(),
                weights: weights.to_vec(),
                pixels,
            },
        )
    }

    /// Per-pixel channel concatenation of `N x (L·Ca)` and `N x (L·Cb)`.
    pub fn concat_pixels(&mut self, a: Var, b: Var, pixels: usize) -> Result<Var, EngineError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows != tb.rows || pixels == 0 || ta.cols % pixels != 0 || tb.cols % pixels != 0 {
            return shape_err(format!(
                "concat_pixels {}x{} with {}x{} at L={pixels}",
                ta.rows, ta.cols, tb.rows, tb.cols
            ));
        }
        let (ca, cb) = (ta.cols / pixels, tb.cols / pixels);
        let cols = ta.cols + tb.cols;
        let mut out = vec![T::zero(); ta.rows * cols];
        par::for_each_row_mut(&mut out, cols, |n, row| {
            let (ra, rb) = (ta.row(n), tb.row(n));
            for l in 0..pixels {
                let o = l * (ca + cb);
                row[o..o + ca].copy_from_slice(&ra[l * ca..(l + 1) * ca]);
                row[o + ca..o + ca + cb].copy_from_slice(&rb[l * cb..(l + 1) * cb]);
            }
        });
        self.push("concat_pixels", Tensor::new(ta.rows, cols, out), Op::ConcatPixels { a, b, pixels })
    }

    /// `X W + b` for `X: N x K`, `W: K x C_out`, `b: 1 x C_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, EngineError> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.cols != tw.rows {
            return shape_err(format!("{}x{} times {}x{}", tx.rows, tx.cols, tw.rows, tw.cols));
        }
        let bias = match b {
            Some(b) => {
                let tb = &self.nodes[b.0].value;
                if tb.data.len() != tw.cols {
                    return shape_err(format!("bias of {} for {} outputs", tb.data.len(), tw.cols));
                }
                Some(&tb.data)
            }
            None => None,
        };
        let (k, n) = (tw.rows, tw.cols);
        let mut out = vec![T::zero(); tx.rows * n];
        par::for_each_chunk_mut(&mut out, n, |first, chunk| {
            let rows = chunk.len() / n.max(1);
            if let Some(bias) = bias {
                for row in chunk.chunks_mut(n) {
                    row.copy_from_slice(bias);
                }
            }
            let a = &tx.data[first * k..(first + rows) * k];
            T::gemm(rows, k, n, T::one(), a, k as isize, 1, &tw.data, n as isize, 1, T::one(), chunk, n as isize, 1);
        });
        self.push("linear", Tensor::new(tx.rows, n, out), Op::Linear { x, w, b })
    }

    /// Tangent convolution of gathered images `M: N x (L·C_in)` with a kernel
    /// stored as `(L·C_in) x C_out`, row `ℓ·C_in + c`.
    pub fn tangent_conv(&mut self, m: Var, w: Var, b: Option<Var>, pixels: usize) -> Result<Var, EngineError> {
        let (tm, tw) = (&self.nodes[m.0].value, &self.nodes[w.0].value);
        if pixels == 0 || tm.cols % pixels != 0 || tw.rows != tm.cols {
            return shape_err(format!(
                "tangent_conv images {}x{} (L={pixels}) with kernel {}x{}",
                tm.rows, tm.cols, tw.rows, tw.cols
            ));
        }
        self.linear(m, w, b)
    }

    /// Per-point affine map `X W + b`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, EngineError> {
        self.linear(x, w, b)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, EngineError> {
        let slope = T::from_f64(slope);
        let t = &self.nodes[x.0].value;
        let data = t
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { slope * v })
            .collect();
        self.push("leaky_relu", Tensor::new(t.rows, t.cols, data), Op::LeakyRelu { x, slope })
    }

    pub fn pool(&mut self, x: Var, plan: &'a PoolPlan, mode: PoolMode) -> Result<Var, EngineError> {
        let t = &self.nodes[x.0].value;
        if plan.fine_len() != t.rows {
            return shape_err(format!("pool plan for {} points applied to {}", plan.fine_len(), t.rows));
        }
        let c = t.cols;
        let rows = plan.rows();
        let mut out = vec![T::zero(); rows * c];
        match mode {
            PoolMode::Average => {
                par::for_each_row_mut(&mut out, c, |r, dst| {
                    let members = plan.row(r);
                    for &m in members {
                        for (d, &s) in dst.iter_mut().zip(t.row(m as usize)) {
                            *d = *d + s;
                        }
                    }
                    let inv = T::one() / T::from_f64(members.len() as f64);
                    dst.iter_mut().for_each(|d| *d = *d * inv);
                });
                self.push("pool", Tensor::new(rows, c, out), Op::PoolAvg { x, plan })
            }
            PoolMode::Max => {
                let mut argmax = vec![0u32; rows * c];
                for r in 0..rows {
                    let members = plan.row(r);
                    for ch in 0..c {
                        // members ascend, so strict > keeps the smallest index on ties
                        let mut best = members[0];
                        for &m in &members[1..] {
                            if t.data[m as usize * c + ch] > t.data[best as usize * c + ch] {
                                best = m;
                            }
                        }
                        argmax[r * c + ch] = best;
                        out[r * c + ch] = t.data[best as usize * c + ch];
                    }
                }
                self.push("pool", Tensor::new(rows, c, out), Op::PoolMax { x, argmax })
            }
        }
    }

    /// Copy every coarse row to the fine points it was pooled from.
    pub fn unpool(&mut self, x: Var, plan: &'a PoolPlan) -> Result<Var, EngineError> {
        let t = &self.nodes[x.0].value;
        if plan.rows() != t.rows {
            return shape_err(format!("unpool plan with {} rows applied to {}", plan.rows(), t.rows));
        }
        let c = t.cols;
        let mut out = vec![T::zero(); plan.fine_len() * c];
        par::for_each_row_mut(&mut out, c, |m, dst| {
            dst.copy_from_slice(t.row(plan.parent[m] as usize));
        });
        self.push("unpool", Tensor::new(plan.fine_len(), c, out), Op::Unpool { x, plan })
    }

    /// Channel concatenation, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows != tb.rows {
            return shape_err(format!("concat of {} and {} rows", ta.rows, tb.rows));
        }
        let cols = ta.cols + tb.cols;
        let mut out = Vec::with_capacity(ta.rows * cols);
        for n in 0..ta.rows {
            out.extend_from_slice(ta.row(n));
            out.extend_from_slice(tb.row(n));
        }
        self.push("concat", Tensor::new(ta.rows, cols, out), Op::Concat { a, b })
    }

    /// Mean over labeled points of `weight[y] · -log softmax(logits)[y]`.
    /// Points labeled [`UNLABELED`] are skipped.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &'a [u32],
        class_weights: &'a [T],
    ) -> Result<Var, EngineError> {
        let t = &self.nodes[logits.0].value;
        if labels.len() != t.rows || class_weights.len() != t.cols {
            return shape_err(format!(
                "{} labels and {} class weights for {}x{} logits",
                labels.len(),
                class_weights.len(),
                t.rows,
                t.cols
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != UNLABELED && l as usize >= t.cols) {
            return Err(EngineError::IndexOutOfRange {
                index: bad as usize,
                len: t.cols,
            });
        }
        let labeled = labels.iter().filter(|&&l| l != UNLABELED).count();
        if labeled == 0 {
            return Err(EngineError::NoLabels);
        }
        let c = t.cols;
        let mut probs = vec![T::zero(); t.data.len()];
        let mut total = 0.0f64;
        for n in 0..t.rows {
            let row = t.row(n);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[n * c..(n + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                z = z + *p;
            }
            probs[n * c..(n + 1) * c].iter_mut().for_each(|p| *p = *p / z);
            let y = labels[n];
            if y != UNLABELED {
                let nll = z.ln() - (row[y as usize] - max);
                total += class_weights[y as usize].as_f64() * nll.as_f64();
            }
        }
        let loss = T::from_f64(total / labeled as f64);
        self.push(
            "cross_entropy",
            Tensor::new(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                labels,
                class_weights,
                probs,
                labeled,
            },
        )
    }

    /// Scalar `Σ coeffs ⊙ x`; handy for probing gradients.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &'a [T]) -> Result<Var, EngineError> {
        let t = &self.nodes[x.0].value;
        if coeffs.len() != t.data.len() {
            return shape_err(format!("{} coefficients for {} entries", coeffs.len(), t.data.len()));
        }
        let s = t.data.iter().zip(coeffs).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum();
        self.push("weighted_sum", Tensor::new(1, 1, vec![T::from_f64(s)]), Op::WeightedSum { x, coeffs })
    }

    /// Gradients of the scalar `output` with respect to every value.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, EngineError> {
        let out = &self.nodes[output.0].value;
        if out.data.len() != 1 {
            return Err(EngineError::NotScalar {
                rows: out.rows,
                cols: out.cols,
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(EngineError::NonFinite {
                    op: "backward",
                    detail: format!("gradient of node {i}"),
                });
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let len_of = |v: Var| self.nodes[v.0].value.data.len();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Gather { x, index } => {
                let c = self.nodes[x.0].value.cols;
                let dx = add_into(&mut grads[x.0], len_of(*x));
                for (slot, &src) in index.iter().enumerate() {
                    let from = &g[slot * c..(slot + 1) * c];
                    let to = &mut dx[src as usize * c..(src as usize + 1) * c];
                    for (t, &f) in to.iter_mut().zip(from) {
                        *t = *t + f;
                    }
                }
            }
            Op::Mix {
                inputs,
                weights,
                pixels,
            } => {
                let cols = node.value.cols;
                let c = cols / pixels;
                for (v, w) in inputs.iter().zip(weights) {
                    let dx = add_into(&mut grads[v.0], len_of(*v));
                    par::for_each_row_mut(dx, cols, |n, row| {
                        for l in 0..*pixels {
                            let h = w[n * pixels + l];
                            for k in l * c..(l + 1) * c {
                                row[k] = row[k] + h * g[n * cols + k];
                            }
                        }
                    });
                }
            }
            Op::ConcatPixels { a, b, pixels } => {
                let cols = node.value.cols;
                let ca = self.nodes[a.0].value.cols / pixels;
                let cb = self.nodes[b.0].value.cols / pixels;
                for (v, off, width) in [(*a, 0, ca), (*b, ca, cb)] {
                    let dx = add_into(&mut grads[v.0], len_of(v));
                    par::for_each_row_mut(dx, pixels * width, |n, row| {
                        for l in 0..*pixels {
                            let src = n * cols + l * (ca + cb) + off;
                            for k in 0..width {
                                row[l * width + k] = row[l * width + k] + g[src + k];
                            }
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (rows, k, n) = (tx.rows, tw.rows, tw.cols);
                // dX += G Wᵀ
                let dx = add_into(&mut grads[x.0], rows * k);
                par::for_each_chunk_mut(dx, k, |first, chunk| {
                    let r = chunk.len() / k.max(1);
                    let gs = &g[first * n..(first + r) * n];
                    T::gemm(r, n, k, T::one(), gs, n as isize, 1, &tw.data, 1, n as isize, T::one(), chunk, k as isize, 1);
                });
                // dW += Xᵀ G, accumulated over fixed row blocks in order
                let dw = par::chunked_reduce(
                    rows,
                    |range| {
                        let mut part = vec![T::zero(); k * n];
                        let r = range.len();
                        let xs = &tx.data[range.start * k..range.end * k];
                        let gs = &g[range.start * n..range.end * n];
                        T::gemm(k, r, n, T::one(), xs, 1, k as isize, gs, n as isize, 1, T::zero(), &mut part, n as isize, 1);
                        part
                    },
                    vec![T::zero(); k * n],
                    |mut acc, part| {
                        acc.iter_mut().zip(&part).for_each(|(a, &p)| *a = *a + p);
                        acc
                    },
                );
                let slot = add_into(&mut grads[w.0], k * n);
                slot.iter_mut().zip(&dw).for_each(|(a, &d)| *a = *a + d);
                if let Some(b) = b {
                    let db = add_into(&mut grads[b.0], n);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xs = &self.nodes[x.0].value.data;
                let dx = add_into(&mut grads[x.0], xs.len());
                for ((d, &v), &gv) in dx.iter_mut().zip(xs).zip(g) {
                    *d = *d + if v > T::zero() { gv } else { *slope * gv };
                }
            }
            Op::PoolAvg { x, plan } => {
                let c = node.value.cols;
                let dx = add_into(&mut grads[x.0], len_of(*x));
                par::for_each_row_mut(dx, c, |m, row| {
                    let r = plan.parent[m] as usize;
                    let count = (plan.offsets[r + 1] - plan.offsets[r]) as f64;
                    let inv = T::one() / T::from_f64(count);
                    for (d, &gv) in row.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d = *d + gv * inv;
                    }
                });
            }
            Op::PoolMax { x, argmax } => {
                let c = node.value.cols;
                let dx = add_into(&mut grads[x.0], len_of(*x));
                for (slot, &m) in argmax.iter().enumerate() {
                    let at = m as usize * c + slot % c;
                    dx[at] = dx[at] + g[slot];
                }
            }
            Op::Unpool { x, plan } => {
                let c = node.value.cols;
                let dx = add_into(&mut grads[x.0], len_of(*x));
                par::for_each_row_mut(dx, c, |r, row| {
                    for &m in plan.row(r) {
                        for (d, &gv) in row.iter_mut().zip(&g[m as usize * c..(m as usize + 1) * c]) {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let cols = node.value.cols;
                let ca = self.nodes[a.0].value.cols;
                for (v, off, width) in [(*a, 0, ca), (*b, ca, cols - ca)] {
                    let dx = add_into(&mut grads[v.0], len_of(v));
                    if width == 0 {
                        continue;
                    }
                    for (n, row) in dx.chunks_mut(width).enumerate() {
                        for (d, &gv) in row.iter_mut().zip(&g[n * cols + off..n * cols + off + width]) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                class_weights,
                probs,
                labeled,
            } => {
                let c = self.nodes[logits.0].value.cols;
                let scale = g[0] / T::from_f64(*labeled as f64);
                let dx = add_into(&mut grads[logits.0], probs.len());
                for (n, &y) in labels.iter().enumerate() {
                    if y == UNLABELED {
                        continue;
                    }
                    let w = class_weights[y as usize] * scale;
                    for k in 0..c {
                        let onehot = if k == y as usize { T::one() } else { T::zero() };
                        dx[n * c + k] = dx[n * c + k] + w * (probs[n * c + k] - onehot);
                    }
                }
            }
            Op::WeightedSum { x, coeffs } => {
                let dx = add_into(&mut grads[x.0], coeffs.len());
                for (d, &k) in dx.iter_mut().zip(coeffs.iter()) {
                    *d = *d + k * g[0];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
