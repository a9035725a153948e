//! Reverse-mode tape over the fixed operator set used by the encoder and probes.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{gemm, MatMut, MatRef};
use super::{attention, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{invalid, Error, Result};
use crate::par;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MeanPool {
        x: Var,
        axis: usize,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Range<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Range<usize>>,
        probs: Vec<T>,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Tensor<T>,
        probs: Tensor<T>,
    },
    NtXent {
        z: Var,
        tau: T,
        unit: Tensor<T>,
        norms: Vec<T>,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Gelu(x) | Op::Sum(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Dropout { x, .. }
            | Op::MeanPool { x, .. }
            | Op::SegmentMean { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::NtXent { z, .. } => vec![*z],
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    pub(crate) params: Vec<Option<Tensor<T>>>,
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf created with `requires_grad = true`.
    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, t)| t)
    }
}

/// A single-use tape. Forward ops record their inputs and whatever state the
/// backward pass needs; `backward` consumes the tape.
pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    consumed: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// Checks that `segments` tile `0..rows` in order with no empty pieces.
pub(crate) fn check_segments(
    op: &'static str,
    segments: &[Range<usize>],
    rows: usize,
) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.end <= s.start {
            return Err(shape_err(
                op,
                format!("segments must tile 0..{rows} in order"),
            ));
        }
        next = s.end;
    }
    if next != rows {
        return Err(shape_err(
            op,
            format!("segments cover 0..{next}, rows = {rows}"),
        ));
    }
    Ok(())
}

/// Splits `data` into consecutive mutable pieces of the given lengths.
pub(crate) fn split_lengths_mut<'a, U>(
    mut data: &'a mut [U],
    lengths: &[usize],
) -> Vec<&'a mut [U]> {
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let (head, tail) = std::mem::take(&mut data).split_at_mut(len);
        out.push(head);
        data = tail;
    }
    out
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let x2 = x * x;
    let inner = c * (x + a * x2 * x);
    let t = inner.tanh();
    let y = half * x * (T::ONE + t);
    let dinner = c * (T::ONE + T::from_f64(3.0) * a * x2);
    let dy = half * (T::ONE + t) + half * x * (T::ONE - t * t) * dinner;
    (y, dy)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, train: bool) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            train,
            consumed: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.value(id),
            _ => node
                .value
                .as_ref()
                .expect("non-parameter nodes own their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::ONE,
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            T::ZERO,
            MatMut::row_major(out.data_mut(), m, n),
        );
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a 1-D `row` to every slice along the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(row) != [n] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(
                "softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut max = x[idx(0)];
                for j in 1..n {
                    max = max.max(x[idx(j)]);
                }
                let mut total = T::ZERO;
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Softmax { x: a, axis }, "softmax")
    }

    /// Normalises over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("affine params must be [{n}]"),
            ));
        }
        let input = self.value(x);
        let rows = input.rows();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut xhat = input.data().to_vec();
        let mut rstd = vec![T::ZERO; rows];
        {
            let mut pieces: Vec<(&mut [T], &mut T)> =
                xhat.chunks_mut(n).zip(rstd.iter_mut()).collect();
            par::for_each_mut(&mut pieces, |_, (row, r)| {
                let mean = row.iter().copied().sum::<T>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let rs = T::ONE / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * rs;
                }
                **r = rs;
            });
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout: survivors scaled by `1/(1-p)` in training, identity in eval.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64(1.0 / (1.0 - p));
        let input = self.value(x);
        let mask: Vec<T> = (0..input.len())
            .map(|_| {
                if rng.random::<f64>() >= p {
                    keep
                } else {
                    T::ZERO
                }
            })
            .collect();
        let data = input
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::new(input.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err(
                "mean_pool",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let data = self.value(x).data();
        let inv = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        self.push(out, Op::MeanPool { x, axis }, "mean_pool")
    }

    /// Row means of each segment of a `[rows × d]` matrix, giving `[segments × d]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let input = self.value(x);
        if input.rank() != 2 {
            return Err(shape_err("segment_mean", format!("{:?}", input.shape())));
        }
        check_segments("segment_mean", segments, input.shape()[0])?;
        let d = input.shape()[1];
        let mut out = vec![T::ZERO; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let dst = &mut out[s * d..(s + 1) * d];
            for r in seg.clone() {
                for (o, &v) in dst.iter_mut().zip(input.row(r)) {
                    *o += v;
                }
            }
            let inv = T::from_f64(1.0 / seg.len() as f64);
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(vec![segments.len(), d], out)?;
        self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            "segment_mean",
        )
    }

    /// Multi-head scaled dot-product attention, restricted to within each segment.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
        {
            return Err(shape_err(
                "attention",
                "q, k, v must share a 2-D shape".into(),
            ));
        }
        if heads == 0 || shape[1] % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("width {} not divisible by {heads} heads", shape[1]),
            ));
        }
        check_segments("attention", segments, shape[0])?;
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape[1],
            heads,
            segments,
        );
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            "attention",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    /// Mean over rows of `-Σ_c target·log softmax(logits)`; accepts soft targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.shape() != shape.as_slice() || shape[0] == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {shape:?}, targets {:?}", targets.shape()),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        let x = self.value(logits).data();
        let mut probs = vec![T::ZERO; b * c];
        let mut loss = T::ZERO;
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(row[0], T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                loss -= targets.data()[r * c + j] * logp;
            }
        }
        let loss = loss / T::from_f64(b as f64);
        let probs = Tensor::new(shape, probs)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Normalised-temperature cross entropy over `2N` rows ordered as
    /// `(a₁, b₁, a₂, b₂, …)`; each row's positive is its pair partner.
    pub fn ntxent(&mut self, z: Var, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(invalid(format!("temperature must be positive, got {tau}")));
        }
        let shape = self.shape(z).to_vec();
        if shape.len() != 2 || shape[0] < 2 || shape[0] % 2 != 0 {
            return Err(shape_err(
                "ntxent",
                format!("need an even number of rows, got {shape:?}"),
            ));
        }
        let (m, d) = (shape[0], shape[1]);
        let zt = self.value(z);
        let mut norms = Vec::with_capacity(m);
        let mut unit = vec![T::ZERO; m * d];
        for r in 0..m {
            let row = zt.row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::ZERO {
                return Err(invalid(format!("embedding {r} has zero norm")));
            }
            for (u, &v) in unit[r * d..(r + 1) * d].iter_mut().zip(row) {
                *u = v / norm;
            }
            norms.push(norm);
        }
        let mut sims = vec![T::ZERO; m * m];
        gemm(
            T::from_f64(1.0 / tau),
            MatRef::row_major(&unit, m, d),
            MatRef::row_major(&unit, m, d).t(),
            T::ZERO,
            MatMut::row_major(&mut sims, m, m),
        );
        let mut probs = vec![T::ZERO; m * m];
        let mut loss = T::ZERO;
        for i in 0..m {
            let row = &sims[i * m..(i + 1) * m];
            let mut max = None;
            for (kk, &s) in row.iter().enumerate() {
                if kk != i {
                    max = Some(max.map_or(s, |mx: T| mx.max(s)));
                }
            }
            let max = max.expect("at least one other row");
            let mut total = T::ZERO;
            for (kk, &s) in row.iter().enumerate() {
                if kk != i {
                    total += (s - max).exp();
                }
            }
            let lse = max + total.ln();
            for (kk, &s) in row.iter().enumerate() {
                if kk != i {
                    probs[i * m + kk] = (s - lse).exp();
                }
            }
            loss += lse - row[i ^ 1];
        }
        let loss = loss / T::from_f64(m as f64);
        self.push(
            Tensor::scalar(loss),
            Op::NtXent {
                z,
                tau: T::from_f64(tau),
                unit: Tensor::new(vec![m, d], unit)?,
                norms,
                probs: Tensor::new(vec![m, m], probs)?,
            },
            "ntxent",
        )
    }

    /// Back-propagates from a scalar `loss`. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        let mut out = Grads {
            params: (0..self.store.len()).map(|_| None).collect(),
            leaves: Vec::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut out)?;
        }
        for g in out.params.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Grads<T>,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &self.nodes[i].op {
            Op::Leaf => out.leaves.push((Var(i), g)),
            Op::Param(id) => out.params[id.0] = Some(g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(
                        T::ONE,
                        MatRef::row_major(g.data(), m, nn),
                        MatRef::row_major(self.value(*b).data(), k, nn).t(),
                        T::ZERO,
                        MatMut::row_major(da.data_mut(), m, k),
                    );
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(&[k, nn]);
                    gemm(
                        T::ONE,
                        MatRef::row_major(self.value(*a).data(), m, k).t(),
                        MatRef::row_major(g.data(), m, nn),
                        T::ZERO,
                        MatMut::row_major(db.data_mut(), k, nn),
                    );
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
                if self.wants(*a) {
                    acc(*a, g);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*row) {
                    let n = g.last_dim();
                    let mut dr = Tensor::zeros(&[n]);
                    for chunk in g.data().chunks(n) {
                        for (d, &v) in dr.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(*row, dr);
                }
                if self.wants(*a) {
                    acc(*a, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    acc(*b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| gv * gelu_parts(xv).1)
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.as_ref().expect("owned").data();
                let (outer, n, inner) = axis_split(g.shape(), *axis);
                let gd = g.data();
                let mut dx = vec![T::ZERO; gd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + ii;
                        let dot: T = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.last_dim();
                let gd = g.data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = Tensor::zeros(&[n]);
                    let mut db = Tensor::zeros(&[n]);
                    for (grow, xrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg.data_mut()[j] += grow[j] * xrow[j];
                            db.data_mut()[j] += grow[j];
                        }
                    }
                    if self.wants(*gamma) {
                        acc(*gamma, dg);
                    }
                    if self.wants(*beta) {
                        acc(*beta, db);
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let mut dx = vec![T::ZERO; gd.len()];
                    let mut pieces: Vec<_> = dx.chunks_mut(n).enumerate().collect();
                    par::for_each_mut(&mut pieces, |_, (r, drow)| {
                        let r = *r;
                        let grow = &gd[r * n..(r + 1) * n];
                        let xrow = &xhat[r * n..(r + 1) * n];
                        let mut mean_dxh = T::ZERO;
                        let mut mean_dxh_xh = T::ZERO;
                        for j in 0..n {
                            let dxh = grow[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xrow[j];
                        }
                        mean_dxh *= inv_n;
                        mean_dxh_xh *= inv_n;
                        for j in 0..n {
                            let dxh = grow[j] * gam[j];
                            drow[j] = rstd[r] * (dxh - mean_dxh - xrow[j] * mean_dxh_xh);
                        }
                    });
                    acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(&a, &b)| a * b).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::MeanPool { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let inv = T::from_f64(1.0 / n as f64);
                let gd = g.data();
                let mut dx = vec![T::ZERO; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d = s * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(shape, dx)?);
            }
            Op::SegmentMean { x, segments } => {
                let shape = self.shape(*x).to_vec();
                let d = shape[1];
                let mut dx = vec![T::ZERO; shape[0] * d];
                for (s, seg) in segments.iter().enumerate() {
                    let inv = T::from_f64(1.0 / seg.len() as f64);
                    let src = g.row(s);
                    for r in seg.clone() {
                        for (o, &v) in dx[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *o = v * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(shape, dx)?);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let shape = self.shape(*q).to_vec();
                let (dq, dk, dv) = attention::backward(
                    g.data(),
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    shape[1],
                    *heads,
                    segments,
                );
                if self.wants(*q) {
                    acc(*q, Tensor::new(shape.clone(), dq)?);
                }
                if self.wants(*k) {
                    acc(*k, Tensor::new(shape.clone(), dk)?);
                }
                if self.wants(*v) {
                    acc(*v, Tensor::new(shape, dv)?);
                }
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, c) = (probs.shape()[0], probs.shape()[1]);
                let scale = g.item() / T::from_f64(b as f64);
                let mut d = vec![T::ZERO; b * c];
                for r in 0..b {
                    let t = targets.row(r);
                    let mass: T = t.iter().copied().sum();
                    for j in 0..c {
                        d[r * c + j] = scale * (probs.data()[r * c + j] * mass - t[j]);
                    }
                }
                acc(*logits, Tensor::new(vec![b, c], d)?);
            }
            Op::NtXent {
                z,
                tau,
                unit,
                norms,
                probs,
            } => {
                let (m, d) = (unit.shape()[0], unit.shape()[1]);
                let scale = g.item() / T::from_f64(m as f64);
                // dL/dS, then symmetrise since S = U·Uᵀ/τ
                let mut ds = vec![T::ZERO; m * m];
                for r in 0..m {
                    for c in 0..m {
                        if c != r {
                            let pos = if c == (r ^ 1) { T::ONE } else { T::ZERO };
                            ds[r * m + c] = scale * (probs.data()[r * m + c] - pos);
                        }
                    }
                }
                let mut sym = vec![T::ZERO; m * m];
                for r in 0..m {
                    for c in 0..m {
                        sym[r * m + c] = ds[r * m + c] + ds[c * m + r];
                    }
                }
                let mut du = vec![T::ZERO; m * d];
                gemm(
                    T::ONE / *tau,
                    MatRef::row_major(&sym, m, m),
                    MatRef::row_major(unit.data(), m, d),
                    T::ZERO,
                    MatMut::row_major(&mut du, m, d),
                );
                let mut dz = vec![T::ZERO; m * d];
                for r in 0..m {
                    let u = unit.row(r);
                    let dur = &du[r * d..(r + 1) * d];
                    let proj: T = u.iter().zip(dur).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dz[r * d + j] = (dur[j] - u[j] * proj) / norms[r];
                    }
                }
                acc(*z, Tensor::new(vec![m, d], dz)?);
            }
        }
        Ok(())
    }
}
