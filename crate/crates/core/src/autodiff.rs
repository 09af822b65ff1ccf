//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`Graph`]; node indices are a valid
//! topological order, so [`Graph::backward`] simply walks them in reverse.
//! Gradients accumulate into per-node buffers, and parameter leaves can be
//! flushed into a [`Params`](crate::params::Params) store afterwards.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

/// Pointwise binary operations on equal shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(usize),
    Affine {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
        cols: Vec<F>,
    },
    Unary {
        x: Var,
        act: Activation,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Sum {
        x: Var,
    },
    MeanRows {
        x: Var,
        rows: usize,
    },
    SoftmaxRows {
        x: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        in_cols: usize,
    },
    RepeatRows {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<u32>,
    },
    L2NormScale {
        x: Var,
        gamma: Var,
        norms: Vec<F>,
        channels: usize,
    },
    Attend {
        slices: Var,
        weights: Var,
    },
    CrossEntropy {
        scores: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    SmoothL1 {
        deltas: Var,
        /// (row, column of the predicted delta, residual)
        terms: Vec<(usize, usize, F)>,
        norm: F,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    height: usize,
    width: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation. Single use: one backward pass per graph.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn values(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated at `v` by [`Graph::backward`]. Nodes that no
    /// path from the loss reaches report `None`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient at `v`, with unreached nodes reported as exact zeros.
    pub fn grad_or_zero(&self, v: Var) -> Vec<F> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); self.nodes[v.0].value.numel()],
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose requires-grad flag is taken from the tensor.
    pub fn input(&mut self, t: Tensor<F>) -> Result<Var> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf tagged with the index of a parameter in an external store.
    pub(crate) fn param_leaf(&mut self, index: usize, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Param(index), true)
    }

    /// `(param index, gradient)` for every parameter leaf reached by backward.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (usize, &[F])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(i), Some(g)) => Some((*i, g.as_slice())),
            _ => None,
        })
    }

    // ── forward operations ─────────────────────────────────────────────

    /// `y = x·Wᵀ + b` over the last axis of `x`; `W` is `[n_out × n_in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 || xs.last() != ws.get(1) {
            return Err(shape_err("affine", &xs, &ws));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if bs != [n_out] {
            return Err(shape_err("affine bias", &ws, &bs));
        }
        let rows = self.value(x).numel() / n_in;
        let mut out = vec![F::zero(); rows * n_out];
        gemm(
            rows,
            n_in,
            n_out,
            self.values(x),
            false,
            self.values(w),
            true,
            F::zero(),
            &mut out,
        );
        let bias = self.values(b);
        for row in out.chunks_mut(n_out) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let rg = self.rg(&[x, w, b]);
        self.push(
            Tensor::new(shape, out)?,
            Op::Affine {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            },
            rg,
        )
    }

    /// Per-location channel mixing of an `[H × W × C_in]` cube.
    pub fn conv1x1(&mut self, cube: Var, w: Var, b: Var) -> Result<Var> {
        let cs = self.shape(cube).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || cs.last() != ws.get(1) {
            return Err(Error::Shape {
                op: "conv1x1 channels",
                left: cs,
                right: ws,
            });
        }
        self.affine(cube, w, b)
    }

    /// Stride-1 "same" convolution of an `[H × W × C_in]` cube with odd
    /// square kernels; `w` is `[C_out × (k·k·C_in)]` laid out as
    /// `(ky, kx, c_in)`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || kernel.is_multiple_of(2) {
            return Err(shape_err("conv2d input", &xs, &[kernel]));
        }
        let (height, width, c_in) = (xs[0], xs[1], xs[2]);
        let patch = kernel * kernel * c_in;
        if ws.len() != 2 || ws[1] != patch {
            return Err(shape_err("conv2d weight", &ws, &[patch]));
        }
        let c_out = ws[0];
        if self.shape(b) != [c_out] {
            return Err(shape_err("conv2d bias", &ws, self.shape(b)));
        }
        let cols = im2col(self.values(x), height, width, c_in, kernel);
        let pixels = height * width;
        let mut out = vec![F::zero(); pixels * c_out];
        gemm(
            pixels,
            patch,
            c_out,
            &cols,
            false,
            self.values(w),
            true,
            F::zero(),
            &mut out,
        );
        let bias = self.values(b);
        for row in out.chunks_mut(c_out) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, w, b]);
        let dims = ConvDims {
            height,
            width,
            c_in,
            c_out,
            kernel,
        };
        let cols = if self.nodes[w.0].requires_grad { cols } else { Vec::new() };
        self.push(
            Tensor::new([height, width, c_out], out)?,
            Op::Conv2d { x, w, b, dims, cols },
            rg,
        )
    }

    pub fn unary(&mut self, x: Var, act: Activation) -> Result<Var> {
        let t = self.value(x);
        let vals: Vec<F> = match act {
            Activation::Sigmoid => t.values().iter().map(|&v| sigmoid(v)).collect(),
            Activation::Tanh => t.values().iter().map(|v| v.tanh()).collect(),
            Activation::Relu => t.values().iter().map(|&v| v.max(F::zero())).collect(),
        };
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, vals)?, Op::Unary { x, act }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Activation::Relu)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(
                match kind {
                    Binary::Add => "add",
                    Binary::Mul => "mul",
                },
                sa,
                sb,
            ));
        }
        let shape = sa.to_vec();
        let vals = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Mul => x * y,
            })
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, vals)?, Op::Binary { a, b, kind }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let vals = t.values().iter().map(|&v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, vals)?, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values(x).iter().fold(F::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Column means of a `[rows × cols]` view; returns `[cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let rows = t.rows();
        let mut acc = vec![F::zero(); cols];
        for row in t.values().chunks(cols) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = F::one() / F::from_f64(rows as f64);
        acc.iter_mut().for_each(|a| *a = *a * inv);
        let rg = self.rg(&[x]);
        self.push(Tensor::new([cols], acc)?, Op::MeanRows { x, rows }, rg)
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.values().chunks(cols) {
            softmax_into(row, &mut out);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { x }, rg)
    }

    /// Concatenation along the last axis. All parts must share leading extents.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        self.push(
            Tensor::new(shape, out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        )
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let in_cols = *s.last().unwrap();
        if len == 0 || start + len > in_cols {
            return Err(shape_err("slice", &s, &[start, len]));
        }
        let out: Vec<F> = self
            .values(x)
            .chunks(in_cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::SliceCols { x, start, in_cols }, rg)
    }

    /// Stacks `times` copies of a vector into `[times × n]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let n = self.value(x).numel();
        let mut out = Vec::with_capacity(n * times);
        for _ in 0..times {
            out.extend_from_slice(self.values(x));
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new([times, n], out)?, Op::RepeatRows { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape { x }, rg)
    }

    /// `out[i] = x[index[i]]`; the backward pass scatter-adds. Max pooling
    /// of every flavour is expressed through this with argmax indices.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, shape: &[usize]) -> Result<Var> {
        let src = self.values(x);
        let n = src.len();
        if index.iter().any(|&i| i as usize >= n) {
            return Err(Error::Contract(format!("gather index out of range for {n} elements")));
        }
        let out: Vec<F> = index.iter().map(|&i| src[i as usize]).collect();
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Gather { x, index }, rg)
    }

    /// Each row of `x` divided by its own L2 norm, then column `j` scaled by
    /// `gamma[j % channels]`. All-zero rows map to zeros.
    pub fn l2_normalize_scale(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let channels = self.value(gamma).numel();
        let cols = *xs.last().unwrap();
        if self.shape(gamma).len() != 1 || !cols.is_multiple_of(channels) {
            return Err(shape_err("l2_normalize_scale", &xs, self.shape(gamma)));
        }
        let g = self.values(gamma);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.values(x).chunks(cols) {
            let norm = row.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt();
            norms.push(norm);
            if norm > F::zero() {
                out.extend(row.iter().enumerate().map(|(j, &v)| v / norm * g[j % channels]));
            } else {
                out.extend(std::iter::repeat_n(F::zero(), cols));
            }
        }
        let rg = self.rg(&[x, gamma]);
        self.push(
            Tensor::new(xs, out)?,
            Op::L2NormScale {
                x,
                gamma,
                norms,
                channels,
            },
            rg,
        )
    }

    /// Expectation of the rows of `slices` (`[n × D]`) under the
    /// distribution `weights` (`n` entries on the simplex).
    pub fn attend(&mut self, slices: Var, weights: Var) -> Result<Var> {
        let ss = self.shape(slices).to_vec();
        if ss.len() != 2 || self.value(weights).numel() != ss[0] {
            return Err(shape_err("attend", &ss, self.shape(weights)));
        }
        let w = self.values(weights);
        let total = w.iter().fold(0.0, |acc, v| acc + v.as_f64());
        if w.iter().any(|v| v.as_f64() < 0.0) || (total - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "attention weights must lie on the simplex (sum {total})"
            )));
        }
        let d = ss[1];
        let mut out = vec![F::zero(); d];
        for (row, &wi) in self.values(slices).chunks(d).zip(w) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += wi * v;
            }
        }
        let rg = self.rg(&[slices, weights]);
        self.push(Tensor::new([d], out)?, Op::Attend { slices, weights }, rg)
    }

    /// Mean softmax cross-entropy of `[R × C]` scores against labels.
    pub fn cross_entropy(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(scores);
        let c = t.cols();
        if t.rows() != labels.len() {
            return Err(shape_err("cross_entropy", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&g| g >= c) {
            return Err(Error::Contract(format!("label {bad} outside 0..{c}")));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut total = F::zero();
        for (row, &g) in t.values().chunks(c).zip(labels) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            total += lse - row[g];
            softmax_into(row, &mut probs);
        }
        let n = F::from_f64(labels.len() as f64);
        let rg = self.rg(&[scores]);
        self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                scores,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Smooth-L1 box loss summed over foreground rows and divided by `norm`.
    ///
    /// `deltas` is `[R × 4·K]`; row `r` with `labels[r] = g ≥ 1` compares
    /// columns `4(g−1)..4g` with `targets[r]`. Background rows contribute
    /// nothing, not even a zero gradient term.
    pub fn smooth_l1(
        &mut self,
        deltas: Var,
        labels: &[usize],
        targets: &[[F; 4]],
        norm: F,
    ) -> Result<Var> {
        let t = self.value(deltas);
        let cols = t.cols();
        if t.rows() != labels.len() || targets.len() != labels.len() || !cols.is_multiple_of(4) {
            return Err(shape_err("smooth_l1", t.shape(), &[labels.len(), targets.len()]));
        }
        let classes = cols / 4;
        let mut terms = Vec::new();
        let mut total = F::zero();
        for (r, (&g, tgt)) in labels.iter().zip(targets).enumerate() {
            if g == 0 {
                continue;
            }
            if g > classes {
                return Err(Error::Contract(format!("label {g} outside 0..={classes}")));
            }
            for (c, &tc) in tgt.iter().enumerate() {
                let col = 4 * (g - 1) + c;
                let diff = t.values()[r * cols + col] - tc;
                total += smooth_l1_value(diff);
                terms.push((r, col, diff));
            }
        }
        let rg = self.rg(&[deltas]);
        self.push(
            Tensor::scalar(total / norm),
            Op::SmoothL1 {
                deltas,
                terms,
                norm,
            },
            rg,
        )
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Back-propagates from a one-element `loss`, accumulating gradients.
    /// Nodes are visited in reverse creation order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            propagate(node, grad, before);
        }
        Ok(())
    }
}

fn sigmoid<F: Element>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

pub(crate) fn smooth_l1_value<F: Element>(x: F) -> F {
    let half = F::from_f64(0.5);
    if x.abs() < F::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

fn smooth_l1_slope<F: Element>(x: F) -> F {
    if x.abs() < F::one() {
        x
    } else if x > F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

pub(crate) fn softmax_into<F: Element>(row: &[F], out: &mut Vec<F>) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let start = out.len();
    let mut denom = F::zero();
    for &v in row {
        let e = (v - max).exp();
        denom += e;
        out.push(e);
    }
    for o in &mut out[start..] {
        *o = *o / denom;
    }
}

fn im2col<F: Element>(x: &[F], height: usize, width: usize, c: usize, k: usize) -> Vec<F> {
    let half = (k / 2) as isize;
    let patch = k * k * c;
    let mut cols = vec![F::zero(); height * width * patch];
    for y in 0..height {
        for xx in 0..width {
            let base = (y * width + xx) * patch;
            for ky in 0..k {
                let sy = y as isize + ky as isize - half;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - half;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let src = (sy as usize * width + sx as usize) * c;
                    let dst = base + (ky * k + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im_add<F: Element>(cols: &[F], dims: ConvDims, dx: &mut [F]) {
    let ConvDims {
        height,
        width,
        c_in: c,
        kernel: k,
        ..
    } = dims;
    let half = (k / 2) as isize;
    let patch = k * k * c;
    for y in 0..height {
        for xx in 0..width {
            let base = (y * width + xx) * patch;
            for ky in 0..k {
                let sy = y as isize + ky as isize - half;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - half;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let dst = (sy as usize * width + sx as usize) * c;
                    let src = base + (ky * k + kx) * c;
                    for (d, &s) in dx[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Adds `delta` into the gradient of node `v` if that node wants one.
fn add_grad<F: Element>(nodes: &mut [Node<F>], v: Var, delta: &[F]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match node.grad.as_mut() {
        Some(g) => {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => node.grad = Some(delta.to_vec()),
    }
}

fn wants<F>(nodes: &[Node<F>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn propagate<F: Element>(node: &Node<F>, dy: &[F], nodes: &mut [Node<F>]) {
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::Affine {
            x,
            w,
            b,
            rows,
            n_in,
            n_out,
        } => {
            if wants(nodes, x) {
                let mut dx = vec![F::zero(); rows * n_in];
                gemm(rows, n_out, n_in, dy, false, nodes[w.0].value.values(), false, F::zero(), &mut dx);
                add_grad(nodes, x, &dx);
            }
            if wants(nodes, w) {
                let mut dw = vec![F::zero(); n_out * n_in];
                gemm(n_out, rows, n_in, dy, true, nodes[x.0].value.values(), false, F::zero(), &mut dw);
                add_grad(nodes, w, &dw);
            }
            if wants(nodes, b) {
                let mut db = vec![F::zero(); n_out];
                for row in dy.chunks(n_out) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                add_grad(nodes, b, &db);
            }
        }
        Op::Conv2d { x, w, b, dims, cols } => {
            let (x, w, b, dims) = (*x, *w, *b, *dims);
            let pixels = dims.height * dims.width;
            let patch = dims.kernel * dims.kernel * dims.c_in;
            if wants(nodes, w) {
                let mut dw = vec![F::zero(); dims.c_out * patch];
                gemm(dims.c_out, pixels, patch, dy, true, cols, false, F::zero(), &mut dw);
                add_grad(nodes, w, &dw);
            }
            if wants(nodes, b) {
                let mut db = vec![F::zero(); dims.c_out];
                for row in dy.chunks(dims.c_out) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                add_grad(nodes, b, &db);
            }
            if wants(nodes, x) {
                let mut dcols = vec![F::zero(); pixels * patch];
                gemm(pixels, dims.c_out, patch, dy, false, nodes[w.0].value.values(), false, F::zero(), &mut dcols);
                let mut dx = vec![F::zero(); pixels * dims.c_in];
                col2im_add(&dcols, dims, &mut dx);
                add_grad(nodes, x, &dx);
            }
        }
        &Op::Unary { x, act } => {
            let y = node.value.values();
            let dx: Vec<F> = match act {
                Activation::Sigmoid => y
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (F::one() - s))
                    .collect(),
                Activation::Tanh => y.iter().zip(dy).map(|(&t, &g)| g * (F::one() - t * t)).collect(),
                Activation::Relu => y
                    .iter()
                    .zip(dy)
                    .map(|(&r, &g)| if r > F::zero() { g } else { F::zero() })
                    .collect(),
            };
            add_grad(nodes, x, &dx);
        }
        &Op::Binary { a, b, kind } => match kind {
            Binary::Add => {
                add_grad(nodes, a, dy);
                add_grad(nodes, b, dy);
            }
            Binary::Mul => {
                if wants(nodes, a) {
                    let da: Vec<F> = dy.iter().zip(nodes[b.0].value.values()).map(|(&g, &v)| g * v).collect();
                    add_grad(nodes, a, &da);
                }
                if wants(nodes, b) {
                    let db: Vec<F> = dy.iter().zip(nodes[a.0].value.values()).map(|(&g, &v)| g * v).collect();
                    add_grad(nodes, b, &db);
                }
            }
        },
        &Op::Scale { x, factor } => {
            let dx: Vec<F> = dy.iter().map(|&g| g * factor).collect();
            add_grad(nodes, x, &dx);
        }
        &Op::Sum { x } => {
            let dx = vec![dy[0]; nodes[x.0].value.numel()];
            add_grad(nodes, x, &dx);
        }
        &Op::MeanRows { x, rows } => {
            let inv = F::one() / F::from_f64(rows as f64);
            let scaled: Vec<F> = dy.iter().map(|&g| g * inv).collect();
            let mut dx = Vec::with_capacity(rows * dy.len());
            for _ in 0..rows {
                dx.extend_from_slice(&scaled);
            }
            add_grad(nodes, x, &dx);
        }
        &Op::SoftmaxRows { x } => {
            let y = node.value.values();
            let cols = node.value.cols();
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(cols).zip(dy.chunks(cols)) {
                let dot = yr.iter().zip(gr).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                dx.extend(yr.iter().zip(gr).map(|(&a, &g)| a * (g - dot)));
            }
            add_grad(nodes, x, &dx);
        }
        Op::ConcatCols { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = dy.len() / total;
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if wants(nodes, p) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                    }
                    add_grad(nodes, p, &dp);
                }
                offset += w;
            }
        }
        &Op::SliceCols { x, start, in_cols } => {
            let len = node.value.cols();
            let mut dx = vec![F::zero(); nodes[x.0].value.numel()];
            for (r, g) in dy.chunks(len).enumerate() {
                dx[r * in_cols + start..r * in_cols + start + len].copy_from_slice(g);
            }
            add_grad(nodes, x, &dx);
        }
        &Op::RepeatRows { x } => {
            let n = nodes[x.0].value.numel();
            let mut dx = vec![F::zero(); n];
            for row in dy.chunks(n) {
                for (d, &g) in dx.iter_mut().zip(row) {
                    *d += g;
                }
            }
            add_grad(nodes, x, &dx);
        }
        &Op::Reshape { x } => add_grad(nodes, x, dy),
        Op::Gather { x, index } => {
            let x = *x;
            let mut dx = vec![F::zero(); nodes[x.0].value.numel()];
            for (&i, &g) in index.iter().zip(dy) {
                dx[i as usize] += g;
            }
            add_grad(nodes, x, &dx);
        }
        Op::L2NormScale {
            x,
            gamma,
            norms,
            channels,
        } => {
            let (x, gamma, channels) = (*x, *gamma, *channels);
            let xv = nodes[x.0].value.values();
            let gv = nodes[gamma.0].value.values();
            let cols = nodes[x.0].value.cols();
            let mut dx = vec![F::zero(); xv.len()];
            let mut dgamma = vec![F::zero(); channels];
            for (r, &norm) in norms.iter().enumerate() {
                if norm <= F::zero() {
                    continue;
                }
                let xr = &xv[r * cols..(r + 1) * cols];
                let gr = &dy[r * cols..(r + 1) * cols];
                // u = x / n, y = gamma ⊙ u
                let mut dot = F::zero();
                for j in 0..cols {
                    let u = xr[j] / norm;
                    let du = gr[j] * gv[j % channels];
                    dgamma[j % channels] += gr[j] * u;
                    dot += u * du;
                }
                let dxr = &mut dx[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    let u = xr[j] / norm;
                    let du = gr[j] * gv[j % channels];
                    dxr[j] = (du - u * dot) / norm;
                }
            }
            if wants(nodes, x) {
                add_grad(nodes, x, &dx);
            }
            if wants(nodes, gamma) {
                add_grad(nodes, gamma, &dgamma);
            }
        }
        &Op::Attend { slices, weights } => {
            let d = dy.len();
            if wants(nodes, slices) {
                let w = nodes[weights.0].value.values();
                let mut ds = Vec::with_capacity(w.len() * d);
                for &wi in w {
                    ds.extend(dy.iter().map(|&g| g * wi));
                }
                add_grad(nodes, slices, &ds);
            }
            if wants(nodes, weights) {
                let dw: Vec<F> = nodes[slices.0]
                    .value
                    .values()
                    .chunks(d)
                    .map(|row| row.iter().zip(dy).fold(F::zero(), |acc, (&v, &g)| acc + v * g))
                    .collect();
                add_grad(nodes, weights, &dw);
            }
        }
        Op::CrossEntropy {
            scores,
            labels,
            probs,
        } => {
            let scale = dy[0] / F::from_f64(labels.len() as f64);
            let cols = probs.len() / labels.len();
            let mut dx: Vec<F> = probs.iter().map(|&p| p * scale).collect();
            for (r, &g) in labels.iter().enumerate() {
                dx[r * cols + g] = dx[r * cols + g] - scale;
            }
            add_grad(nodes, *scores, &dx);
        }
        Op::SmoothL1 {
            deltas,
            terms,
            norm,
        } => {
            let cols = nodes[deltas.0].value.cols();
            let mut dx = vec![F::zero(); nodes[deltas.0].value.numel()];
            let scale = dy[0] / *norm;
            for &(r, c, diff) in terms {
                dx[r * cols + c] += smooth_l1_slope(diff) * scale;
            }
            add_grad(nodes, *deltas, &dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn affine_identity_and_bias_passthrough() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.values(y), &[1.0, 2.0]);

        let x = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let w = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let b = g.constant(t(&[1], &[5.0])).unwrap();
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.values(y), &[5.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3])).unwrap();
        let w = g.constant(Tensor::zeros([2, 2])).unwrap();
        let b = g.constant(Tensor::zeros([2])).unwrap();
        let err = g.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0])).unwrap();
        let s = g.sigmoid(z).unwrap();
        let th = g.tanh(z).unwrap();
        assert_eq!(g.values(s), &[0.5]);
        assert_eq!(g.values(th), &[0.0]);
        let a = g.constant(t(&[2], &[2.0, 3.0])).unwrap();
        let b = g.constant(t(&[2], &[4.0, 5.0])).unwrap();
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.values(m), &[8.0, 15.0]);
        let c = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_no_overflow() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([4])).unwrap();
        let s = g.softmax(z).unwrap();
        assert_eq!(g.values(s), &[0.25; 4]);
        let big = g.constant(t(&[2], &[1000.0, 0.0])).unwrap();
        let s = g.softmax(big).unwrap();
        let v = g.values(s);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn conv1x1_identity_and_constant() {
        let mut g = Graph::<f64>::new();
        let cube = g.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(Tensor::zeros([2])).unwrap();
        let y = g.conv1x1(cube, w, b).unwrap();
        assert_eq!(g.values(y), g.values(cube));
        assert_eq!(g.shape(y), &[2, 2, 2]);

        let cube = g.constant(Tensor::full([3, 3, 4], 2.5)).unwrap();
        let w = g.constant(Tensor::full([1, 4], 1.0)).unwrap();
        let b = g.constant(Tensor::zeros([1])).unwrap();
        let y = g.conv1x1(cube, w, b).unwrap();
        assert!(g.values(y).iter().all(|&v| v == 10.0));

        let w_bad = g.constant(Tensor::full([1, 3], 1.0)).unwrap();
        assert!(g.conv1x1(cube, w_bad, b).is_err());
    }

    #[test]
    fn backward_trivial_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full([2, 3], 0.7)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full([2], 1.0)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
        assert!(matches!(g.sum(x), Err(Error::GraphConsumed)));
    }

    #[test]
    fn attend_rejects_unnormalized_weights() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([3, 2], 1.0)).unwrap();
        let l = g.constant(t(&[3], &[0.5, 0.5, 0.5])).unwrap();
        assert!(matches!(g.attend(x, l), Err(Error::Contract(_))));
        let l = g.constant(t(&[3], &[1.5, -0.5, 0.0])).unwrap();
        assert!(matches!(g.attend(x, l), Err(Error::Contract(_))));
    }

    #[test]
    fn l2_normalize_zero_row_passes_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros([2, 4])).unwrap();
        let gamma = g.variable(Tensor::full([2], 3.0)).unwrap();
        let y = g.l2_normalize_scale(x, gamma).unwrap();
        assert!(g.values(y).iter().all(|&v| v == 0.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::zeros([1, 4])).unwrap();
        let l = g.cross_entropy(s, &[2]).unwrap();
        assert!((g.values(l)[0] - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(s, &[4]).is_err());
    }
}
