//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed during a forward pass. Operations are
//! methods on the tape that return [`Var`] handles; [`Tape::backward`] walks
//! the recorded operations in exact reverse order and returns the adjoint of
//! every node that requires a gradient.
//!
//! ```
//! use pumba::autodiff::Tape;
//! use pumba::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap(), true);
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[2.0, -4.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::ssm::{self, Discretization, ScanInputs};
use crate::tensor::{self, cst, sigmoid_scalar, softplus_scalar, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LogSoftmaxMasked(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<T>,
        normalized: Tensor<T>,
    },
    Conv {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Mean(Var, Axis),
    Sum(Var),
    Concat(Vec<Var>, Axis),
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    ReverseRows(Var),
    NormalizeRows(Var, T),
    Select(Var, Vec<usize>),
    Scan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        rule: Discretization,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Allows another call to [`Tape::backward`].
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (_, cols) = self.value(x).dims2();
        if self.value(row).len() != cols {
            return Err(Error::dim(name, self.shape(x), self.shape(row)));
        }
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v = f(*v, b);
            }
        }
        Ok(value)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    /// Multiplies every row of `x` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        Ok(self.push(value, Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v + k, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(x))?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, tensor::silu_scalar, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_scalar, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v < T::zero() { T::zero() } else { v }, Op::Relu(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    /// NaN passes through so that a broken forward pass stays visible.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(
            x,
            |v| if v < lo { lo } else if v > hi { hi } else { v },
            Op::Clamp(x, lo, hi),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = tensor::softmax_rows(self.value(x));
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis restricted to entries where `mask` is
    /// true. Masked-out entries are reported as zero and receive no gradient.
    pub fn log_softmax_masked(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::Contract(format!(
                "mask has {} entries for a tensor of {}",
                mask.len(),
                xv.len()
            )));
        }
        let (rows, cols) = xv.dims2();
        let mut value = xv.clone();
        for r in 0..rows {
            let row = &mut value.data_mut()[r * cols..(r + 1) * cols];
            let m = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if row.iter().zip(m).any(|(v, &keep)| keep && v.is_nan()) {
                row.iter_mut().for_each(|v| *v = T::nan());
                continue;
            }
            if max == T::neg_infinity() {
                row.iter_mut().for_each(|v| *v = T::zero());
                continue;
            }
            let z: T = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let lse = max + z.ln();
            for (v, &keep) in row.iter_mut().zip(m) {
                *v = if keep { *v - lse } else { T::zero() };
            }
        }
        Ok(self.push(value, Op::LogSoftmaxMasked(x, mask), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let value = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let stats = tensor::layer_norm_stats(self.value(x), eps);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std: stats.inv_std,
                normalized: stats.normalized,
            },
            &[x, gain, bias],
        ))
    }

    /// Depthwise convolution along the token axis; see
    /// [`tensor::depthwise_conv1d`].
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = tensor::depthwise_conv1d(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(value, Op::Conv { x, weight, bias }, &[x, weight, bias]))
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let value = match axis {
            Axis::Rows => {
                let mut out = vec![T::zero(); cols];
                for r in 0..rows {
                    for (o, &v) in out.iter_mut().zip(xv.row_slice(r)) {
                        *o += v;
                    }
                }
                let n = cst::<T>(rows as f64);
                Tensor::new([1, cols], out.into_iter().map(|v| v / n).collect()).unwrap()
            }
            Axis::Cols => {
                let n = cst::<T>(cols as f64);
                let out = (0..rows)
                    .map(|r| xv.row_slice(r).iter().copied().sum::<T>() / n)
                    .collect();
                Tensor::new([rows, 1], out).unwrap()
            }
        };
        self.push(value, Op::Mean(x, axis), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (_, cols0) = self.value(*first).dims2();
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    if c != cols0 {
                        return Err(Error::dim("concat", self.shape(*first), self.shape(p)));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new([rows, cols0], data)?
            }
            Axis::Cols => {
                let (rows0, _) = self.value(*first).dims2();
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    if r != rows0 {
                        return Err(Error::dim("concat", self.shape(*first), self.shape(p)));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(rows0 * cols);
                for r in 0..rows0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::new([rows0, cols], data)?
            }
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        let extent = match axis {
            Axis::Rows => rows,
            Axis::Cols => cols,
        };
        if start + len > extent || len == 0 {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of range for extent {extent}",
                start + len
            )));
        }
        let value = match axis {
            Axis::Rows => tensor::slice_rows(self.value(x), start, len),
            Axis::Cols => tensor::slice_cols(self.value(x), start, len),
        };
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let value = tensor::reverse_rows(self.value(x));
        self.push(value, Op::ReverseRows(x), &[x])
    }

    /// Scales each row to unit L2 norm (`eps` guards the zero row).
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let mut value = xv.clone();
        for r in 0..rows {
            let row = &mut value.data_mut()[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        self.push(value, Op::NormalizeRows(x, eps), &[x])
    }

    /// Gathers entries of a flattened tensor into a 1-D result.
    pub fn select(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Contract(format!(
                "select index {bad} out of range for {} entries",
                xv.len()
            )));
        }
        let value = Tensor::new(
            [indices.len()],
            indices.iter().map(|&i| xv.data()[i]).collect(),
        )?;
        Ok(self.push(value, Op::Select(x, indices), &[x]))
    }

    /// Fused selective scan; see [`ssm::scan`] for the recurrence.
    ///
    /// `x` and `delta` are `[T×D]`, `a` is `[D×S]` (already negative),
    /// `b` and `c` are `[T×S]`, `d_skip` is `[D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        rule: Discretization,
    ) -> Result<Var> {
        let inputs = ScanInputs {
            x: self.value(x),
            delta: self.value(delta),
            a: self.value(a),
            b: self.value(b),
            c: self.value(c),
            d_skip: self.value(d_skip),
            rule,
        };
        inputs.validate()?;
        let value = ssm::scan(&inputs, None);
        Ok(self.push(
            value,
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d_skip,
                rule,
            },
            &[x, delta, a, b, c, d_skip],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = if g.shape() != self.shape(v) {
            g.reshape(self.shape(v).to_vec())
                .expect("gradient element count matches its node")
        } else {
            g
        };
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            g.zip_map(a, "backward", |x, y| f(x, y))
                .expect("adjoint shape matches value")
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, zip(val(*b), &|gv, bv| gv * bv));
                self.accumulate(grads, *b, zip(val(*a), &|gv, av| gv * av));
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(x, row) => {
                let (_, cols) = g.dims2();
                let r = val(*row).data();
                let mut gx = g.clone();
                for chunk in gx.data_mut().chunks_mut(cols) {
                    for (v, &s) in chunk.iter_mut().zip(r) {
                        *v = *v * s;
                    }
                }
                self.accumulate(grads, *x, gx);
                let prod = zip(val(*x), &|gv, xv| gv * xv);
                self.accumulate(grads, *row, column_sums(&prod));
            }
            Op::Scale(x, k) => {
                let k = *k;
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, tensor::matmul_nt(g, val(*b)));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, tensor::matmul_tn(val(*a), g));
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, tensor::transpose(g).expect("matrix adjoint"));
            }
            Op::Exp(x) => self.accumulate(grads, *x, zip(out, &|gv, y| gv * y)),
            Op::Ln(x) => self.accumulate(grads, *x, zip(val(*x), &|gv, xv| gv / xv)),
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, zip(out, &|gv, y| gv * y * (T::one() - y)))
            }
            Op::Silu(x) => self.accumulate(
                grads,
                *x,
                zip(val(*x), &|gv, xv| {
                    let s = sigmoid_scalar(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                }),
            ),
            Op::Softplus(x) => {
                self.accumulate(grads, *x, zip(val(*x), &|gv, xv| gv * sigmoid_scalar(xv)))
            }
            Op::Relu(x) => self.accumulate(
                grads,
                *x,
                zip(val(*x), &|gv, xv| if xv > T::zero() { gv } else { T::zero() }),
            ),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *x,
                    zip(val(*x), &|gv, xv| {
                        if xv < lo || xv > hi {
                            T::zero()
                        } else {
                            gv
                        }
                    }),
                )
            }
            Op::Softmax(x) => {
                let (rows, cols) = out.dims2();
                let mut gx = out.clone();
                for r in 0..rows {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmaxMasked(x, mask) => {
                let (rows, cols) = out.dims2();
                let mut gx = Tensor::zeros(out.shape().to_vec());
                for r in 0..rows {
                    let range = r * cols..(r + 1) * cols;
                    let m = &mask[range.clone()];
                    let gsum: T = g.data()[range.clone()]
                        .iter()
                        .zip(m)
                        .filter(|(_, &k)| k)
                        .map(|(&v, _)| v)
                        .sum();
                    for c in 0..cols {
                        if m[c] {
                            let p = out.data()[r * cols + c].exp();
                            gx.data_mut()[r * cols + c] = g.data()[r * cols + c] - p * gsum;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normalized,
            } => {
                let (rows, cols) = out.dims2();
                let gain_v = val(*gain).data();
                if self.nodes[gain.0].requires_grad {
                    let prod = zip(normalized, &|gv, n| gv * n);
                    self.accumulate(grads, *gain, column_sums(&prod));
                }
                if self.nodes[bias.0].requires_grad {
                    self.accumulate(grads, *bias, column_sums(g));
                }
                if self.nodes[x.0].requires_grad {
                    let n = cst::<T>(cols as f64);
                    let mut gx = Tensor::zeros(out.shape().to_vec());
                    for r in 0..rows {
                        let xhat = normalized.row_slice(r);
                        let gr = g.row_slice(r);
                        let gh: Vec<T> = gr.iter().zip(gain_v).map(|(&a, &b)| a * b).collect();
                        let mean_gh = gh.iter().copied().sum::<T>() / n;
                        let mean_ghx =
                            gh.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..cols {
                            gx.data_mut()[r * cols + c] =
                                inv_std[r] * (gh[c] - mean_gh - xhat[c] * mean_ghx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Conv { x, weight, bias } => {
                let xv = val(*x);
                let wv = val(*weight);
                let (t_len, d) = xv.dims2();
                let k = wv.shape()[1];
                let left = tensor::conv_left_pad(k);
                let mut gx = Tensor::zeros([t_len, d]);
                let mut gw = Tensor::zeros([d, k]);
                for t in 0..t_len {
                    let gr = g.row_slice(t);
                    for tap in 0..k {
                        let src = t as isize - left + tap as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let s = src as usize;
                        for c in 0..d {
                            gx.data_mut()[s * d + c] += gr[c] * wv.data()[c * k + tap];
                            gw.data_mut()[c * k + tap] += gr[c] * xv.data()[s * d + c];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, column_sums(g));
            }
            Op::Mean(x, axis) => {
                let (rows, cols) = val(*x).dims2();
                let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                match axis {
                    Axis::Rows => {
                        let n = cst::<T>(rows as f64);
                        for r in 0..rows {
                            for c in 0..cols {
                                gx.data_mut()[r * cols + c] = g.data()[c] / n;
                            }
                        }
                    }
                    Axis::Cols => {
                        let n = cst::<T>(cols as f64);
                        for r in 0..rows {
                            for c in 0..cols {
                                gx.data_mut()[r * cols + c] = g.data()[r] / n;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(val(*x).shape().to_vec(), s));
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut row = 0;
                    for &p in parts {
                        let (r, _) = val(p).dims2();
                        self.accumulate(grads, p, tensor::slice_rows(g, row, r));
                        row += r;
                    }
                }
                Axis::Cols => {
                    let mut col = 0;
                    for &p in parts {
                        let (_, c) = val(p).dims2();
                        self.accumulate(grads, p, tensor::slice_cols(g, col, c));
                        col += c;
                    }
                }
            },
            Op::Slice { x, axis, start } => {
                let (rows, cols) = val(*x).dims2();
                let (gr, gc) = g.dims2();
                let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                for r in 0..gr {
                    for c in 0..gc {
                        let (tr, tc) = match axis {
                            Axis::Rows => (r + start, c),
                            Axis::Cols => (r, c + start),
                        };
                        debug_assert!(tr < rows && tc < cols);
                        gx.data_mut()[tr * cols + tc] = g.data()[r * gc + c];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ReverseRows(x) => self.accumulate(grads, *x, tensor::reverse_rows(g)),
            Op::NormalizeRows(x, eps) => {
                let xv = val(*x);
                let (rows, cols) = xv.dims2();
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                for r in 0..rows {
                    let xr = xv.row_slice(r);
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let gr = g.row_slice(r);
                    if norm <= *eps {
                        for c in 0..cols {
                            gx.data_mut()[r * cols + c] = gr[c] / *eps;
                        }
                        continue;
                    }
                    let y = out.row_slice(r);
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] = (gr[c] - y[c] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Select(x, indices) => {
                let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                for (k, &idx) in indices.iter().enumerate() {
                    gx.data_mut()[idx] += g.data()[k];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d_skip,
                rule,
            } => {
                let inputs = ScanInputs {
                    x: val(*x),
                    delta: val(*delta),
                    a: val(*a),
                    b: val(*b),
                    c: val(*c),
                    d_skip: val(*d_skip),
                    rule: *rule,
                };
                let sg = ssm::scan_backward(&inputs, g);
                self.accumulate(grads, *x, sg.x);
                self.accumulate(grads, *delta, sg.delta);
                self.accumulate(grads, *a, sg.a);
                self.accumulate(grads, *b, sg.b);
                self.accumulate(grads, *c, sg.c);
                self.accumulate(grads, *d_skip, sg.d_skip);
            }
        }
    }
}

fn column_sums<T: Element>(g: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = g.dims2();
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::new([cols], out).unwrap()
}

/// Central finite-difference gradient of `f` at `x`, evaluated in 64-bit.
///
/// Used by the gradient checks in tests and the acceptance suite.
pub fn finite_difference(
    x: &Tensor<f64>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

/// Relative error with a floor on the denominator so that gradients which
/// are zero up to truncation error do not dominate.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
