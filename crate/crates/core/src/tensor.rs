//! Dense tensors with a small reverse-mode autodiff tape.
//!
//! Everything the bag classifier needs is here: convolution, ReLU, 2x2 max
//! pooling, global spatial max, row stacking, instance max-fusion, affine
//! layers, softmax and cross-entropy. Values are generic over [`Scalar`] so
//! the same kernels run in `f32` for training and in `f64` for gradient
//! checks.

use std::fmt::Debug;

use num_traits::Float;
use thiserror::Error;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },
    #[error("shape {shape:?} holds {expected} elements but {found} values were supplied")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("empty bag: max fusion needs at least one instance")]
    EmptyBag,
    #[error("target class {target} out of range for {classes} classes")]
    Index { target: usize, classes: usize },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),
}

fn dim_err(op: &'static str, axis: impl Into<String>, expected: usize, found: usize) -> TensorError {
    TensorError::Dimension {
        op,
        axis: axis.into(),
        expected,
        found,
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view of the values; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Plain SGD: `value -= lr * grad`, then gradients are zeroed.
///
/// All gradients are checked before any value is touched, so a non-finite
/// gradient leaves the parameters unchanged.
pub fn sgd_step<T: Scalar>(params: &mut [Parameter<T>], learning_rate: T) -> Result<(), TensorError> {
    if let Some(p) = params.iter().find(|p| p.grad.data.iter().any(|g| !g.is_finite())) {
        return Err(TensorError::NonFinite(p.name.clone()));
    }
    for p in params.iter_mut() {
        for (v, g) in p.value.data.iter_mut().zip(p.grad.data.iter_mut()) {
            *v = *v - learning_rate * *g;
            *g = T::zero();
        }
    }
    Ok(())
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        cols: Vec<T>,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalMax {
        input: Var,
        argmax: Vec<usize>,
    },
    StackRows(Vec<Var>),
    MaxReduce {
        input: Var,
        argmax: Vec<usize>,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        target: usize,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Probability floor applied before the logarithm in [`Tape::cross_entropy`].
pub const CROSS_ENTROPY_EPS: f64 = 1e-12;

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` means no gradient reached the node (equivalent to zero).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated into it unless `requires_grad`.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input that collects a gradient (used by gradient checks).
    pub fn watched(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Records parameter `index` of the caller's parameter list.
    pub fn param(&mut self, index: usize, p: &Parameter<T>) -> Var {
        self.push(p.value.clone(), Op::Param(index), true)
    }

    /// 2-D cross-correlation of a `[C_in,H,W]` input with `[C_out,C_in,kH,kW]` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 {
            return Err(dim_err("conv2d", "input rank", 3, xs.len()));
        }
        if ks.len() != 4 {
            return Err(dim_err("conv2d", "kernel rank", 4, ks.len()));
        }
        if ks[1] != xs[0] {
            return Err(dim_err("conv2d", "input channels (axis 0)", ks[1], xs[0]));
        }
        if bs != [ks[0]] {
            return Err(dim_err("conv2d", "bias length", ks[0], bs.iter().product()));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride", 1, 0));
        }
        let geo = ConvGeometry::new(&xs, &ks, stride, padding)?;
        let cols = im2col(self.value(input).data(), &geo);
        let out = conv_forward(self.value(kernels).data(), self.value(bias).data(), &cols, &geo);
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        let value = Tensor {
            shape: vec![geo.c_out, geo.h_out, geo.w_out],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// 2x2 max pooling with stride 2 over a `[C,H,W]` map (odd edges dropped).
    pub fn max_pool2(&mut self, input: Var) -> Result<Var, TensorError> {
        let v = self.value(input);
        if v.shape.len() != 3 {
            return Err(dim_err("max_pool2", "input rank", 3, v.shape.len()));
        }
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(dim_err("max_pool2", "spatial extent", 2, h.min(w)));
        }
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if v.data[idx] > v.data[best] {
                            best = idx;
                        }
                    }
                    out.push(v.data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: vec![c, ho, wo],
                data: out,
            },
            Op::MaxPool2 { input, argmax },
            rg,
        ))
    }

    /// Per-channel maximum over all spatial positions: `[C,H,W] -> [C]`.
    pub fn global_max(&mut self, input: Var) -> Result<Var, TensorError> {
        let v = self.value(input);
        if v.shape.len() != 3 {
            return Err(dim_err("global_max", "input rank", 3, v.shape.len()));
        }
        let c = v.shape[0];
        let hw = v.shape[1] * v.shape[2];
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let slice = &v.data[ch * hw..(ch + 1) * hw];
            let mut best = 0;
            for (i, &a) in slice.iter().enumerate() {
                if a > slice[best] {
                    best = i;
                }
            }
            out.push(slice[best]);
            argmax.push(ch * hw + best);
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::vector(out), Op::GlobalMax { input, argmax }, rg))
    }

    /// Stacks equal-length vectors into an `[N, n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        let first = rows.first().ok_or(TensorError::EmptyBag)?;
        let n = self.value(*first).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for (i, &r) in rows.iter().enumerate() {
            let v = self.value(r);
            if v.len() != n {
                return Err(dim_err("stack_rows", format!("row {i} length"), n, v.len()));
            }
            data.extend_from_slice(&v.data);
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), n],
                data,
            },
            Op::StackRows(rows.to_vec()),
            rg,
        ))
    }

    /// Elementwise maximum over the rows of an `[N, n_f]` matrix.
    ///
    /// Returns the fused vector and, per feature, the winning row (lowest
    /// index on ties). Backward routes each feature's gradient to that row only.
    pub fn max_reduce_instances(&mut self, input: Var) -> Result<(Var, Vec<usize>), TensorError> {
        let v = self.value(input);
        if v.shape.len() != 2 {
            return Err(dim_err("max_reduce_instances", "input rank", 2, v.shape.len()));
        }
        let (fused, argmax) = max_reduce_rows(&v.data, v.shape[0], v.shape[1])?;
        let rg = self.rg(input);
        let var = self.push(
            Tensor::vector(fused),
            Op::MaxReduce {
                input,
                argmax: argmax.clone(),
            },
            rg,
        );
        Ok((var, argmax))
    }

    /// `x · W + b` with `x: [n]`, `W: [n, m]`, `b: [m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if wv.shape.len() != 2 {
            return Err(dim_err("affine", "weight rank", 2, wv.shape.len()));
        }
        let (n, m) = (wv.shape[0], wv.shape[1]);
        if xv.len() != n {
            return Err(dim_err("affine", "input length (weight axis 0)", n, xv.len()));
        }
        if bv.len() != m {
            return Err(dim_err("affine", "bias length (weight axis 1)", m, bv.len()));
        }
        let mut out = bv.data.clone();
        for (i, &xi) in xv.data.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let row = &wv.data[i * m..(i + 1) * m];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o = *o + xi * wij;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }, rg))
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&mut self, logits: Var) -> Result<Var, TensorError> {
        let v = self.value(logits);
        if v.len() < 2 {
            return Err(dim_err("softmax", "class count", 2, v.len()));
        }
        let out = softmax_values(&v.data);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::vector(out), Op::Softmax(logits), rg))
    }

    /// `-ln(max(probs[target], 1e-12))` as a one-element tensor.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var, TensorError> {
        let v = self.value(probs);
        if target >= v.len() {
            return Err(TensorError::Index {
                target,
                classes: v.len(),
            });
        }
        let eps = T::of_f64(CROSS_ENTROPY_EPS);
        let p = v.data[target].max(eps);
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(-p.ln()), Op::CrossEntropy { probs, target }, rg))
    }

    /// `Σ weights[i] * x[i]`; turns any tensor into a scalar objective.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(dim_err("weighted_sum", "weight count", v.len(), weights.len()));
        }
        let s = v.data.iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Reverse pass from a one-element output, visiting nodes in exact
    /// reverse recording order.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_val = self.value(output);
        grads[output.0] = Some(Tensor {
            shape: out_val.shape.clone(),
            data: vec![T::one(); out_val.len()],
        });
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds recorded parameter gradients into `params[index].grad`.
    pub fn accumulate(&self, grads: &Gradients<T>, params: &mut [Parameter<T>]) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(i), Some(g)) = (&node.op, g) {
                params[*i].grad.add_assign(g);
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
                cols,
            } => {
                let xs = self.value(*input).shape();
                let kv = self.value(*kernels);
                let geo = ConvGeometry::new(xs, kv.shape(), *stride, *padding)
                    .expect("geometry validated in forward");
                let p = geo.h_out * geo.w_out;
                let k = geo.patch_len();
                if self.rg(*bias) {
                    let db: Vec<T> = (0..geo.c_out)
                        .map(|co| g.data[co * p..(co + 1) * p].iter().copied().sum())
                        .collect();
                    add_grad(grads, *bias, Tensor::vector(db));
                }
                if self.rg(*kernels) {
                    let mut dk = vec![T::zero(); geo.c_out * k];
                    gemm_acc(geo.c_out, p, k, &g.data, &transpose(cols, k, p), &mut dk);
                    add_grad(
                        grads,
                        *kernels,
                        Tensor {
                            shape: kv.shape.clone(),
                            data: dk,
                        },
                    );
                }
                if self.rg(*input) {
                    let mut dcols = vec![T::zero(); k * p];
                    gemm_acc(k, geo.c_out, p, &transpose(&kv.data, geo.c_out, k), &g.data, &mut dcols);
                    let dx = col2im(&dcols, &geo);
                    add_grad(
                        grads,
                        *input,
                        Tensor {
                            shape: xs.to_vec(),
                            data: dx,
                        },
                    );
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&a, &gv)| if a > T::zero() { gv } else { T::zero() })
                    .collect();
                add_grad(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape.clone(),
                        data,
                    },
                );
            }
            Op::MaxPool2 { input, argmax } | Op::GlobalMax { input, argmax } => {
                let xv = self.value(*input);
                let mut dx = vec![T::zero(); xv.len()];
                for (&src, &gv) in argmax.iter().zip(&g.data) {
                    dx[src] = dx[src] + gv;
                }
                add_grad(
                    grads,
                    *input,
                    Tensor {
                        shape: xv.shape.clone(),
                        data: dx,
                    },
                );
            }
            Op::StackRows(rows) => {
                let n = g.shape[1];
                for (i, &r) in rows.iter().enumerate() {
                    if !self.rg(r) {
                        continue;
                    }
                    let row = &g.data[i * n..(i + 1) * n];
                    // Rows that lost every max-fusion contest get nothing, so
                    // their sub-graphs are never replayed.
                    if row.iter().all(|&v| v == T::zero()) {
                        continue;
                    }
                    add_grad(grads, r, Tensor::vector(row.to_vec()));
                }
            }
            Op::MaxReduce { input, argmax } => {
                let xv = self.value(*input);
                let n = xv.shape[1];
                let mut dx = vec![T::zero(); xv.len()];
                for (l, (&row, &gv)) in argmax.iter().zip(&g.data).enumerate() {
                    dx[row * n + l] = gv;
                }
                add_grad(
                    grads,
                    *input,
                    Tensor {
                        shape: xv.shape.clone(),
                        data: dx,
                    },
                );
            }
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let m = wv.shape[1];
                if self.rg(*b) {
                    add_grad(grads, *b, g.clone());
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for (i, &xi) in xv.data.iter().enumerate() {
                        if xi == T::zero() {
                            continue;
                        }
                        for (d, &gv) in dw[i * m..(i + 1) * m].iter_mut().zip(&g.data) {
                            *d = xi * gv;
                        }
                    }
                    add_grad(
                        grads,
                        *w,
                        Tensor {
                            shape: wv.shape.clone(),
                            data: dw,
                        },
                    );
                }
                if self.rg(*x) {
                    let dx = (0..xv.len())
                        .map(|i| dot(&wv.data[i * m..(i + 1) * m], &g.data))
                        .collect();
                    add_grad(grads, *x, Tensor::vector(dx));
                }
            }
            Op::Softmax(x) => {
                let p = &node.value.data;
                let gp: T = p.iter().zip(&g.data).map(|(&a, &b)| a * b).sum();
                let dx = p.iter().zip(&g.data).map(|(&pi, &gi)| pi * (gi - gp)).collect();
                add_grad(grads, *x, Tensor::vector(dx));
            }
            Op::CrossEntropy { probs, target } => {
                let pv = self.value(*probs);
                let mut dp = vec![T::zero(); pv.len()];
                let pt = pv.data[*target];
                if pt > T::of_f64(CROSS_ENTROPY_EPS) {
                    dp[*target] = -g.data[0] / pt;
                }
                add_grad(grads, *probs, Tensor::vector(dp));
            }
            Op::WeightedSum { x, weights } => {
                let xv = self.value(*x);
                let data = weights.iter().map(|&w| w * g.data[0]).collect();
                add_grad(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape.clone(),
                        data,
                    },
                );
            }
        }
    }
}

fn add_grad<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stabilised softmax of a slice.
pub fn softmax_values<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Column-wise max over `rows x cols` row-major data; ties keep the lowest row.
pub fn max_reduce_rows<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Result<(Vec<T>, Vec<usize>), TensorError> {
    if rows == 0 {
        return Err(TensorError::EmptyBag);
    }
    let mut fused = data[..cols].to_vec();
    let mut argmax = vec![0usize; cols];
    for r in 1..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for l in 0..cols {
            if row[l] > fused[l] {
                fused[l] = row[l];
                argmax[l] = r;
            }
        }
    }
    Ok((fused, argmax))
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ks: &[usize], stride: usize, padding: usize) -> Result<Self, TensorError> {
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * padding {
            return Err(dim_err("conv2d", "kernel height (axis 2)", h + 2 * padding, kh));
        }
        if kw > w + 2 * padding {
            return Err(dim_err("conv2d", "kernel width (axis 3)", w + 2 * padding, kw));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - padding` is in range.
fn valid_cols(g: &ConvGeometry, kj: usize) -> std::ops::Range<usize> {
    let lo = g.padding.saturating_sub(kj).div_ceil(g.stride);
    let hi = ((g.w + g.padding).saturating_sub(kj)).div_ceil(g.stride).min(g.w_out);
    lo..hi.max(lo)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.h_out * g.w_out;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let span = valid_cols(g, kj);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    let out = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if g.stride == 1 {
                        let ix0 = span.start + kj - g.padding;
                        out[span.clone()].copy_from_slice(&src[ix0..ix0 + span.len()]);
                    } else {
                        for ox in span.clone() {
                            out[ox] = src[ox * g.stride + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.h_out * g.w_out;
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let span = valid_cols(g, kj);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in span.clone() {
                        let d = &mut x[base + ox * g.stride + kj - g.padding];
                        *d = *d + src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
    x
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

const GEMM_MR: usize = 4;
const GEMM_NR: usize = 8;

/// `out[m x n] += a[m x k] * b[k x n]`, row-major. Every output element is
/// summed over `k` in ascending order into a zero accumulator before being
/// added to `out`, whatever tile it falls in.
fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let mut panel: Vec<[T; GEMM_MR]> = vec![[T::zero(); GEMM_MR]; k];
    for i0 in (0..m).step_by(GEMM_MR) {
        let mr = GEMM_MR.min(m - i0);
        if mr == GEMM_MR {
            for (kk, col) in panel.iter_mut().enumerate() {
                for (r, v) in col.iter_mut().enumerate() {
                    *v = a[(i0 + r) * k + kk];
                }
            }
        }
        for j0 in (0..n).step_by(GEMM_NR) {
            let nr = GEMM_NR.min(n - j0);
            if mr == GEMM_MR && nr == GEMM_NR {
                let mut acc = [[T::zero(); GEMM_NR]; GEMM_MR];
                for (av, brow) in panel.iter().zip(b.chunks_exact(n)) {
                    let brow: &[T; GEMM_NR] = brow[j0..j0 + GEMM_NR].try_into().expect("tile");
                    for (acc_row, &a) in acc.iter_mut().zip(av) {
                        for (o, &bv) in acc_row.iter_mut().zip(brow) {
                            *o = *o + a * bv;
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate() {
                    let dst = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + GEMM_NR];
                    for (d, &v) in dst.iter_mut().zip(acc_row) {
                        *d = *d + v;
                    }
                }
            } else {
                for i in i0..i0 + mr {
                    for j in j0..j0 + nr {
                        let mut s = T::zero();
                        for kk in 0..k {
                            s = s + a[i * k + kk] * b[kk * n + j];
                        }
                        out[i * n + j] = out[i * n + j] + s;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(kernels: &[T], bias: &[T], cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.h_out * g.w_out;
    let mut out = vec![T::zero(); g.c_out * p];
    gemm_acc(g.c_out, g.patch_len(), p, kernels, cols, &mut out);
    for (row, &b) in out.chunks_exact_mut(p).zip(bias) {
        row.iter_mut().for_each(|v| *v = *v + b);
    }
    out
}

/// Central-difference gradient check of a scalar-valued function.
///
/// `f` builds the objective on a fresh tape from a watched input. Returns the
/// largest relative error `|a - n| / max(|a|, |n|, 1e-8)` between the
/// autodiff gradient `a` and the numeric estimate `n`.
pub fn finite_diff_check<T, F>(f: F, point: &Tensor<T>, epsilon: T) -> f64
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.watched(point.clone());
    let out = f(&mut tape, x);
    let grads = tape.backward(out);
    let analytic: Vec<T> = match grads.get(x) {
        Some(g) => g.data.clone(),
        None => vec![T::zero(); point.len()],
    };
    let eval = |p: Tensor<T>| -> T {
        let mut t = Tape::new();
        let x = t.input(p);
        let out = f(&mut t, x);
        t.value(out).data[0]
    };
    let two = T::one() + T::one();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data[i] = plus.data[i] + epsilon;
        let mut minus = point.clone();
        minus.data[i] = minus.data[i] - epsilon;
        let numeric = (eval(plus) - eval(minus)) / (two * epsilon);
        let a = analytic[i].as_f64();
        let n = numeric.as_f64();
        let denom = a.abs().max(n.abs()).max(1e-8);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
