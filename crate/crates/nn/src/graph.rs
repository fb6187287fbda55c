//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value to the tape.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every leaf created with [`Graph::param`].

use std::sync::Arc;

use crate::conv;
use crate::{NnError, Real, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    SubScalar(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ReflectPad { x: Var, pad: usize },
    Conv { x: Var, w: Var, b: Var, stride: usize },
    Standardize { x: Var, rstd: Vec<T> },
    ChannelAffine { x: Var, scale: Var, bias: Var },
    ChannelAffineConst { x: Var, scale: Vec<T> },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Slice { x: Var, start: usize },
    FreqMatMul { x: Var, matrix: Arc<Tensor<T>> },
    TimeDiffRelu(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not contribute.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(NnError::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_const(&mut self, x: Var, k: T) -> Var {
        self.unary(x, Op::AddConst(x), |v| v + k)
    }

    /// `a - s` where `s` holds a single element.
    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err(format!("sub_scalar needs a scalar, got {:?}", self.shape(s)));
        }
        let k = self.scalar(s);
        let value = self.value(a).map(|v| v - k);
        let rg = self.needs(&[a, s]);
        Ok(self.push(value, Op::SubScalar(a, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of `|a - b|` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Reflection padding of the two spatial axes of a `[C, H, W]` tensor.
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        if pad == 0 {
            return Ok(x);
        }
        let value = conv::reflect_pad(self.value(x), pad)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::ReflectPad { x, pad }, rg))
    }

    /// Unpadded cross-correlation. `w` is `[C_out, C_in, k, k]`, `b` is `[C_out]`.
    pub fn conv2d_valid(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let value = conv::conv_forward(self.value(x), self.value(w), self.value(b), stride)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv { x, w, b, stride }, rg))
    }

    /// Reflection-padded convolution; output side is `(in + 2 pad - k) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let padded = self.reflect_pad(x, pad)?;
        self.conv2d_valid(padded, w, b, stride)
    }

    /// Per-channel standardization over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (value, rstd) = conv::instance_norm(self.value(x), eps)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Standardize { x, rstd }, rg))
    }

    /// Standardization over all channels and spatial positions together.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        self.value(x).chw()?;
        let (value, rstd) = conv::standardize_groups(self.value(x), 1, eps)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Standardize { x, rstd }, rg))
    }

    /// `scale[c] * x[c] + bias[c]` with learnable (or generated) `scale` and `bias`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (sv, bv) = (self.value(scale), self.value(bias));
        if sv.len() != c || bv.len() != c {
            return shape_err(format!(
                "affine parameters need {c} entries, got {} and {}",
                sv.len(),
                bv.len()
            ));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let (s, b) = (sv.data()[ch], bv.data()[ch]);
            out.extend(xd[ch * hw..(ch + 1) * hw].iter().map(|&v| s * v + b));
        }
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.needs(&[x, scale, bias]);
        Ok(self.push(value, Op::ChannelAffine { x, scale, bias }, rg))
    }

    /// `scale[c] * x[c] + shift[c]` with fixed coefficients.
    pub fn channel_affine_const(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if scale.len() != c || shift.len() != c {
            return shape_err(format!("affine constants need {c} entries"));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            out.extend(xd[ch * hw..(ch + 1) * hw].iter().map(|&v| scale[ch] * v + shift[ch]));
        }
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::ChannelAffineConst { x, scale: scale.to_vec() }, rg))
    }

    /// Nearest-neighbour upsampling by two along both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let xd = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let src = &xd[ch * h * w + (y / 2) * w..][..w];
                let dst = &mut out[ch * h2 * w2 + y * w2..][..w2];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let value = Tensor::new(&[c, h2, w2], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// `[C, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = T::from_usize(h * w).unwrap();
        let xd = self.value(x).data();
        let out = (0..c).map(|ch| xd[ch * h * w..(ch + 1) * h * w].iter().copied().sum::<T>() / hw);
        let value = Tensor::new(&[c], out.collect())?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Fully connected layer: `w` is `[out, in]`, `x` is `[in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (out_dim, in_dim) = match wv.shape()[..] {
            [o, i] => (o, i),
            _ => return shape_err(format!("linear weight must be [out, in], got {:?}", wv.shape())),
        };
        if xv.len() != in_dim || bv.len() != out_dim {
            return shape_err(format!(
                "linear expects input {in_dim} and bias {out_dim}, got {} and {}",
                xv.len(),
                bv.len()
            ));
        }
        let mut out = bv.data().to_vec();
        T::gemm(out_dim, in_dim, 1, T::one(), wv.data(), in_dim as isize, 1, xv.data(), 1, 1, T::one(), &mut out, 1, 1);
        let value = Tensor::new(&[out_dim], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Contiguous range of the flattened data, returned as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.len() {
            return shape_err(format!("slice {start}..{} out of range {}", start + len, xv.len()));
        }
        let value = Tensor::new(&[len], xv.data()[start..start + len].to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// Channels `start..start + count` of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if start + count > c {
            return shape_err(format!("channels {start}..{} out of range {c}", start + count));
        }
        let data = self.value(x).data()[start * h * w..(start + count) * h * w].to_vec();
        let value = Tensor::new(&[count, h, w], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Slice { x, start: start * h * w }, rg))
    }

    /// Applies a fixed `[H_out, H]` matrix along the height (frequency) axis of each channel.
    pub fn freq_matmul(&mut self, x: Var, matrix: Arc<Tensor<T>>) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (ho, hi) = match matrix.shape()[..] {
            [o, i] => (o, i),
            _ => return shape_err(format!("matrix must be rank 2, got {:?}", matrix.shape())),
        };
        if hi != h {
            return shape_err(format!("matrix expects height {hi}, input has {h}"));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * ho * w];
        for ch in 0..c {
            T::gemm(
                ho,
                h,
                w,
                T::one(),
                matrix.data(),
                h as isize,
                1,
                &xd[ch * h * w..],
                w as isize,
                1,
                T::zero(),
                &mut out[ch * ho * w..],
                w as isize,
                1,
            );
        }
        let value = Tensor::new(&[c, ho, w], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::FreqMatMul { x, matrix }, rg))
    }

    /// `relu(x[.., t + 1] - x[.., t])` along the width (time) axis; the last column is zero.
    pub fn time_diff_relu(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * h * w];
        for row in 0..c * h {
            let src = &xd[row * w..(row + 1) * w];
            let dst = &mut out[row * w..(row + 1) * w];
            for t in 0..w.saturating_sub(1) {
                dst[t] = (src[t + 1] - src[t]).max(T::zero());
            }
        }
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::TimeDiffRelu(x), rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarBackward(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let zero = T::zero();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, a, &mut |d| add_into(d, g));
                acc(grads, b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, a, &mut |d| add_into(d, g));
                acc(grads, b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(grads, a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d = *d + g * y;
                    }
                });
                acc(grads, b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d = *d + g * x;
                    }
                });
            }
            Op::Scale(x, k) => acc(grads, x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * k)),
            Op::AddConst(x) => acc(grads, x, &mut |d| add_into(d, g)),
            Op::SubScalar(a, s) => {
                acc(grads, a, &mut |d| add_into(d, g));
                let total: T = g.iter().copied().sum();
                acc(grads, s, &mut |d| d[0] = d[0] - total);
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                acc(grads, x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > zero {
                            *d = *d + g;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(x).data();
                acc(grads, x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + if v > zero { g } else { g * slope };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(grads, x, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(yv) {
                        *d = *d + g * y * (T::one() - y);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(x).data();
                acc(grads, x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > zero {
                            *d = *d + g;
                        } else if v < zero {
                            *d = *d - g;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(x).data();
                let two = T::from_f64_lossy(2.0);
                acc(grads, x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + two * v * g;
                    }
                });
            }
            Op::Sum(x) => acc(grads, x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(x).len().max(1)).unwrap();
                let gm = g[0] / n;
                acc(grads, x, &mut |d| d.iter_mut().for_each(|d| *d = *d + gm));
            }
            Op::ReflectPad { x, pad } => {
                let shape = self.value(x).shape().to_vec();
                acc(grads, x, &mut |d| conv::reflect_pad_backward(g, &shape, pad, d));
            }
            Op::Conv { x, w, b, stride } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let out_shape = node.value.shape();
                if self.needs(&[w]) || self.needs(&[x]) {
                    let cols = conv::im2col(xv, wv.shape()[2], stride)?;
                    acc(grads, w, &mut |d| conv::conv_weight_grad(g, out_shape, &cols, d));
                    if self.needs(&[x]) {
                        let dcols = conv::conv_cols_grad(g, out_shape, wv);
                        acc(grads, x, &mut |d| conv::col2im_add(&dcols, xv.shape(), wv.shape()[2], stride, d));
                    }
                }
                acc(grads, b, &mut |d| conv::bias_grad(g, out_shape, d));
            }
            Op::Standardize { x, ref rstd } => {
                let xhat = &node.value;
                acc(grads, x, &mut |d| conv::standardize_backward(g, xhat, rstd, d));
            }
            Op::ChannelAffine { x, scale, bias } => {
                let (c, h, w) = self.value(x).chw()?;
                let hw = h * w;
                let xv = self.value(x).data();
                let sv = self.value(scale).data();
                acc(grads, x, &mut |d| {
                    for ch in 0..c {
                        for i in ch * hw..(ch + 1) * hw {
                            d[i] = d[i] + g[i] * sv[ch];
                        }
                    }
                });
                acc(grads, scale, &mut |d| {
                    for ch in 0..c {
                        let r = ch * hw..(ch + 1) * hw;
                        d[ch] = d[ch] + g[r.clone()].iter().zip(&xv[r]).map(|(&g, &x)| g * x).sum::<T>();
                    }
                });
                acc(grads, bias, &mut |d| {
                    for ch in 0..c {
                        d[ch] = d[ch] + g[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
                    }
                });
            }
            Op::ChannelAffineConst { x, ref scale } => {
                let hw = node.value.len() / scale.len();
                acc(grads, x, &mut |d| {
                    for (i, (d, &g)) in d.iter_mut().zip(g).enumerate() {
                        *d = *d + g * scale[i / hw];
                    }
                });
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.value(x).chw()?;
                let w2 = 2 * w;
                acc(grads, x, &mut |d| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            let src = &g[ch * 4 * h * w + y * w2..][..w2];
                            let dst = &mut d[ch * h * w + (y / 2) * w..][..w];
                            for (xo, &v) in src.iter().enumerate() {
                                dst[xo / 2] = dst[xo / 2] + v;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(x).chw()?;
                let hw = h * w;
                let n = T::from_usize(hw).unwrap();
                acc(grads, x, &mut |d| {
                    for ch in 0..c {
                        let gc = g[ch] / n;
                        d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = *d + gc);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x).data(), self.value(w));
                let (o, i) = (wv.shape()[0], wv.shape()[1]);
                acc(grads, x, &mut |d| {
                    T::gemm(i, o, 1, T::one(), wv.data(), 1, i as isize, g, 1, 1, T::one(), d, 1, 1);
                });
                acc(grads, w, &mut |d| {
                    T::gemm(o, 1, i, T::one(), g, 1, 1, xv, 1, 1, T::one(), d, i as isize, 1);
                });
                acc(grads, b, &mut |d| add_into(d, g));
            }
            Op::Slice { x, start } => {
                acc(grads, x, &mut |d| add_into(&mut d[start..start + g.len()], g));
            }
            Op::FreqMatMul { x, ref matrix } => {
                let (c, h, w) = self.value(x).chw()?;
                let ho = matrix.shape()[0];
                acc(grads, x, &mut |d| {
                    for ch in 0..c {
                        T::gemm(
                            h,
                            ho,
                            w,
                            T::one(),
                            matrix.data(),
                            1,
                            h as isize,
                            &g[ch * ho * w..],
                            w as isize,
                            1,
                            T::one(),
                            &mut d[ch * h * w..],
                            w as isize,
                            1,
                        );
                    }
                });
            }
            Op::TimeDiffRelu(x) => {
                let (c, h, w) = self.value(x).chw()?;
                let xv = self.value(x).data();
                acc(grads, x, &mut |d| {
                    for row in 0..c * h {
                        let base = row * w;
                        for t in 0..w.saturating_sub(1) {
                            if xv[base + t + 1] - xv[base + t] > zero {
                                let gv = g[base + t];
                                d[base + t + 1] = d[base + t + 1] + gv;
                                d[base + t] = d[base + t] - gv;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(NnError::NonScalarBackward(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 3], |i| (i as f64 * 0.37).sin()));
        let n = g.instance_norm(x, 1e-5).unwrap();
        let sq = g.square(n);
        let loss = g.mean(sq);
        let a = g.backward(loss).unwrap();
        let b = g.backward(loss).unwrap();
        assert_eq!(a.get(x).unwrap(), b.get(x).unwrap());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let p = g.param(Tensor::full(&[2], 2.0));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn time_diff_relu_pads_last_column() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 3], vec![0.0, 3.0, 1.0]).unwrap());
        let y = g.time_diff_relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert!((sigmoid(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
    }
}
