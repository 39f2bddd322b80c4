//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its value and enough information to
//! replay its adjoint. [`Tape::backward`] walks the nodes in reverse, visiting
//! each recorded operation once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kernels;
use crate::ssm::{self, ScanDims};
use crate::tensor::check_permutation;
use crate::{Error, ParamId, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Softplus(Var),
    Gelu(Var),
    LeakyRelu(Var),
    Abs(Var),
    Clamp01(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Conv2d(Var, Var),
    DepthwiseConv2d(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Scan { inputs: [Var; 6], dims: ScanDims, states: Vec<f64> },
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Inference-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), rng: None }
    }

    /// Training-mode tape: dropout masks are drawn from a PRNG seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Tape { nodes: Vec::new(), rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf(None), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf(None), requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a stored parameter; its gradient can be accumulated
    /// back into the store with [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Leaf(Some(id)), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        self.push(value, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), crate::math::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), kernels::softplus)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), kernels::gelu)
    }

    /// LeakyReLU with slope [`kernels::LEAKY_SLOPE`].
    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::LeakyRelu(a), |x| if x > 0.0 { x } else { kernels::LEAKY_SLOPE * x })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), crate::math::abs)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, Op::Clamp01(a), |x| x.clamp(0.0, 1.0))
    }

    /// Which linear piece each element of every LeakyReLU, `abs` and clamp
    /// sits on, in recording order. Two evaluations with equal patterns lie
    /// on the same smooth piece of the recorded function.
    pub fn branch_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (a, piece): (Var, fn(f64) -> i8) = match node.op {
                Op::LeakyRelu(a) => (a, |x| (x > 0.0) as i8),
                Op::Abs(a) => (a, |x| if x > 0.0 { 1 } else if x < 0.0 { -1 } else { 0 }),
                Op::Clamp01(a) => (a, |x| if x <= 0.0 { -1 } else if x < 1.0 { 0 } else { 1 }),
                _ => continue,
            };
            out.extend(self.value(a).data().iter().map(|&x| piece(x)));
        }
        out
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix()?;
        let (k2, n) = self.value(b).as_matrix()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of [{m}×{k}] and [{k2}×{n}]: inner dimensions differ"
            )));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[l×c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).as_matrix()?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!("row bias {:?} for {c} columns", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x[c×h×w] + bias[c]` broadcast over pixels.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).as_map()?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!("channel bias {:?} for {c} channels", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut value = self.value(x).clone();
        for (plane, bv) in value.data_mut().chunks_exact_mut(h * w).zip(b) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(value, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// Output element `i` is input element `index[i]` (flat indices), reshaped to `shape`.
    /// Indices may repeat or be omitted; the adjoint scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Validation(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather(x, index), &[x]))
    }

    /// Row `i` of the output is row `order[i]` of the `[l×c]` input.
    pub fn permute_rows(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let (l, c) = self.value(x).as_matrix()?;
        check_permutation(order, l)?;
        let index = order.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
        self.gather(x, index, &[l, c])
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let (l, _) = self.value(x).as_matrix()?;
        let order: Vec<usize> = (0..l).rev().collect();
        self.permute_rows(x, &order)
    }

    /// `[h·w × c]` row-major tokens to a `[c×h×w]` map.
    pub fn tokens_to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (l, c) = self.value(x).as_matrix()?;
        if l != h * w {
            return Err(Error::Dimension(format!("{l} tokens cannot fold into {h}×{w}")));
        }
        let index = (0..c).flat_map(|ch| (0..l).map(move |p| p * c + ch)).collect();
        self.gather(x, index, &[c, h, w])
    }

    /// `[c×h×w]` map flattened row-major into `[h·w × c]` tokens.
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).as_map()?;
        let l = h * w;
        let index = (0..l).flat_map(|p| (0..c).map(move |ch| ch * l + p)).collect();
        self.gather(x, index, &[l, c])
    }

    /// Stack `[l1×c]` on top of `[l2×c]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (l1, c1) = self.value(a).as_matrix()?;
        let (l2, c2) = self.value(b).as_matrix()?;
        if c1 != c2 {
            return Err(Error::Dimension(format!("concat rows of [{l1}×{c1}] and [{l2}×{c2}]")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(&[l1 + l2, c1], data)?;
        Ok(self.push(value, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Join `[l×c1]` and `[l×c2]` side by side into `[l×(c1+c2)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (l1, c1) = self.value(a).as_matrix()?;
        let (l2, c2) = self.value(b).as_matrix()?;
        if l1 != l2 {
            return Err(Error::Dimension(format!("concat columns of [{l1}×{c1}] and [{l2}×{c2}]")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(l1 * (c1 + c2));
        for t in 0..l1 {
            data.extend_from_slice(&da[t * c1..(t + 1) * c1]);
            data.extend_from_slice(&db[t * c2..(t + 1) * c2]);
        }
        let value = Tensor::new(&[l1, c1 + c2], data)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Same-padded convolution: `x[cin×h×w]`, `weight[cout×cin×k×k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (cin, h, w) = self.value(x).as_map()?;
        let (cout, k) = match self.shape(weight) {
            &[o, i, k1, k2] if i == cin && k1 == k2 => (o, k1),
            s => {
                return Err(Error::Dimension(format!("conv2d weight {s:?} for input {:?}", self.shape(x))))
            }
        };
        odd_kernel(k)?;
        let data = kernels::conv2d(self.value(x).data(), self.value(weight).data(), cin, cout, h, w, k);
        let value = Tensor::new(&[cout, h, w], data)?;
        Ok(self.push(value, Op::Conv2d(x, weight), &[x, weight]))
    }

    /// Per-channel same-padded convolution: `x[c×h×w]`, `kernel[c×k×k]` with odd `k`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).as_map()?;
        let k = match self.shape(kernel) {
            &[kc, k1, k2] if kc == c && k1 == k2 => k1,
            s => {
                return Err(Error::Dimension(format!(
                    "depthwise kernel {s:?} for input {:?}",
                    self.shape(x)
                )))
            }
        };
        odd_kernel(k)?;
        let data = kernels::depthwise_conv2d(self.value(x).data(), self.value(kernel).data(), c, h, w, k);
        let value = Tensor::new(&[c, h, w], data)?;
        Ok(self.push(value, Op::DepthwiseConv2d(x, kernel), &[x, kernel]))
    }

    /// 2×2 average pooling; equal to a half-pixel bilinear 2× downsample.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).as_map()?;
        even_dims(h, w)?;
        let data = kernels::avg_pool2(self.value(x).data(), c, h, w);
        let value = Tensor::new(&[c, h / 2, w / 2], data)?;
        Ok(self.push(value, Op::AvgPool2(x), &[x]))
    }

    /// Bilinear 2× upsampling with half-pixel centers.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).as_map()?;
        let data = kernels::resize_bilinear(self.value(x).data(), c, h, w, 2 * h, 2 * w);
        let value = Tensor::new(&[c, 2 * h, 2 * w], data)?;
        Ok(self.push(value, Op::Upsample2(x), &[x]))
    }

    /// Per-row layer normalization of `[l×c]` with affine `gain[c]`, `bias[c]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (l, c) = self.value(x).as_matrix()?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Dimension(format!("layer norm affine shapes for {c} channels")));
        }
        let (data, stats) =
            kernels::layer_norm(self.value(x).data(), self.value(gain).data(), self.value(bias).data(), l, c);
        let value = Tensor::new(&[l, c], data)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias]))
    }

    /// Multi-channel selective scan.
    ///
    /// Shapes: `x[l×c]`, `delta[l×c]` (positive), `a[c×n]` (negative diagonal
    /// state matrices, one per channel), `b[l×n]`, `c_out[l×n]`, `d[c]`.
    /// Every channel runs the discretized recurrence
    /// `h_t = exp(Δ_t A) h_{t-1} + φ(Δ_t, A) B_t x_t`, `y_t = C_t·h_t + D x_t`
    /// from a zero initial state.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c_out: Var, d: Var) -> Result<Var> {
        let (l, c) = self.value(x).as_matrix()?;
        let (ca, n) = self.value(a).as_matrix()?;
        let ok = self.shape(delta) == [l, c]
            && ca == c
            && self.shape(b) == [l, n]
            && self.shape(c_out) == [l, n]
            && self.shape(d) == [c];
        if !ok {
            return Err(Error::Dimension(format!(
                "selective scan shapes x{:?} delta{:?} a{:?} b{:?} c{:?} d{:?}",
                self.shape(x),
                self.shape(delta),
                self.shape(a),
                self.shape(b),
                self.shape(c_out),
                self.shape(d)
            )));
        }
        if self.value(delta).data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("step size must be positive for every token".into()));
        }
        let dims = ScanDims { len: l, channels: c, state: n };
        let (y, states) = ssm::scan_forward(
            dims,
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c_out).data(),
            self.value(d).data(),
        );
        let value = Tensor::new(&[l, c], y)?;
        let inputs = [x, delta, a, b, c_out, d];
        Ok(self.push(value, Op::Scan { inputs, dims, states }, &inputs))
    }

    /// Inverted dropout; identity on inference tapes or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.nodes[x.0].value.len();
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape(), data)?;
        Ok(self.push(value, Op::Dropout(x, mask), &[x]))
    }

    /// Propagates adjoints from a scalar `output` back through the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut leaves = Vec::new();
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(p) = node.op {
                if node.requires_grad {
                    let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    let t = Tensor::new(node.value.shape(), g).expect("gradient shape");
                    if let Some(id) = p {
                        params.push((id, leaves.len()));
                    }
                    leaves.push((Var(i), t));
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |x: &[f64], f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            x.iter().zip(g).map(|(&xv, &gv)| f(xv, gv)).collect()
        };

        match &node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                send(*a, elementwise(val(*b), &|y, gv| y * gv));
                send(*b, elementwise(val(*a), &|x, gv| x * gv));
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::Exp(a) => send(*a, node.value.data().iter().zip(g).map(|(y, gv)| y * gv).collect()),
            Op::Softplus(a) => send(*a, elementwise(val(*a), &|x, gv| kernels::sigmoid(x) * gv)),
            Op::Gelu(a) => send(*a, elementwise(val(*a), &|x, gv| kernels::gelu_grad(x) * gv)),
            Op::LeakyRelu(a) => {
                send(*a, elementwise(val(*a), &|x, gv| if x > 0.0 { gv } else { kernels::LEAKY_SLOPE * gv }))
            }
            Op::Abs(a) => send(
                *a,
                elementwise(val(*a), &|x, gv| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Clamp01(a) => send(*a, elementwise(val(*a), &|x, gv| if x > 0.0 && x < 1.0 { gv } else { 0.0 })),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g, m, k, n);
                send(*a, da);
                send(*b, db);
            }
            Op::AddRowBias(x, bias) => {
                let c = val(*bias).len();
                let mut db = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*x, g.to_vec());
                send(*bias, db);
            }
            Op::AddChannelBias(x, bias) => {
                let c = val(*bias).len();
                let hw = g.len() / c;
                let db = g.chunks_exact(hw).map(|p| p.iter().sum()).collect();
                send(*x, g.to_vec());
                send(*bias, db);
            }
            Op::Gather(x, index) => {
                let mut dx = vec![0.0; val(*x).len()];
                for (&i, &gv) in index.iter().zip(g) {
                    dx[i] += gv;
                }
                send(*x, dx);
            }
            Op::ConcatRows(a, b) => {
                let na = val(*a).len();
                send(*a, g[..na].to_vec());
                send(*b, g[na..].to_vec());
            }
            Op::ConcatCols(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let (l, c1) = (sa[0], sa[1]);
                let c2 = self.nodes[b.0].value.shape()[1];
                let mut da = Vec::with_capacity(l * c1);
                let mut db = Vec::with_capacity(l * c2);
                for row in g.chunks_exact(c1 + c2) {
                    da.extend_from_slice(&row[..c1]);
                    db.extend_from_slice(&row[c1..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Conv2d(x, w) => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), g, xs[0], ws[0], xs[1], xs[2], ws[2]);
                send(*x, dx);
                send(*w, dw);
            }
            Op::DepthwiseConv2d(x, k) => {
                let xs = self.nodes[x.0].value.shape();
                let ks = self.nodes[k.0].value.shape()[1];
                let (dx, dk) = kernels::depthwise_conv2d_backward(val(*x), val(*k), g, xs[0], xs[1], xs[2], ks);
                send(*x, dx);
                send(*k, dk);
            }
            Op::AvgPool2(x) => {
                let xs = self.nodes[x.0].value.shape();
                send(*x, kernels::avg_pool2_backward(g, xs[0], xs[1], xs[2]));
            }
            Op::Upsample2(x) => {
                let xs = self.nodes[x.0].value.shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                send(*x, kernels::resize_bilinear_backward(g, c, h, w, 2 * h, 2 * w));
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xs = self.nodes[x.0].value.shape();
                let (dx, dg, db) = kernels::layer_norm_backward(val(*x), val(*gain), stats, g, xs[0], xs[1]);
                send(*x, dx);
                send(*gain, dg);
                send(*bias, db);
            }
            Op::Scan { inputs, dims, states } => {
                let [x, delta, a, b, c, d] = *inputs;
                let adj = ssm::scan_backward(*dims, val(x), val(delta), val(a), val(b), val(c), val(d), states, g);
                send(x, adj.x);
                send(delta, adj.delta);
                send(a, adj.a);
                send(b, adj.b);
                send(c, adj.c);
                send(d, adj.d);
            }
            Op::Dropout(x, mask) => send(*x, g.iter().zip(mask).map(|(gv, m)| gv * m).collect()),
        }
    }
}

fn odd_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("kernel size {k} must be odd for same padding")));
    }
    Ok(())
}

fn even_dims(h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("2× downsampling needs even dimensions, got {h}×{w}")));
    }
    Ok(())
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a differentiable leaf. Leaves the output does not depend on
    /// get an all-zero gradient; non-leaf or constant vars return `None`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, t)| t)
    }

    /// Adds every parameter-leaf gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, slot) in &self.params {
            store.accumulate_grad(id, self.leaves[slot].1.data());
        }
    }
}
