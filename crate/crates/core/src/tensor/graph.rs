use std::collections::BTreeMap;
use std::fmt;

use super::kernels::{self, ConvGeom, MatView};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local vector-Jacobian product of a caller-defined operation: receives the
/// input values, the output value and the output gradient, and returns one
/// optional gradient per input.
pub type CustomBackward =
    Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        in_ch: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    ConcatChannels(Vec<(Var, usize)>),
    TileSpatial { v: Var, plane: usize },
    InstanceNorm { x: Var, inv_std: Vec<f64>, plane: usize },
    Reshape(Var),
    AddBias(Var, Var),
    SpatialMean { x: Var, plane: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv_transpose2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar-mul",
            Op::AddScalar(..) => "add-scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatChannels(_) => "concat-channels",
            Op::TileSpatial { .. } => "tile-spatial",
            Op::InstanceNorm { .. } => "instance-norm",
            Op::Reshape(_) => "reshape",
            Op::AddBias(..) => "add-bias",
            Op::SpatialMean { .. } => "spatial-mean",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic differentiation tape.
///
/// Nodes are appended in evaluation order, so node indices are already a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients of a scalar root with respect to every differentiable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    /// Gradient of `var`, or zeros shaped like `like` when the root does not
    /// depend on it.
    pub fn get_or_zeros(&self, var: Var, like: &[usize]) -> Tensor {
        self.grads
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    /// Corrupts one gradient entry. Used to exercise failure paths of the
    /// gradient-check harness.
    pub fn perturb_for_test(&mut self, var: Var, delta: f64) {
        if let Some(t) = self.grads.get_mut(&var) {
            t.data_mut()[0] += delta;
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        });
    }
    Ok(())
}

fn rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            shapes: vec![t.shape().to_vec()],
        }),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        }
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `x` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Records a caller-defined operation whose value has already been
    /// computed. `backward` supplies the local vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    shapes: vec![ta.shape().to_vec(), tb.shape().to_vec()],
                })
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(ta.data(), MatView::rm(m, k), tb.data(), MatView::rm(k, n), &mut out, 0.0);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution with square `k x k` kernels and symmetric zero padding.
    /// `x` is `[N, C, H, W]`, `w` is `[O, C, k, k]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, wd) = rank4(OP, self.value(x))?;
        let (o, ci, kh, kw) = rank4(OP, self.value(w))?;
        if ci != c || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                shapes: vec![self.shape(x).to_vec(), self.shape(w).to_vec()],
            });
        }
        if !(1..=2).contains(&stride) {
            return Err(TensorError::InvalidAttr {
                op: OP,
                detail: format!("stride {stride} not in {{1, 2}}"),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    shapes: vec![self.shape(w).to_vec(), self.shape(b).to_vec()],
                });
            }
        }
        let bad = || TensorError::InvalidAttr {
            op: OP,
            detail: format!("kernel {kh} with padding {padding} does not fit input {h}x{wd}"),
        };
        let out_h = kernels::conv_out_size(h, kh, stride, padding).ok_or_else(bad)?;
        let out_w = kernels::conv_out_size(wd, kh, stride, padding).ok_or_else(bad)?;
        let geom = ConvGeom {
            batch: n,
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            o,
            &geom,
        );
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::new(vec![n, o, out_h, out_w], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch: o,
            },
            rg,
        ))
    }

    /// Transposed 2-D convolution (stride 2). `w` is `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, c, h, wd) = rank4(OP, self.value(x))?;
        let (ci, o, kh, kw) = rank4(OP, self.value(w))?;
        if ci != c || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                shapes: vec![self.shape(x).to_vec(), self.shape(w).to_vec()],
            });
        }
        if stride != 2 {
            return Err(TensorError::InvalidAttr {
                op: OP,
                detail: format!("stride {stride} unsupported (only 2)"),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    shapes: vec![self.shape(w).to_vec(), self.shape(b).to_vec()],
                });
            }
        }
        let bad = || TensorError::InvalidAttr {
            op: OP,
            detail: format!("kernel {kh} with padding {padding} does not fit input {h}x{wd}"),
        };
        let out_h = kernels::conv_transpose_out_size(h, kh, stride, padding).ok_or_else(bad)?;
        let out_w = kernels::conv_transpose_out_size(wd, kh, stride, padding).ok_or_else(bad)?;
        // Geometry of the adjoint convolution (output -> input).
        let geom = ConvGeom {
            batch: n,
            channels: o,
            height: out_h,
            width: out_w,
            kernel: kh,
            stride,
            padding,
            out_h: h,
            out_w: wd,
        };
        if kernels::conv_out_size(out_h, kh, stride, padding) != Some(h) {
            return Err(bad());
        }
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c,
            &geom,
        );
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::new(vec![n, o, out_h, out_w], out)?,
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                in_ch: c,
            },
            rg,
        ))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        Ok(Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.map(x, |a| a * s);
        self.unary(x, v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.map(x, |a| a + s);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::exp);
        self.unary(x, v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        let v = self.map(x, f64::ln);
        Ok(self.unary(x, v, Op::Log(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a * a);
        self.unary(x, v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain { op: "sqrt", value: bad });
        }
        let v = self.map(x, f64::sqrt);
        Ok(self.unary(x, v, Op::Sqrt(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::abs);
        self.unary(x, v, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| if a > 0.0 { a } else { 0.0 });
        self.unary(x, v, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.map(x, |a| if a > 0.0 { a } else { slope * a });
        self.unary(x, v, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.unary(x, v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.map(x, softplus);
        self.unary(x, v, Op::Softplus(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.map(x, |a| a.clamp(lo, hi));
        self.unary(x, v, Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.unary(x, Tensor::scalar(s), Op::Mean(x))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat-channels";
        let first = *parts.first().ok_or_else(|| TensorError::InvalidAttr {
            op: OP,
            detail: "nothing to concatenate".into(),
        })?;
        let (n, _, h, w) = rank4(OP, self.value(first))?;
        let mut spec = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = rank4(OP, self.value(p))?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    shapes: parts.iter().map(|&v| self.shape(v).to_vec()).collect(),
                });
            }
            spec.push((p, pc));
        }
        let total: usize = spec.iter().map(|s| s.1).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &(p, pc) in &spec {
                data.extend_from_slice(&self.value(p).data()[b * pc * plane..][..pc * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::new(vec![n, total, h, w], data)?, Op::ConcatChannels(spec), rg))
    }

    /// Broadcasts a vector `[d]` to `[d, H, W]` (or a batch `[N, d]` to
    /// `[N, d, H, W]`) so that channel `k` is the constant `v[k]`.
    pub fn tile_spatial(&mut self, v: Var, height: usize, width: usize) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        let out_shape = match shape[..] {
            [d] => vec![d, height, width],
            [n, d] => vec![n, d, height, width],
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "tile-spatial",
                    shapes: vec![shape],
                })
            }
        };
        if height == 0 || width == 0 {
            return Err(TensorError::InvalidAttr {
                op: "tile-spatial",
                detail: "empty target plane".into(),
            });
        }
        let plane = height * width;
        let data = self
            .value(v)
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, plane))
            .collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.unary(v, value, Op::TileSpatial { v, plane }))
    }

    /// Normalizes each `(sample, channel)` plane of `[N, C, H, W]` to zero mean
    /// and unit variance (`eps` inside the square root). No affine transform.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = rank4("instance-norm", self.value(x))?;
        let plane = h * w;
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x).data(), n * c, plane, eps);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.unary(x, value, Op::InstanceNorm { x, inv_std, plane }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Adds a bias vector `[d]` to every row of `[N, d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = match (tx.shape(), tb.shape()) {
            (&[_, d], &[db]) if d == db => d,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "add-bias",
                    shapes: vec![tx.shape().to_vec(), tb.shape().to_vec()],
                })
            }
        };
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % d])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.requires_grad(x) || self.requires_grad(b);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// `[N, C, H, W]` -> `[N, C]` by averaging each plane.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = rank4("spatial-mean", self.value(x))?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.unary(x, value, Op::SpatialMean { x, plane }))
    }

    /// `x @ w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Mean of absolute differences.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ab = self.abs(d);
        Ok(self.mean(ab))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// differentiable leaf reachable from the root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.requires_grad(root) {
            return Ok(out);
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                out.grads.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v).data();
        let mut send = |v: Var, gv: Vec<f64>| {
            if self.requires_grad(v) {
                add_into(&mut grads[v.0], gv);
            }
        };
        let elementwise = |x: Var, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            // f(input, output) gives the local derivative.
            val(x)
                .iter()
                .zip(node.value.data())
                .zip(g)
                .map(|((&xi, &yi), &gi)| gi * f(xi, yi))
                .collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(g, MatView::rm(m, n), val(*b), MatView::rm_t(k, n), &mut ga, 0.0);
                    send(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(val(*a), MatView::rm_t(m, k), g, MatView::rm(m, n), &mut gb, 0.0);
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, w, b, geom, out_ch } => {
                let (gx, gw) = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *out_ch,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
                if let Some(b) = b {
                    send(*b, kernels::channel_bias_grad(g, geom.batch, *out_ch, geom.out_h * geom.out_w));
                }
            }
            Op::ConvTranspose { x, w, b, geom, in_ch } => {
                let (gx, gw) = kernels::conv_transpose_backward(
                    val(*x),
                    val(*w),
                    g,
                    *in_ch,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
                if let Some(b) = b {
                    send(*b, kernels::channel_bias_grad(g, geom.batch, geom.channels, geom.height * geom.width));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Exp(x) => send(*x, elementwise(*x, &|_, y| y)),
            Op::Log(x) => send(*x, elementwise(*x, &|a, _| 1.0 / a)),
            Op::Square(x) => send(*x, elementwise(*x, &|a, _| 2.0 * a)),
            Op::Sqrt(x) => send(*x, elementwise(*x, &|_, y| 0.5 / y)),
            Op::Abs(x) => send(*x, elementwise(*x, &|a, _| if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 })),
            Op::Relu(x) => send(*x, elementwise(*x, &|a, _| if a > 0.0 { 1.0 } else { 0.0 })),
            Op::LeakyRelu(x, s) => send(*x, elementwise(*x, &|a, _| if a > 0.0 { 1.0 } else { *s })),
            Op::Tanh(x) => send(*x, elementwise(*x, &|_, y| 1.0 - y * y)),
            Op::Sigmoid(x) => send(*x, elementwise(*x, &|_, y| y * (1.0 - y))),
            Op::Softplus(x) => send(*x, elementwise(*x, &|a, _| sigmoid(a))),
            Op::Clamp(x, lo, hi) => send(*x, elementwise(*x, &|a, _| if a >= *lo && a <= *hi { 1.0 } else { 0.0 })),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::ConcatChannels(spec) => {
                let shape = node.value.shape();
                let (n, plane) = (shape[0], shape[2] * shape[3]);
                let total = shape[1];
                let mut offset = 0;
                for &(p, pc) in spec {
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            gp.extend_from_slice(&g[(b * total + offset) * plane..][..pc * plane]);
                        }
                        send(p, gp);
                    }
                    offset += pc;
                }
            }
            Op::TileSpatial { v, plane } => {
                send(*v, g.chunks(*plane).map(|c| c.iter().sum()).collect());
            }
            Op::InstanceNorm { x, inv_std, plane } => {
                send(*x, kernels::instance_norm_backward(node.value.data(), inv_std, g, *plane));
            }
            Op::AddBias(x, b) => {
                send(*x, g.to_vec());
                let d = self.value(*b).len();
                let mut gb = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
                send(*b, gb);
            }
            Op::SpatialMean { x, plane } => {
                let p = *plane as f64;
                send(*x, g.iter().flat_map(|&v| std::iter::repeat_n(v / p, *plane)).collect());
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                for (v, gv) in inputs.iter().zip(backward(&values, &node.value, g)) {
                    if let Some(gv) = gv {
                        send(*v, gv);
                    }
                }
            }
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn relu_zero_and_negative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // subgradient at zero is zero
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn tile_spatial_broadcasts_channels() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_vec((0..8).map(f64::from).collect()));
        let tiled = g.tile_spatial(v, 4, 4).unwrap();
        let out = g.value(tiled);
        assert_eq!(out.shape(), &[8, 4, 4]);
        for (k, plane) in out.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&x| x == k as f64));
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_gives_empty_map() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 5.0]));
        let m = g.mean(c);
        assert!(g.backward(m).unwrap().is_empty());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn log_and_sqrt_domain_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", .. })));
        assert!(matches!(g.sqrt(x), Err(TensorError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn shared_use_accumulates() {
        // f(w) = w*a + w*b
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.7));
        let a = g.constant(Tensor::scalar(3.0));
        let b = g.constant(Tensor::scalar(-1.5));
        let wa = g.mul(w, a).unwrap();
        let wb = g.mul(w, b).unwrap();
        let f = g.add(wa, wb).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 1.5);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let used = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::from_vec(vec![1.0, 1.0]));
        let y = g.square(used);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn instance_norm_standardizes_planes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 16).map(|i| ((i * 7919) % 31) as f64 * 1.5 - 20.0).collect();
        let x = g.constant(t(&[2, 3, 4, 4], &data));
        let y = g.instance_norm(x, 1e-5).unwrap();
        for plane in g.value(y).data().chunks(16) {
            let mean = plane.iter().sum::<f64>() / 16.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "variance {var}");
        }
    }

    #[test]
    fn conv_stride_and_padding_sizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let w = g.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 16, 16]);
        let y1 = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y1), &[1, 4, 32, 32]);
        assert!(matches!(g.conv2d(x, w, None, 3, 1), Err(TensorError::InvalidAttr { .. })));
        let wt = g.constant(Tensor::zeros(&[4, 2, 4, 4]));
        let up = g.conv_transpose2d(y, wt, None, 2, 1).unwrap();
        assert_eq!(g.shape(up), &[1, 2, 32, 32]);
    }

    #[test]
    fn apply_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let data: Vec<f64> = (0..50).map(|i| (i as f64 * 0.731).sin()).collect();
            let x = g.constant(t(&[2, 1, 5, 5], &data));
            let w = g.constant(t(&[3, 1, 3, 3], &data[..27]));
            let y = g.conv2d(x, w, None, 1, 1).unwrap();
            let y = g.instance_norm(y, 1e-5).unwrap();
            let y = g.tanh(y);
            g.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
