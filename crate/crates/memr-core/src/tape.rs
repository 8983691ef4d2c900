//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Define-by-run Wengert list: every operation appends a node holding the
//! result tensor plus the recipe to push gradients back to its inputs.
//! `backward` replays the list in reverse and accumulates partials with the
//! multivariate chain rule (multiple uses of a tensor sum their
//! contributions).
//!
//! One tape per forward pass; tapes are single-threaded. Distinct tapes are
//! independent and may live on different threads.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tensor};

/// Identifier of a node in the computation tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorRef, b: TensorRef },
    Add { a: TensorRef, b: TensorRef },
    /// `a` is `M×N`, `row` is `1×N`, broadcast-added to every row of `a`.
    AddRow { a: TensorRef, row: TensorRef },
    Sub { a: TensorRef, b: TensorRef },
    Mul { a: TensorRef, b: TensorRef },
    Scale { a: TensorRef, c: f64 },
    Neg { a: TensorRef },
    Sigmoid { a: TensorRef },
    Tanh { a: TensorRef },
    Relu { a: TensorRef },
    SoftmaxRows { a: TensorRef },
    LogSoftmaxRows { a: TensorRef },
    Sum { a: TensorRef },
    ConcatCols { a: TensorRef, b: TensorRef },
    StackRows { parts: Vec<TensorRef> },
    Row { a: TensorRef, index: usize },
    Select { a: TensorRef, row: usize, col: usize },
    NarrowCols { a: TensorRef, start: usize, len: usize },
    Transpose { a: TensorRef },
    /// log Σ exp over scalar inputs; the log-domain reduction of the CTC
    /// trellis.
    LogSumExp { parts: Vec<TensorRef> },
    Reshape { a: TensorRef },
    PadRows { a: TensorRef, rows: usize },
    /// 3×3 convolution, padding 1, stride 1. `input` is `[C_in, H, W]`,
    /// `weight` is `[C_out, C_in, 3, 3]`, `bias` is `[C_out]`.
    Conv3x3 { input: TensorRef, weight: TensorRef, bias: TensorRef },
    /// 2×2 max pooling, stride 2, ceil semantics (edge windows may be
    /// partial). `chosen` records the winning flat input index per output.
    MaxPool2 { a: TensorRef, chosen: Vec<usize> },
    /// `[C, T, F]` → `[T, C·F]`: flatten channels and features per time step.
    ChannelsToRows { a: TensorRef },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Computation tape. Topological by construction: inputs of every node
/// precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorRef {
        self.nodes.push(Node { tensor, op });
        TensorRef(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, tensor: Tensor) -> TensorRef {
        self.push(tensor, Op::Leaf)
    }

    pub fn leaf_from(&mut self, tensor: &Tensor) -> TensorRef {
        self.leaf(tensor.clone())
    }

    pub fn constant_scalar(&mut self, value: f64) -> TensorRef {
        self.leaf(Tensor::scalar(value))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorRef {
        self.leaf(Tensor::zeros(shape))
    }

    pub fn tensor(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].tensor
    }

    pub fn value(&self, r: TensorRef) -> &[f64] {
        &self.nodes[r.0].tensor.data
    }

    pub fn scalar_value(&self, r: TensorRef) -> f64 {
        self.nodes[r.0].tensor.data[0]
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].tensor.shape
    }

    pub fn numel(&self, r: TensorRef) -> usize {
        self.nodes[r.0].tensor.numel()
    }

    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        self.nodes[r.0].tensor.grad.as_deref()
    }

    pub fn take_grad(&mut self, r: TensorRef) -> Option<Vec<f64>> {
        self.nodes[r.0].tensor.grad.take()
    }

    fn rank2(&self, r: TensorRef, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(r);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a), self.value(b), m, k, n, &mut out);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
            grad: None,
        };
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    fn same_shape(&self, a: TensorRef, b: TensorRef, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
            grad: None,
        };
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn add_row(&mut self, a: TensorRef, row: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.rank2(a, "add_row")?;
        let (rm, rn) = self.rank2(row, "add_row")?;
        if rm != 1 || rn != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row);
        let mut data = self.value(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rv[j];
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
            grad: None,
        };
        Ok(self.push(t, Op::AddRow { a, row }))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
            grad: None,
        };
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
            grad: None,
        };
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).iter().map(|&x| c * x).collect(),
            grad: None,
        };
        self.push(t, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: TensorRef) -> TensorRef {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).iter().map(|&x| -x).collect(),
            grad: None,
        };
        self.push(t, Op::Neg { a })
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).iter().map(|&x| sigmoid(x)).collect(),
            grad: None,
        };
        self.push(t, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorRef) -> TensorRef {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).iter().map(|&x| x.tanh()).collect(),
            grad: None,
        };
        self.push(t, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).iter().map(|&x| x.max(0.0)).collect(),
            grad: None,
        };
        self.push(t, Op::Relu { a })
    }

    /// Row-wise softmax with max-subtraction. Rows sum to 1 within 1e-12.
    pub fn softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.rank2(a, "softmax_rows")?;
        if self.value(a).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "softmax_rows: input has non-finite entries".into(),
            ));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&self.value(a)[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
            grad: None,
        };
        Ok(self.push(t, Op::SoftmaxRows { a }))
    }

    /// Row-wise log-softmax; each row satisfies logsumexp(row) = 0.
    pub fn log_softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.rank2(a, "log_softmax_rows")?;
        if self.value(a).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "log_softmax_rows: input has non-finite entries".into(),
            ));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.value(a)[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                data[i * n + j] = row[j] - lse;
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
            grad: None,
        };
        Ok(self.push(t, Op::LogSoftmaxRows { a }))
    }

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let s: f64 = self.value(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, n1) = self.rank2(a, "concat_cols")?;
        let (m2, n2) = self.rank2(b, "concat_cols")?;
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            data.extend_from_slice(&self.value(a)[i * n1..(i + 1) * n1]);
            data.extend_from_slice(&self.value(b)[i * n2..(i + 1) * n2]);
        }
        let t = Tensor {
            shape: vec![m, n1 + n2],
            data,
            grad: None,
        };
        Ok(self.push(t, Op::ConcatCols { a, b }))
    }

    /// Stack `1×N` row vectors into a `P×N` matrix.
    pub fn stack_rows(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_rows: no rows given".into()));
        }
        let (_, n) = self.rank2(parts[0], "stack_rows")?;
        let mut data = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            let (rm, rn) = self.rank2(p, "stack_rows")?;
            if rm != 1 || rn != n {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![1, n],
                    rhs: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.value(p));
        }
        let t = Tensor {
            shape: vec![parts.len(), n],
            data,
            grad: None,
        };
        Ok(self.push(
            t,
            Op::StackRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row `index` of a matrix as `1×N`.
    pub fn row(&mut self, a: TensorRef, index: usize) -> Result<TensorRef> {
        let (m, n) = self.rank2(a, "row")?;
        if index >= m {
            return Err(Error::Contract(format!(
                "row index {index} out of range for {m} rows"
            )));
        }
        let data = self.value(a)[index * n..(index + 1) * n].to_vec();
        let t = Tensor {
            shape: vec![1, n],
            data,
            grad: None,
        };
        Ok(self.push(t, Op::Row { a, index }))
    }

    /// Single element of a matrix as a scalar node.
    pub fn select(&mut self, a: TensorRef, row: usize, col: usize) -> Result<TensorRef> {
        let (m, n) = self.rank2(a, "select")?;
        if row >= m || col >= n {
            return Err(Error::Contract(format!(
                "select ({row},{col}) out of range for shape [{m}, {n}]"
            )));
        }
        let v = self.value(a)[row * n + col];
        Ok(self.push(Tensor::scalar(v), Op::Select { a, row, col }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (m, n) = self.rank2(a, "narrow_cols")?;
        if start + len > n {
            return Err(Error::Contract(format!(
                "narrow_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.value(a)[i * n + start..i * n + start + len]);
        }
        let t = Tensor {
            shape: vec![m, len],
            data,
            grad: None,
        };
        Ok(self.push(t, Op::NarrowCols { a, start, len }))
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.rank2(a, "transpose")?;
        let av = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        let t = Tensor {
            shape: vec![n, m],
            data,
            grad: None,
        };
        Ok(self.push(t, Op::Transpose { a }))
    }

    /// log Σ exp over scalar nodes. All `-inf` inputs give `-inf` out.
    pub fn logsumexp(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Contract("logsumexp: no inputs given".into()));
        }
        let mut vals = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.numel(p) != 1 {
                return Err(Error::Contract(
                    "logsumexp: inputs must be scalars".into(),
                ));
            }
            vals.push(self.scalar_value(p));
        }
        let v = log_sum_exp(&vals);
        Ok(self.push(
            Tensor::scalar(v),
            Op::LogSumExp {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: self.value(a).to_vec(),
            grad: None,
        };
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Append `rows` all-zero rows at the bottom of a matrix.
    pub fn pad_rows(&mut self, a: TensorRef, rows: usize) -> Result<TensorRef> {
        let (m, n) = self.rank2(a, "pad_rows")?;
        let mut data = self.value(a).to_vec();
        data.extend(std::iter::repeat(0.0).take(rows * n));
        let t = Tensor {
            shape: vec![m + rows, n],
            data,
            grad: None,
        };
        Ok(self.push(t, Op::PadRows { a, rows }))
    }

    /// 3×3 convolution with padding 1, stride 1.
    pub fn conv3x3(
        &mut self,
        input: TensorRef,
        weight: TensorRef,
        bias: TensorRef,
    ) -> Result<TensorRef> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 3 || wshape.len() != 4 || wshape[2] != 3 || wshape[3] != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                lhs: ishape,
                rhs: wshape,
            });
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let c_out = wshape[0];
        if wshape[1] != c_in || bshape != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                lhs: ishape,
                rhs: wshape,
            });
        }
        let mut out = vec![0.0; c_out * h * w];
        conv3x3_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            c_in,
            c_out,
            h,
            w,
            &mut out,
        );
        let t = Tensor {
            shape: vec![c_out, h, w],
            data: out,
            grad: None,
        };
        Ok(self.push(t, Op::Conv3x3 { input, weight, bias }))
    }

    /// 2×2 max pooling with stride 2 over the two trailing dims of
    /// `[C, H, W]`. Ceil semantics: odd edges pool a partial window.
    pub fn max_pool2(&mut self, a: TensorRef) -> Result<TensorRef> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2",
                lhs: s,
                rhs: vec![],
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let av = self.value(a);
        let mut out = vec![0.0; c * ho * wo];
        let mut chosen = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x) = (2 * oy + dy, 2 * ox + dx);
                            if y < h && x < w {
                                let idx = (ch * h + y) * w + x;
                                if av[idx] > best {
                                    best = av[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    chosen[o] = best_idx;
                }
            }
        }
        let t = Tensor {
            shape: vec![c, ho, wo],
            data: out,
            grad: None,
        };
        Ok(self.push(t, Op::MaxPool2 { a, chosen }))
    }

    /// `[C, T, F]` → `[T, C·F]`.
    pub fn channels_to_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "channels_to_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let (c, t_dim, f) = (s[0], s[1], s[2]);
        let av = self.value(a);
        let mut data = vec![0.0; c * t_dim * f];
        for ch in 0..c {
            for t in 0..t_dim {
                for j in 0..f {
                    data[t * (c * f) + ch * f + j] = av[(ch * t_dim + t) * f + j];
                }
            }
        }
        let out = Tensor {
            shape: vec![t_dim, c * f],
            data,
            grad: None,
        };
        Ok(self.push(out, Op::ChannelsToRows { a }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every node reachable from `loss`. `loss` must
    /// be a scalar produced on this tape. Calling `backward` twice on the
    /// same tape is an error.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already called on this tape".into(),
            ));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| vec![0.0; node.tensor.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            let g_out = std::mem::take(&mut grads[i]);
            self.backprop_node(i, &g_out, &mut grads);
            grads[i] = g_out;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.tensor.grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g_out: &[f64], grads: &mut [Vec<f64>]) {
        let val = |r: TensorRef| -> &[f64] { &self.nodes[r.0].tensor.data };
        let shp = |r: TensorRef| -> &[usize] { &self.nodes[r.0].tensor.shape };
        let out_val = &self.nodes[i].tensor.data;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                matmul_nt(g_out, val(*b), m, n, k, &mut grads[a.0]);
                matmul_tn(val(*a), g_out, k, m, n, &mut grads[b.0]);
            }
            Op::Add { a, b } => {
                axpy(1.0, g_out, &mut grads[a.0]);
                axpy(1.0, g_out, &mut grads[b.0]);
            }
            Op::AddRow { a, row } => {
                axpy(1.0, g_out, &mut grads[a.0]);
                let n = shp(*row)[1];
                let gr = &mut grads[row.0];
                for (idx, g) in g_out.iter().enumerate() {
                    gr[idx % n] += g;
                }
            }
            Op::Sub { a, b } => {
                axpy(1.0, g_out, &mut grads[a.0]);
                axpy(-1.0, g_out, &mut grads[b.0]);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                for (idx, g) in g_out.iter().enumerate() {
                    grads[a.0][idx] += g * bv[idx];
                }
                for (idx, g) in g_out.iter().enumerate() {
                    grads[b.0][idx] += g * av[idx];
                }
            }
            Op::Scale { a, c } => axpy(*c, g_out, &mut grads[a.0]),
            Op::Neg { a } => axpy(-1.0, g_out, &mut grads[a.0]),
            Op::Sigmoid { a } => {
                let ga = &mut grads[a.0];
                for (idx, (&g, &y)) in g_out.iter().zip(out_val).enumerate() {
                    ga[idx] += g * y * (1.0 - y);
                }
            }
            Op::Tanh { a } => {
                let ga = &mut grads[a.0];
                for (idx, (&g, &y)) in g_out.iter().zip(out_val).enumerate() {
                    ga[idx] += g * (1.0 - y * y);
                }
            }
            Op::Relu { a } => {
                let av = val(*a);
                let ga = &mut grads[a.0];
                for (idx, &g) in g_out.iter().enumerate() {
                    if av[idx] > 0.0 {
                        ga[idx] += g;
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let n = shp(*a)[1];
                let ga = &mut grads[a.0];
                for (row_i, (g_row, y_row)) in
                    g_out.chunks(n).zip(out_val.chunks(n)).enumerate()
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        ga[row_i * n + j] += y_row[j] * (g_row[j] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows { a } => {
                let n = shp(*a)[1];
                let ga = &mut grads[a.0];
                for (row_i, (g_row, y_row)) in
                    g_out.chunks(n).zip(out_val.chunks(n)).enumerate()
                {
                    let g_sum: f64 = g_row.iter().sum();
                    for j in 0..n {
                        ga[row_i * n + j] += g_row[j] - y_row[j].exp() * g_sum;
                    }
                }
            }
            Op::Sum { a } => {
                let g = g_out[0];
                for x in grads[a.0].iter_mut() {
                    *x += g;
                }
            }
            Op::ConcatCols { a, b } => {
                let (n1, n2) = (shp(*a)[1], shp(*b)[1]);
                let m = shp(*a)[0];
                for i_row in 0..m {
                    let base = i_row * (n1 + n2);
                    for j in 0..n1 {
                        grads[a.0][i_row * n1 + j] += g_out[base + j];
                    }
                    for j in 0..n2 {
                        grads[b.0][i_row * n2 + j] += g_out[base + n1 + j];
                    }
                }
            }
            Op::StackRows { parts } => {
                let n = g_out.len() / parts.len();
                for (row_i, &p) in parts.iter().enumerate() {
                    axpy(1.0, &g_out[row_i * n..(row_i + 1) * n], &mut grads[p.0]);
                }
            }
            Op::Row { a, index } => {
                let n = g_out.len();
                axpy(1.0, g_out, &mut grads[a.0][index * n..(index + 1) * n]);
            }
            Op::Select { a, row, col } => {
                let n = shp(*a)[1];
                grads[a.0][row * n + col] += g_out[0];
            }
            Op::NarrowCols { a, start, len } => {
                let n = shp(*a)[1];
                let m = shp(*a)[0];
                for i_row in 0..m {
                    for j in 0..*len {
                        grads[a.0][i_row * n + start + j] += g_out[i_row * len + j];
                    }
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (shp(*a)[0], shp(*a)[1]);
                for i_row in 0..m {
                    for j in 0..n {
                        grads[a.0][i_row * n + j] += g_out[j * m + i_row];
                    }
                }
            }
            Op::LogSumExp { parts } => {
                let out = out_val[0];
                if out.is_finite() {
                    let g = g_out[0];
                    for &p in parts {
                        let v = self.nodes[p.0].tensor.data[0];
                        if v.is_finite() {
                            grads[p.0][0] += g * (v - out).exp();
                        }
                    }
                }
            }
            Op::Reshape { a } => axpy(1.0, g_out, &mut grads[a.0]),
            Op::PadRows { a, .. } => {
                let keep = grads[a.0].len();
                axpy(1.0, &g_out[..keep], &mut grads[a.0]);
            }
            Op::Conv3x3 { input, weight, bias } => {
                let (c_in, h, w) = (shp(*input)[0], shp(*input)[1], shp(*input)[2]);
                let c_out = shp(*weight)[0];
                // input, weight and bias are distinct nodes
                let mut gi = std::mem::take(&mut grads[input.0]);
                let mut gw = std::mem::take(&mut grads[weight.0]);
                let mut gb = std::mem::take(&mut grads[bias.0]);
                conv3x3_backward(
                    val(*input),
                    val(*weight),
                    g_out,
                    c_in,
                    c_out,
                    h,
                    w,
                    &mut gi,
                    &mut gw,
                    &mut gb,
                );
                grads[input.0] = gi;
                grads[weight.0] = gw;
                grads[bias.0] = gb;
            }
            Op::MaxPool2 { a, chosen } => {
                for (o, &src) in chosen.iter().enumerate() {
                    grads[a.0][src] += g_out[o];
                }
            }
            Op::ChannelsToRows { a } => {
                let (c, t_dim, f) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
                for ch in 0..c {
                    for t in 0..t_dim {
                        for j in 0..f {
                            grads[a.0][(ch * t_dim + t) * f + j] +=
                                g_out[t * (c * f) + ch * f + j];
                        }
                    }
                }
            }
        }
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

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out += A[m×k] · B[k×n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out += A[m×n] · B[k×n]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// out += A[m×k]ᵀ · B[m×n]
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
) {
    let hw = h * w;
    for co in 0..c_out {
        let out_plane = &mut out[co * hw..(co + 1) * hw];
        out_plane.fill(bias[co]);
        for ci in 0..c_in {
            let in_plane = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    shift_accumulate(in_plane, out_plane, h, w, dy, dx, wv);
                }
            }
        }
    }
}

/// out[y][x] += wv * in[y+dy][x+dx] over the valid range.
fn shift_accumulate(
    in_plane: &[f64],
    out_plane: &mut [f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    wv: f64,
) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let s0 = (sy * w) as isize + x0 as isize + dx;
        let src = &in_plane[s0 as usize..s0 as usize + (x1 - x0)];
        let dst = &mut out_plane[y * w + x0..y * w + x1];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += wv * s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    weight: &[f64],
    g_out: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    g_input: &mut [f64],
    g_weight: &mut [f64],
    g_bias: &mut [f64],
) {
    let hw = h * w;
    for co in 0..c_out {
        let g_plane = &g_out[co * hw..(co + 1) * hw];
        g_bias[co] += g_plane.iter().sum::<f64>();
        for ci in 0..c_in {
            let in_plane = &input[ci * hw..(ci + 1) * hw];
            let gi_plane = &mut g_input[ci * hw..(ci + 1) * hw];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let widx = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy.max(0)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)) as usize;
                    let mut wgrad = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            let g = g_plane[y * w + x];
                            wgrad += g * in_plane[sy * w + sx];
                            if wv != 0.0 {
                                gi_plane[sy * w + sx] += wv * g;
                            }
                        }
                    }
                    g_weight[widx] += wgrad;
                }
            }
        }
    }
}

/// Maximum relative error between analytic gradients and central finite
/// differences of a scalar-valued tensor function, taken over all
/// coordinates of `x`: |analytic − fd| / max(1e-8, |fd|).
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorRef) -> Result<TensorRef>,
{
    let mut tape = Tape::new();
    let xr = tape.leaf_from(x);
    let loss = f(&mut tape, xr)?;
    if tape.numel(loss) != 1 {
        return Err(Error::Contract(
            "finite_diff_check: function must be scalar-valued".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(xr)
        .expect("backward populates all gradients")
        .to_vec();

    let eval = |xt: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let r = t.leaf_from(xt);
        let l = f(&mut t, r)?;
        Ok(t.scalar_value(l))
    };

    let mut max_rel: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
