//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers. A [`Graph`] is a tape: every
//! operation appends a node holding its output tensor and the ids of its
//! inputs, so topological order is construction order and [`Graph::backward`]
//! is a single reverse sweep that visits each node exactly once.
//!
//! Gradient buffers are allocated only for nodes with `requires_grad`; a
//! node requires grad iff any of its inputs does. Frozen leaves therefore
//! never receive gradient storage, which is the property the trainer's
//! parameter freezing relies on.
//!
//! Broadcasting is deliberately absent except for bias addition over the
//! last dimension; everything else demands exact shapes so each gradient
//! rule stays auditable.

use crate::error::{Error, Result};

/// Dense n-dimensional tensor of 64-bit floats, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    /// Mark the tensor as a trainable leaf.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node in a [`Graph`]; the node id of the tensor it produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Gelu(Var),
    SoftmaxLastDim(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    ConcatLastDim(Vec<Var>),
    EmbedLookup { table: Var, ids: Vec<usize> },
    SelectPositions { x: Var, positions: Vec<usize> },
    SpanMean { x: Var, spans: Vec<(usize, usize)> },
    CrossEntropy { logits: Var, labels: Vec<i64>, ignore_index: i64 },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Computation tape. Nodes are appended in construction order, so every
/// input id precedes its consumer.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ran_backward: bool,
}

// ── raw matmul kernels ──────────────────────────────────────────────

/// out += a[m,k] · b[k,n]
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// out += a[m,k] · b[n,k]ᵀ  (i.e. a · bᵀ)
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            out_row[j] += s;
        }
    }
}

/// out += a[m,k]ᵀ · b[m,n]  (i.e. aᵀ · b)
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

fn softmax_rows(data: &[f64], rows: usize, d: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &data[r * d..(r + 1) * d];
        let out_row = &mut out[r * d..(r + 1) * d];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..d {
            let e = (row[j] - max).exp();
            out_row[j] = e;
            sum += e;
        }
        for v in out_row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Insert a leaf that never receives gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let mut t = Tensor::new(shape, data).expect("op output shape consistent");
        t.requires_grad = requires_grad;
        self.push(t, op)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Copy a node's value out of the graph (drops gradient).
    pub fn extract(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].tensor;
        Tensor::new(t.shape.clone(), t.data.clone()).expect("extract")
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    // ── forward operations ──────────────────────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension(format!("add: shapes {sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.out(sa, data, rg, Op::Add(a, b)))
    }

    /// `x[..., d] + bias[d]`, broadcasting the bias over leading dims.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let d = *sx.last().unwrap();
        if sb != vec![d] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {sb:?} must be [{d}] for input {sx:?}"
            )));
        }
        let bias_data = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias_data[i % d])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.out(sx, data, rg, Op::AddBias { x, bias }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension(format!("mul: shapes {sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.out(sa, data, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.out(shape, data, rg, Op::Scale(x, c))
    }

    /// Matrix product. 2-D inputs multiply directly; higher-rank inputs are
    /// treated as stacks of matrices and must share all leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Dimension(format!("matmul: shapes {sa:?} vs {sb:?}"));
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(err());
        }
        let nd = sa.len();
        if sa[..nd - 2] != sb[..nd - 2] || sa[nd - 1] != sb[nd - 2] {
            return Err(err());
        }
        let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
        let batch: usize = sa[..nd - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for t in 0..batch {
                mm_acc(
                    &da[t * m * k..(t + 1) * m * k],
                    &db[t * k * n..(t + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut data[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.out(shape, data, rg, Op::MatMul(a, b)))
    }

    /// Linear layer: `x[..., in] · w[in, out] + bias[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::Dimension(format!(
                "linear: input {sx:?} vs weight {sw:?}"
            )));
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let flat = self.reshape(x, vec![rows, sw[0]])?;
        let prod = self.matmul(flat, w)?;
        let with_bias = self.add_bias(prod, bias)?;
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(sw[1]);
        self.reshape(with_bias, out_shape)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let nd = sx.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Argument(format!(
                "permute: axes {axes:?} is not a permutation of 0..{nd}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let data = permute_data(self.data(x), &sx, axes);
        let rg = self.rg(x);
        Ok(self.out(out_shape, data, rg, Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Swap the last two axes of a stack of matrices.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::Dimension(format!(
                "transpose_last2: need rank >= 2, got {:?}",
                self.shape(x)
            )));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let old: usize = sx.iter().product();
        let new: usize = new_shape.iter().product();
        if old != new {
            return Err(Error::Dimension(format!(
                "reshape: {sx:?} ({old}) to {new_shape:?} ({new})"
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.out(new_shape, data, rg, Op::Reshape(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.rg(x);
        self.out(shape, data, rg, Op::Gelu(x))
    }

    /// Row-wise softmax over the last dimension, computed with
    /// max-subtraction so large logits cannot overflow.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput(
                "softmax_lastdim: non-finite input".into(),
            ));
        }
        let rows = self.data(x).len() / d;
        let mut data = vec![0.0; rows * d];
        softmax_rows(self.data(x), rows, d, &mut data);
        let rg = self.rg(x);
        Ok(self.out(shape, data, rg, Op::SoftmaxLastDim(x)))
    }

    /// Per-row normalization over the last dimension followed by the affine
    /// map `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if d == 0 {
            return Err(Error::Dimension("layer_norm: last dim is 0".into()));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{d}]",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.data(x).len() / d;
        let mut data = vec![0.0; rows * d];
        {
            let xd = self.data(x);
            let gd = self.data(gain);
            let bd = self.data(bias);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let out_row = &mut data[r * d..(r + 1) * d];
                for j in 0..d {
                    out_row[j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.out(shape, data, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Concatenate along the last dimension; all leading dims must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_lastdim: empty list".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp[..sp.len() - 1] != lead[..] {
                return Err(Error::Dimension(format!(
                    "concat_lastdim: leading dims {:?} vs {:?}",
                    &sp[..sp.len() - 1],
                    lead
                )));
            }
            widths.push(*sp.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.out(shape, data, rg, Op::ConcatLastDim(parts.to_vec())))
    }

    /// Row lookup: `out[i] = table[ids[i]]`, reshaped to `leading + [width]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize], leading: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Dimension(format!(
                "embed_lookup: table must be 2-D, got {st:?}"
            )));
        }
        let (v, w) = (st[0], st[1]);
        let count: usize = leading.iter().product();
        if count != ids.len() {
            return Err(Error::Argument(format!(
                "embed_lookup: {} ids vs leading shape {leading:?}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Vocabulary(format!(
                "embed_lookup: id {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = vec![0.0; count * w];
        {
            let td = self.data(table);
            for (i, &id) in ids.iter().enumerate() {
                data[i * w..(i + 1) * w].copy_from_slice(&td[id * w..(id + 1) * w]);
            }
        }
        let mut shape = leading.to_vec();
        shape.push(w);
        let rg = self.rg(table);
        Ok(self.out(shape, data, rg, Op::EmbedLookup { table, ids: ids.to_vec() }))
    }

    /// Pick one position per batch row: `x[b, l, w] -> out[b, w]`.
    pub fn select_positions(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dimension(format!(
                "select_positions: need [b, l, w], got {sx:?}"
            )));
        }
        let (b, l, w) = (sx[0], sx[1], sx[2]);
        if positions.len() != b {
            return Err(Error::Argument(format!(
                "select_positions: {} positions for batch {b}",
                positions.len()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::Annotation(format!(
                "select_positions: position {bad} out of range for length {l}"
            )));
        }
        let mut data = vec![0.0; b * w];
        {
            let xd = self.data(x);
            for (i, &p) in positions.iter().enumerate() {
                data[i * w..(i + 1) * w].copy_from_slice(&xd[(i * l + p) * w..(i * l + p + 1) * w]);
            }
        }
        let rg = self.rg(x);
        Ok(self.out(
            vec![b, w],
            data,
            rg,
            Op::SelectPositions { x, positions: positions.to_vec() },
        ))
    }

    /// Mean-pool a half-open token span per batch row: `x[b, l, w] -> out[b, w]`.
    pub fn span_mean(&mut self, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dimension(format!(
                "span_mean: need [b, l, w], got {sx:?}"
            )));
        }
        let (b, l, w) = (sx[0], sx[1], sx[2]);
        if spans.len() != b {
            return Err(Error::Argument(format!(
                "span_mean: {} spans for batch {b}",
                spans.len()
            )));
        }
        for &(s, e) in spans {
            if s >= e || e > l {
                return Err(Error::Annotation(format!(
                    "span_mean: span [{s}, {e}) invalid for length {l}"
                )));
            }
        }
        let mut data = vec![0.0; b * w];
        {
            let xd = self.data(x);
            for (i, &(s, e)) in spans.iter().enumerate() {
                let inv = 1.0 / (e - s) as f64;
                let out_row = &mut data[i * w..(i + 1) * w];
                for p in s..e {
                    let row = &xd[(i * l + p) * w..(i * l + p + 1) * w];
                    for j in 0..w {
                        out_row[j] += row[j] * inv;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.out(vec![b, w], data, rg, Op::SpanMean { x, spans: spans.to_vec() }))
    }

    /// Mean negative log-softmax probability over the non-ignored rows of
    /// `logits[rows, classes]`. Gradient is `(softmax - onehot) / n_effective`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore_index: i64) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits must be [rows, classes], got {sl:?}"
            )));
        }
        let (rows, classes) = (sl[0], sl[1]);
        if labels.len() != rows {
            return Err(Error::Argument(format!(
                "cross_entropy: {} labels for {rows} rows",
                labels.len()
            )));
        }
        let mut n_eff = 0usize;
        let mut total = 0.0;
        {
            let ld = self.data(logits);
            for (r, &label) in labels.iter().enumerate() {
                if label == ignore_index {
                    continue;
                }
                if label < 0 || label as usize >= classes {
                    return Err(Error::Argument(format!(
                        "cross_entropy: label {label} out of range [0, {classes})"
                    )));
                }
                let row = &ld[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total -= row[label as usize] - max - log_sum;
                n_eff += 1;
            }
        }
        if n_eff == 0 {
            return Err(Error::UndefinedLoss(
                "cross_entropy: every row is ignored".into(),
            ));
        }
        let rg = self.rg(logits);
        Ok(self.out(
            vec![1],
            vec![total / n_eff as f64],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), ignore_index },
        ))
    }

    /// Mean per-element sigmoid binary cross-entropy against multi-hot targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let numel = self.data(logits).len();
        if targets.len() != numel {
            return Err(Error::Argument(format!(
                "bce_with_logits: {} targets for {numel} logits",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (&x, &y) in self.data(logits).iter().zip(targets) {
            // max(x,0) - x*y + ln(1 + exp(-|x|)), the stable form
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let rg = self.rg(logits);
        Ok(self.out(
            vec![1],
            vec![total / numel as f64],
            rg,
            Op::BceWithLogits { logits, targets: targets.to_vec() },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.out(vec![1], vec![total], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let total: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.out(vec![1], vec![total / n], rg, Op::Mean(x))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// reachable node with `requires_grad`; nodes without it receive no
    /// gradient storage at all.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.ran_backward {
            return Err(Error::Argument(
                "backward: graph already swept; build a fresh graph per step".into(),
            ));
        }
        self.ran_backward = true;
        if !self.nodes[loss.0].tensor.requires_grad {
            // Loss built purely from frozen tensors: nothing to do, and no
            // gradient buffers get allocated anywhere.
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            let grad = match &self.nodes[idx].tensor.grad {
                Some(g) => g.clone(),
                None => continue, // not reachable from the loss
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::AddBias { x, bias } => {
                    self.accumulate(x, &grad);
                    if self.rg(bias) {
                        let d = self.shape(bias)[0];
                        let mut gb = vec![0.0; d];
                        for (i, g) in grad.iter().enumerate() {
                            gb[i % d] += g;
                        }
                        self.accumulate(bias, &gb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga: Vec<f64> =
                            grad.iter().zip(self.data(b)).map(|(g, v)| g * v).collect();
                        self.accumulate(a, &ga);
                    }
                    if self.rg(b) {
                        let gb: Vec<f64> =
                            grad.iter().zip(self.data(a)).map(|(g, v)| g * v).collect();
                        self.accumulate(b, &gb);
                    }
                }
                Op::Scale(x, c) => {
                    let gx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(x, &gx);
                }
                Op::MatMul(a, b) => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let nd = sa.len();
                    let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
                    let batch: usize = sa[..nd - 2].iter().product();
                    if self.rg(a) {
                        // dA = dC · Bᵀ
                        let mut ga = vec![0.0; batch * m * k];
                        let db = self.data(b);
                        for t in 0..batch {
                            mm_nt_acc(
                                &grad[t * m * n..(t + 1) * m * n],
                                &db[t * k * n..(t + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut ga[t * m * k..(t + 1) * m * k],
                            );
                        }
                        self.accumulate(a, &ga);
                    }
                    if self.rg(b) {
                        // dB = Aᵀ · dC
                        let mut gb = vec![0.0; batch * k * n];
                        let da = self.data(a);
                        for t in 0..batch {
                            mm_tn_acc(
                                &da[t * m * k..(t + 1) * m * k],
                                &grad[t * m * n..(t + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut gb[t * k * n..(t + 1) * k * n],
                            );
                        }
                        self.accumulate(b, &gb);
                    }
                }
                Op::Permute { x, axes } => {
                    let out_shape = self.shape(Var(idx)).to_vec();
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let gx = permute_data(&grad, &out_shape, &inverse);
                    self.accumulate(x, &gx);
                }
                Op::Reshape(x) => {
                    self.accumulate(x, &grad);
                }
                Op::Gelu(x) => {
                    let gx: Vec<f64> = grad
                        .iter()
                        .zip(self.data(x))
                        .map(|(g, &v)| g * gelu_grad_scalar(v))
                        .collect();
                    self.accumulate(x, &gx);
                }
                Op::SoftmaxLastDim(x) => {
                    let d = *self.shape(Var(idx)).last().unwrap();
                    let s = self.data(Var(idx));
                    let rows = s.len() / d;
                    let mut gx = vec![0.0; s.len()];
                    for r in 0..rows {
                        let sr = &s[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(x, &gx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *self.shape(x).last().unwrap();
                    let xd = self.data(x);
                    let gd = self.data(gain).to_vec();
                    let rows = xd.len() / d;
                    let mut gx = vec![0.0; xd.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        // x_hat and the gain-scaled upstream gradient
                        let mut mean_gg = 0.0;
                        let mut mean_gg_xhat = 0.0;
                        let mut xhat = vec![0.0; d];
                        let mut gg = vec![0.0; d];
                        for j in 0..d {
                            xhat[j] = (row[j] - mean) * inv_std;
                            gg[j] = gr[j] * gd[j];
                            mean_gg += gg[j];
                            mean_gg_xhat += gg[j] * xhat[j];
                        }
                        mean_gg /= d as f64;
                        mean_gg_xhat /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = (gg[j] - mean_gg - xhat[j] * mean_gg_xhat) * inv_std;
                            ggain[j] += gr[j] * xhat[j];
                            gbias[j] += gr[j];
                        }
                    }
                    self.accumulate(x, &gx);
                    if self.rg(gain) {
                        self.accumulate(gain, &ggain);
                    }
                    if self.rg(bias) {
                        self.accumulate(bias, &gbias);
                    }
                }
                Op::ConcatLastDim(parts) => {
                    let total = *self.shape(Var(idx)).last().unwrap();
                    let rows = grad.len() / total;
                    let mut offset = 0;
                    for &p in &parts {
                        let w = *self.shape(p).last().unwrap();
                        if self.rg(p) {
                            let mut gp = vec![0.0; rows * w];
                            for r in 0..rows {
                                gp[r * w..(r + 1) * w].copy_from_slice(
                                    &grad[r * total + offset..r * total + offset + w],
                                );
                            }
                            self.accumulate(p, &gp);
                        }
                        offset += w;
                    }
                }
                Op::EmbedLookup { table, ids } => {
                    if self.rg(table) {
                        let w = self.shape(table)[1];
                        let mut gt = vec![0.0; self.data(table).len()];
                        for (i, &id) in ids.iter().enumerate() {
                            let src = &grad[i * w..(i + 1) * w];
                            let dst = &mut gt[id * w..(id + 1) * w];
                            for j in 0..w {
                                dst[j] += src[j];
                            }
                        }
                        self.accumulate(table, &gt);
                    }
                }
                Op::SelectPositions { x, positions } => {
                    let sx = self.shape(x).to_vec();
                    let (l, w) = (sx[1], sx[2]);
                    let mut gx = vec![0.0; sx.iter().product()];
                    for (i, &p) in positions.iter().enumerate() {
                        gx[(i * l + p) * w..(i * l + p + 1) * w]
                            .copy_from_slice(&grad[i * w..(i + 1) * w]);
                    }
                    self.accumulate(x, &gx);
                }
                Op::SpanMean { x, spans } => {
                    let sx = self.shape(x).to_vec();
                    let (l, w) = (sx[1], sx[2]);
                    let mut gx = vec![0.0; sx.iter().product()];
                    for (i, &(s, e)) in spans.iter().enumerate() {
                        let inv = 1.0 / (e - s) as f64;
                        let src = &grad[i * w..(i + 1) * w];
                        for p in s..e {
                            let dst = &mut gx[(i * l + p) * w..(i * l + p + 1) * w];
                            for j in 0..w {
                                dst[j] += src[j] * inv;
                            }
                        }
                    }
                    self.accumulate(x, &gx);
                }
                Op::CrossEntropy { logits, labels, ignore_index } => {
                    let classes = self.shape(logits)[1];
                    let n_eff = labels.iter().filter(|&&l| l != ignore_index).count() as f64;
                    let ld = self.data(logits);
                    let mut gl = vec![0.0; ld.len()];
                    let upstream = grad[0];
                    for (r, &label) in labels.iter().enumerate() {
                        if label == ignore_index {
                            continue;
                        }
                        let row = &ld[r * classes..(r + 1) * classes];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        let out = &mut gl[r * classes..(r + 1) * classes];
                        for j in 0..classes {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == label as usize { 1.0 } else { 0.0 };
                            out[j] = upstream * (p - onehot) / n_eff;
                        }
                    }
                    self.accumulate(logits, &gl);
                }
                Op::BceWithLogits { logits, targets } => {
                    let n = targets.len() as f64;
                    let upstream = grad[0];
                    let gl: Vec<f64> = self
                        .data(logits)
                        .iter()
                        .zip(&targets)
                        .map(|(&x, &y)| {
                            let sig = 1.0 / (1.0 + (-x).exp());
                            upstream * (sig - y) / n
                        })
                        .collect();
                    self.accumulate(logits, &gl);
                }
                Op::Sum(x) => {
                    let gx = vec![grad[0]; self.data(x).len()];
                    self.accumulate(x, &gx);
                }
                Op::Mean(x) => {
                    let n = self.data(x).len();
                    let gx = vec![grad[0] / n as f64; n];
                    self.accumulate(x, &gx);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        let tensor = &mut self.nodes[v.0].tensor;
        if !tensor.requires_grad {
            return;
        }
        let grad = tensor
            .grad
            .get_or_insert_with(|| vec![0.0; tensor.data.len()]);
        debug_assert_eq!(grad.len(), contribution.len());
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd - 1).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; nd];
    for (out_idx, slot) in out.iter_mut().enumerate() {
        let mut rem = out_idx;
        for d in (0..nd).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut in_idx = 0;
        for d in 0..nd {
            in_idx += coords[d] * in_strides[axes[d]];
        }
        *slot = data[in_idx];
    }
    out
}
