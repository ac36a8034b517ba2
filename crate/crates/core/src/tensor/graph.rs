use super::{matmul_acc, matmul_at_acc, matmul_bt_acc, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    /// Input and the per-row `1 / sqrt(var + eps)` from the forward pass.
    NormalizeRows(usize, Vec<T>),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Reshape(usize),
    Sum(usize),
    MeanGroups(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Upsample(usize, Box<UpsampleTaps>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::MeanGroups(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::NormalizeRows(a, _)
            | Op::Upsample(a, _) => vec![*a],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

/// Precomputed bilinear taps for a `[h*w, d] -> [u*h*u*w, d]` upscale.
#[derive(Clone, Debug)]
struct UpsampleTaps {
    /// For every output pixel: four (source row, weight) pairs.
    taps: Vec<[(usize, f64); 4]>,
}

impl UpsampleTaps {
    /// Half-pixel-centre sampling with edge clamping (`align_corners = false`).
    fn new(h: usize, w: usize, factor: usize) -> Self {
        let axis = |n: usize| -> Vec<(usize, usize, f64)> {
            (0..n * factor)
                .map(|o| {
                    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n - 1);
                    let i1 = (i0 + 1).min(n - 1);
                    let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
                    (i0, i1, frac)
                })
                .collect()
        };
        let ys = axis(h);
        let xs = axis(w);
        let mut taps = Vec::with_capacity(ys.len() * xs.len());
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ]);
            }
        }
        Self { taps }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `var`; zero when the node was not reached.
    pub fn get(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// The tape: an append-only list of nodes in topological order.
///
/// One graph is a single-threaded unit. Build a fresh graph per forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    relu_signature: u64,
    faulty_backward: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_signature: FNV_OFFSET,
            faulty_backward: false,
        }
    }

    /// Corrupts the ReLU backward rule. Negative control for gradient checks.
    pub fn set_faulty_backward(&mut self, on: bool) {
        self.faulty_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of the sign pattern of every ReLU input seen so far. Two
    /// evaluations with equal signatures lie on the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(format!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.record(Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err(format!("matmul_bt {sa:?} x {sb:?}^T"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.record(Tensor::new(&[m, n], out)?, Op::MatMulBt(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err(format!("transpose of rank-{} tensor", s.len()));
        }
        let out = transpose(self.value(a).data(), s[0], s[1]);
        self.record(Tensor::new(&[s[1], s[0]], out)?, Op::Transpose(a.0))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op_name(&op))?;
        let va = self.value(a);
        let out: Vec<T> = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape(), out)?;
        self.record(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// Adds a vector of length `cols` to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        if self.value(row).len() != n {
            return shape_err(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(row)
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o = *o + v;
            }
        }
        let shape = self.shape(a).to_vec();
        self.record(Tensor::new(&shape, out)?, Op::AddRow(a.0, row.0))
    }

    /// Scales column `j` by `row[j]` (broadcast over leading axes).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        if self.value(row).len() != n {
            return shape_err(format!(
                "mul_row: {:?} * {:?}",
                self.shape(a),
                self.shape(row)
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o = *o * v;
            }
        }
        let shape = self.shape(a).to_vec();
        self.record(Tensor::new(&shape, out)?, Op::MulRow(a.0, row.0))
    }

    /// Standardises every row to zero mean and unit (biased) variance.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        if n == 0 {
            return shape_err("normalize_rows: empty rows");
        }
        let eps = T::from_f64(eps);
        let count = T::from_usize(n);
        let mut out = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / count;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = self.shape(a).to_vec();
        self.record(Tensor::new(&shape, out)?, Op::NormalizeRows(a.0, inv_std))
    }

    /// Scales row `i` by `col[i]` (broadcast over the last axis).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        if self.value(col).len() != m {
            return shape_err(format!(
                "mul_col: {:?} * {:?}",
                self.shape(a),
                self.shape(col)
            ));
        }
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o = *o * c[i];
            }
        }
        let shape = self.shape(a).to_vec();
        self.record(Tensor::new(&shape, out)?, Op::MulCol(a.0, col.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&x| x * c).collect())?;
        self.record(t, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&x| x + c).collect())?;
        self.record(t, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut sig = self.relu_signature;
        let v = self.value(a);
        let out: Vec<T> = v
            .data()
            .iter()
            .map(|&x| {
                sig = (sig ^ u64::from(x > T::zero())).wrapping_mul(FNV_PRIME);
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            })
            .collect();
        let t = Tensor::new(v.shape(), out)?;
        self.relu_signature = sig;
        self.record(t, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&x| sigmoid(x)).collect())?;
        self.record(t, Op::Sigmoid(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.record(t, Op::Reshape(a.0))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.record(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_usize(n))
    }

    /// Splits the rows into `groups` equal consecutive blocks and averages
    /// each block: `[g*m, n] -> [g, n]`.
    pub fn mean_groups(&mut self, a: Var, groups: usize) -> Result<Var> {
        let (rows, n) = self.matrix_dims(a);
        if groups == 0 || rows % groups != 0 {
            return shape_err(format!("mean_groups: {rows} rows into {groups} groups"));
        }
        let m = rows / groups;
        let inv = T::one() / T::from_usize(m);
        let data = self.value(a).data();
        let mut out = vec![T::zero(); groups * n];
        for g in 0..groups {
            let acc = &mut out[g * n..(g + 1) * n];
            for r in 0..m {
                let row = &data[(g * m + r) * n..(g * m + r + 1) * n];
                for (o, &v) in acc.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            for o in acc.iter_mut() {
                *o = *o * inv;
            }
        }
        self.record(Tensor::new(&[groups, n], out)?, Op::MeanGroups(a.0, groups))
    }

    /// Stacks matrices with equal column counts: result is `[sum rows, n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows of nothing");
        };
        let n = self.matrix_dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.matrix_dims(p);
            if c != n {
                return shape_err(format!("concat_rows: {c} columns vs {n}"));
            }
            out.extend_from_slice(self.value(p).data());
            rows += m;
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.record(Tensor::new(&[rows, n], out)?, Op::ConcatRows(ids))
    }

    /// Rows `start..start+len` of a matrix view.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        if start + len > m {
            return shape_err(format!("slice_rows {start}+{len} of {m}"));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.record(Tensor::new(&[len, n], out)?, Op::SliceRows(a.0, start))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols of nothing");
        };
        let m = self.matrix_dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p);
            if r != m {
                return shape_err(format!("concat_cols: {r} rows vs {m}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.record(Tensor::new(&[m, total], out)?, Op::ConcatCols(ids))
    }

    /// Columns `start..start+len` of a matrix view.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        if start + len > n {
            return shape_err(format!("slice_cols {start}+{len} of {n}"));
        }
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&data[i * n + start..i * n + start + len]);
        }
        self.record(Tensor::new(&[m, len], out)?, Op::SliceCols(a.0, start))
    }

    /// Row-wise softmax, max-shifted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let shape = self.shape(a).to_vec();
        self.record(Tensor::new(&shape, out)?, Op::SoftmaxRows(a.0))
    }

    /// Row-wise log-softmax via log-sum-exp.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.record(Tensor::new(&shape, out)?, Op::LogSoftmaxRows(a.0))
    }

    /// Bilinear upscale of an `[h*w, d]` grid by an integer factor.
    pub fn upsample_bilinear(&mut self, a: Var, h: usize, w: usize, factor: usize) -> Result<Var> {
        let (m, d) = self.matrix_dims(a);
        if m != h * w || h == 0 || w == 0 || factor == 0 {
            return shape_err(format!(
                "upsample: {:?} is not a {h}x{w} grid (factor {factor})",
                self.shape(a)
            ));
        }
        let taps = UpsampleTaps::new(h, w, factor);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); taps.taps.len() * d];
        for (o, tap) in taps.taps.iter().enumerate() {
            let dst = &mut out[o * d..(o + 1) * d];
            for &(s, wt) in tap {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::from_f64(wt);
                for (x, &v) in dst.iter_mut().zip(&src[s * d..(s + 1) * d]) {
                    *x = *x + wt * v;
                }
            }
        }
        let rows = taps.taps.len();
        self.record(
            Tensor::new(&[rows, d], out)?,
            Op::Upsample(a.0, Box::new(taps)),
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", lv.shape()));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..count).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |i: usize| self.nodes[i].value.data();
        let wants = |i: usize| self.nodes[i].requires_grad;

        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![T::zero(); self.nodes[i].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                acc(a, &mut |s| matmul_bt_acc(g, val(b), s, m, n, k));
                acc(b, &mut |s| matmul_at_acc(val(a), g, s, m, k, n));
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.rows();
                acc(a, &mut |s| matmul_acc(g, val(b), s, m, n, k));
                acc(b, &mut |s| matmul_at_acc(g, val(a), s, m, n, k));
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let gt = transpose(g, n, m);
                acc(a, &mut |s| add_into(s, &gt));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| add_into(s, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| {
                    for (x, &d) in s.iter_mut().zip(g) {
                        *x = *x - d;
                    }
                });
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |s| {
                    for ((x, &d), &y) in s.iter_mut().zip(g).zip(val(b)) {
                        *x = *x + d * y;
                    }
                });
                acc(b, &mut |s| {
                    for ((x, &d), &y) in s.iter_mut().zip(g).zip(val(a)) {
                        *x = *x + d * y;
                    }
                });
            }
            &Op::Div(a, b) => {
                acc(a, &mut |s| {
                    for ((x, &d), &y) in s.iter_mut().zip(g).zip(val(b)) {
                        *x = *x + d / y;
                    }
                });
                acc(b, &mut |s| {
                    for (((x, &d), &num), &den) in s.iter_mut().zip(g).zip(val(a)).zip(val(b)) {
                        *x = *x - d * num / (den * den);
                    }
                });
            }
            &Op::AddRow(a, r) => {
                let n = self.nodes[a].value.cols();
                acc(a, &mut |s| add_into(s, g));
                acc(r, &mut |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            &Op::MulRow(a, r) => {
                let n = self.nodes[a].value.cols();
                acc(a, &mut |s| {
                    for (srow, grow) in s.chunks_mut(n).zip(g.chunks(n)) {
                        for ((x, &d), &rv) in srow.iter_mut().zip(grow).zip(val(r)) {
                            *x = *x + d * rv;
                        }
                    }
                });
                acc(r, &mut |s| {
                    for (grow, arow) in g.chunks(n).zip(val(a).chunks(n)) {
                        for ((x, &d), &v) in s.iter_mut().zip(grow).zip(arow) {
                            *x = *x + d * v;
                        }
                    }
                });
            }
            Op::NormalizeRows(a, inv_std) => {
                let a = *a;
                let n = node.value.cols();
                let count = T::from_usize(n);
                acc(a, &mut |s| {
                    let rows = s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n));
                    for (((srow, grow), yrow), &inv) in rows.zip(inv_std) {
                        let g_mean = grow.iter().copied().sum::<T>() / count;
                        let gy_mean =
                            grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum::<T>() / count;
                        for ((x, &d), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x = *x + inv * (d - g_mean - y * gy_mean);
                        }
                    }
                });
            }
            &Op::MulCol(a, c) => {
                let n = self.nodes[a].value.cols();
                acc(a, &mut |s| {
                    for ((srow, grow), &cv) in s.chunks_mut(n).zip(g.chunks(n)).zip(val(c)) {
                        for (x, &d) in srow.iter_mut().zip(grow) {
                            *x = *x + d * cv;
                        }
                    }
                });
                acc(c, &mut |s| {
                    for ((x, grow), arow) in s.iter_mut().zip(g.chunks(n)).zip(val(a).chunks(n)) {
                        let dot: T = grow.iter().zip(arow).map(|(&d, &v)| d * v).sum();
                        *x = *x + dot;
                    }
                });
            }
            &Op::Scale(a, c) => {
                acc(a, &mut |s| {
                    for (x, &d) in s.iter_mut().zip(g) {
                        *x = *x + d * c;
                    }
                });
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, &mut |s| add_into(s, g)),
            &Op::Relu(a) => {
                let slope = if self.faulty_backward {
                    T::from_f64(1.5)
                } else {
                    T::one()
                };
                acc(a, &mut |s| {
                    for ((x, &d), &v) in s.iter_mut().zip(g).zip(val(a)) {
                        if v > T::zero() {
                            *x = *x + d * slope;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                acc(a, &mut |s| {
                    for ((x, &d), &y) in s.iter_mut().zip(g).zip(out) {
                        *x = *x + d * y * (T::one() - y);
                    }
                });
            }
            &Op::Sum(a) => {
                let d = g[0];
                acc(a, &mut |s| {
                    for x in s.iter_mut() {
                        *x = *x + d;
                    }
                });
            }
            &Op::MeanGroups(a, groups) => {
                let n = self.nodes[a].value.cols();
                let m = self.nodes[a].value.rows() / groups;
                let inv = T::one() / T::from_usize(m);
                acc(a, &mut |s| {
                    for (r, row) in s.chunks_mut(n).enumerate() {
                        let grow = &g[(r / m) * n..(r / m + 1) * n];
                        for (x, &d) in row.iter_mut().zip(grow) {
                            *x = *x + d * inv;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if wants(p) {
                        acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    }
                    offset += len;
                }
            }
            &Op::SliceRows(a, start) => {
                let n = self.nodes[a].value.cols();
                acc(a, &mut |s| {
                    add_into(&mut s[start * n..start * n + g.len()], g)
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    acc(p, &mut |s| {
                        for (srow, grow) in s.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(srow, &grow[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            &Op::SliceCols(a, start) => {
                let n = self.nodes[a].value.cols();
                let len = node.value.cols();
                acc(a, &mut |s| {
                    for (srow, grow) in s.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut srow[start..start + len], grow);
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                acc(a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                        for ((x, &d), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x = *x + y * (d - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(a) => {
                let n = node.value.cols();
                acc(a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n))
                    {
                        let total: T = grow.iter().copied().sum();
                        for ((x, &d), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x = *x + d - y.exp() * total;
                        }
                    }
                });
            }
            Op::Upsample(a, taps) => {
                let a = *a;
                let d = node.value.cols();
                acc(a, &mut |s| {
                    for (o, tap) in taps.taps.iter().enumerate() {
                        let grow = &g[o * d..(o + 1) * d];
                        for &(src, wt) in tap {
                            if wt == 0.0 {
                                continue;
                            }
                            let wt = T::from_f64(wt);
                            for (x, &gv) in s[src * d..(src + 1) * d].iter_mut().zip(grow) {
                                *x = *x + wt * gv;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &v) in dst.iter_mut().zip(src) {
        *x = *x + v;
    }
}

fn transpose<T: Scalar>(data: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulBt(..) => "matmul_bt",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::MulCol(..) => "mul_col",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::MeanGroups(..) => "mean_groups",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::Upsample(..) => "upsample_bilinear",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0)).unwrap();
        let b = g.constant(Tensor::full(&[3, 1], 1.0)).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(g.matmul(a, b).unwrap_err().kind(), "shape-error");
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f32>::new();
        let x = g
            .constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_add_matches_loop() {
        // C=2, n=1, d=2 tokens shifted by a d-vector.
        let tokens = [0.3, -1.2, 2.5, 0.7];
        let shift = [0.25, -0.5];
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 1, 2], &tokens)).unwrap();
        let r = g.constant(t(&[2], &shift)).unwrap();
        let y = g.add_row(a, r).unwrap();
        let mut expected = Vec::new();
        for c in 0..2 {
            for k in 0..2 {
                expected.push(tokens[c * 2 + k] + shift[k]);
            }
        }
        assert_eq!(g.value(y).data(), expected.as_slice());
        assert_eq!(g.shape(y), &[2, 1, 2]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_mean_relu() {
        let mut g = Graph::<f32>::new();
        let x = g
            .param(Tensor::new(&[2], vec![-1.0, 3.0]).unwrap())
            .unwrap();
        let r = g.relu(x).unwrap();
        let l = g.mean(r).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2])).unwrap();
        assert_eq!(g.backward(x).err().unwrap().kind(), "shape-error");
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(&[2], 1.0)).unwrap();
        let unused = g.param(Tensor::full(&[3], 1.0)).unwrap();
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[1], 1.0)).unwrap();
        let z = g.constant(Tensor::zeros(&[1])).unwrap();
        assert_eq!(g.div(a, z).unwrap_err().kind(), "numeric-error");
        assert_eq!(
            g.constant(Tensor::full(&[1], f32::NAN)).unwrap_err().kind(),
            "numeric-error"
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_at_extreme_logits() {
        let mut g = Graph::<f32>::new();
        let a = g
            .constant(Tensor::new(&[2, 3], vec![1000.0, 0.0, -1000.0, 5.0, 5.0, 5.0]).unwrap())
            .unwrap();
        let s = g.softmax_rows(a).unwrap();
        for r in g.value(s).data().chunks(3) {
            assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let ls = g.log_softmax_rows(a).unwrap();
        assert!(g.value(ls).is_finite());
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let mut g = Graph::<f64>::new();
        let a = g
            .constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -50.0, 0.0, 10.0, 100.0]))
            .unwrap();
        let y = g.normalize_rows(a, 0.0).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[3 * 2, 4], 2.5)).unwrap();
        let u = g.upsample_bilinear(a, 3, 2, 4).unwrap();
        assert_eq!(g.shape(u), &[12 * 8, 4]);
        assert!(g.value(u).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    /// Every op's backward rule against central differences on random inputs.
    #[test]
    fn op_jvps_match_finite_differences() {
        type Build = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
        let cases: Vec<(&str, [usize; 2], [usize; 2], Build)> = vec![
            ("matmul", [3, 4], [4, 2], |g, a, b| g.matmul(a, b)),
            ("matmul_bt", [3, 4], [2, 4], |g, a, b| g.matmul_bt(a, b)),
            ("transpose", [3, 4], [1, 1], |g, a, _| g.transpose(a)),
            ("add", [3, 4], [3, 4], |g, a, b| g.add(a, b)),
            ("sub", [3, 4], [3, 4], |g, a, b| g.sub(a, b)),
            ("mul", [3, 4], [3, 4], |g, a, b| g.mul(a, b)),
            ("div", [3, 4], [3, 4], |g, a, b| {
                let b2 = g.mul(b, b)?;
                let b3 = g.add_scalar(b2, 1.0)?;
                g.div(a, b3)
            }),
            ("add_row", [3, 4], [1, 4], |g, a, b| g.add_row(a, b)),
            ("mul_col", [3, 4], [3, 1], |g, a, b| g.mul_col(a, b)),
            ("mul_row", [3, 4], [1, 4], |g, a, b| g.mul_row(a, b)),
            ("normalize_rows", [3, 4], [1, 1], |g, a, _| {
                g.normalize_rows(a, 1e-5)
            }),
            ("scale", [3, 4], [1, 1], |g, a, _| g.scale(a, -1.7)),
            ("add_scalar", [3, 4], [1, 1], |g, a, _| g.add_scalar(a, 0.3)),
            ("relu", [3, 4], [1, 1], |g, a, _| g.relu(a)),
            ("sigmoid", [3, 4], [1, 1], |g, a, _| g.sigmoid(a)),
            ("reshape", [3, 4], [1, 1], |g, a, _| g.reshape(a, &[2, 6])),
            ("mean_groups", [4, 3], [1, 1], |g, a, _| g.mean_groups(a, 2)),
            ("concat_rows", [3, 4], [2, 4], |g, a, b| {
                g.concat_rows(&[a, b, a])
            }),
            ("slice_rows", [3, 4], [1, 1], |g, a, _| {
                g.slice_rows(a, 1, 2)
            }),
            ("concat_cols", [3, 4], [3, 2], |g, a, b| {
                g.concat_cols(&[b, a])
            }),
            ("slice_cols", [3, 4], [1, 1], |g, a, _| {
                g.slice_cols(a, 1, 2)
            }),
            ("softmax_rows", [3, 4], [1, 1], |g, a, _| g.softmax_rows(a)),
            ("log_softmax_rows", [3, 4], [1, 1], |g, a, _| {
                g.log_softmax_rows(a)
            }),
            ("upsample", [6, 2], [1, 1], |g, a, _| {
                g.upsample_bilinear(a, 3, 2, 3)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, sa, sb, build) in cases {
            let a0: Vec<f64> = (0..sa[0] * sa[1])
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let b0: Vec<f64> = (0..sb[0] * sb[1])
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let w_len = {
                let mut g = Graph::<f64>::new();
                let a = g.constant(t(&sa, &a0)).unwrap();
                let b = g.constant(t(&sb, &b0)).unwrap();
                let y = build(&mut g, a, b).unwrap();
                g.value(y).len()
            };
            // Random projection makes the output scalar: JVP check along every input axis.
            let proj: Vec<f64> = (0..w_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eval = |a_val: &[f64], b_val: &[f64], grads: bool| {
                let mut g = Graph::<f64>::new();
                let a = g.leaf(t(&sa, a_val), grads).unwrap();
                let b = g.leaf(t(&sb, b_val), grads).unwrap();
                let y = build(&mut g, a, b).unwrap();
                let shape = g.shape(y).to_vec();
                let p = g.constant(t(&shape, &proj)).unwrap();
                let yp = g.mul(y, p).unwrap();
                let l = g.sum(yp).unwrap();
                let value = g.value(l).item().unwrap();
                let gr = grads.then(|| {
                    let gr = g.backward(l).unwrap();
                    (gr.get(a).into_data(), gr.get(b).into_data())
                });
                (value, gr)
            };
            let (_, gr) = eval(&a0, &b0, true);
            let (ga, gb) = gr.unwrap();
            let eps = 1e-5;
            for (which, base, analytic) in [(0, &a0, &ga), (1, &b0, &gb)] {
                for i in 0..base.len() {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    plus[i] += eps;
                    minus[i] -= eps;
                    let (fp, fm) = if which == 0 {
                        (eval(&plus, &b0, false).0, eval(&minus, &b0, false).0)
                    } else {
                        (eval(&a0, &plus, false).0, eval(&a0, &minus, false).0)
                    };
                    let numeric = (fp - fm) / (2.0 * eps);
                    let a = analytic[i];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{name} input {which}[{i}]: {a} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w0: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grads_for = |alpha: f64, beta: f64| {
            let mut g = Graph::<f64>::new();
            let x = g.param(t(&[2, 3], &x0)).unwrap();
            let w = g.param(t(&[3, 2], &w0)).unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.relu(h).unwrap();
            let l1 = g.sum(h).unwrap();
            let s = g.softmax_rows(x).unwrap();
            let l2 = g.mean(s).unwrap();
            let sq = g.mul(x, x).unwrap();
            let l2b = g.sum(sq).unwrap();
            let l2 = g.add(l2, l2b).unwrap();
            let a = g.scale(l1, alpha).unwrap();
            let b = g.scale(l2, beta).unwrap();
            let l = g.add(a, b).unwrap();
            let gr = g.backward(l).unwrap();
            (gr.get(x).into_data(), gr.get(w).into_data())
        };
        let (a, b) = (0.7, -1.3);
        let (gx, gw) = grads_for(a, b);
        let (gx1, gw1) = grads_for(1.0, 0.0);
        let (gx2, gw2) = grads_for(0.0, 1.0);
        for i in 0..6 {
            assert!((gx[i] - (a * gx1[i] + b * gx2[i])).abs() < 1e-6);
            assert!((gw[i] - (a * gw1[i] + b * gw2[i])).abs() < 1e-6);
        }
    }
}
