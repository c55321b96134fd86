use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn nth(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Transpose { x: Var },
    Attention { qkv: Var, seq_len: usize, heads: usize, probs: Vec<T> },
    Tokens { patches: Var, cls: Var, pos: Var, batch: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    PoolPatches { x: Var, seq_len: usize },
    L2Normalize { x: Var, norms: Vec<T> },
    AngularMargin { cos: Var, targets: Vec<usize>, slopes: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse { a: Var, b: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Transpose { .. } => "transpose",
            Op::Attention { .. } => "attention",
            Op::Tokens { .. } => "tokens",
            Op::GatherRows { .. } => "gather_rows",
            Op::PoolPatches { .. } => "pool_patches",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::AngularMargin { .. } => "angular_margin",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations recorded during a forward pass.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros for unreachable nodes.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // Returns (Φ(x), φ(x)) for the standard normal.
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).error_fn());
    let pdf = (-(x * x) * half).exp() * T::of(0.398_942_280_401_432_7);
    (cdf, pdf)
}

pub(crate) fn softmax_slice<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Turns on the per-op NaN/Inf check.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
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

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(Error::shape(format!("{what} expects a matrix, got shape {shape:?}")));
        }
        Ok((shape[0], shape[1]))
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// Matrix product `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner extents differ: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push(Tensor::new([m, n], out)?, Op::MatMulNt { a, b }, &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).as_matrix();
        if self.value(bias).numel() != cols {
            return Err(Error::shape(format!(
                "bias of shape {:?} does not match last extent of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            add_into(row, b);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total: T = v.data().iter().copied().sum();
        let mean = total / T::of(v.numel() as f64);
        self.push(Tensor::scalar(mean), Op::Mean { x }, &[x])
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = src.to_vec();
        let mut buf = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[(o * len + j) * inner + i];
                }
                softmax_slice(&mut buf);
                for (j, &b) in buf.iter().enumerate() {
                    out[(o * len + j) * inner + i] = b;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Per-row normalization over the last axis followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, d) = self.value(x).as_matrix();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last extent {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let n = T::of(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * gelu_parts(v).0);
        self.push(value, Op::Gelu { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new([n, m], out)?, Op::Transpose { x }, &[x])
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(batch·seq_len) × 3d` holding the query, key and value
    /// projections side by side; the result is `(batch·seq_len) × d`. Each
    /// sequence of `seq_len` rows attends only within itself, and logits are
    /// scaled by `1/√(d/heads)`.
    pub fn attention(&mut self, qkv: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.matrix(qkv, "attention")?;
        if seq_len == 0 || rows % seq_len != 0 || width % 3 != 0 {
            return Err(Error::shape(format!(
                "attention input {:?} is not (batch·{seq_len}) × 3d",
                self.shape(qkv)
            )));
        }
        let d = width / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("embed dim {d} not divisible by {heads} heads")));
        }
        let batch = rows / seq_len;
        let dh = d / heads;
        let t = seq_len;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * t * t];
        let mut out = vec![T::zero(); rows * d];
        let w = width as isize;
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * width + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                T::gemm(
                    t,
                    dh,
                    t,
                    scale,
                    &src[base..],
                    (w, 1),
                    &src[base + d..],
                    (1, w),
                    T::zero(),
                    p,
                    (t as isize, 1),
                );
                for row in p.chunks_mut(t) {
                    softmax_slice(row);
                }
                T::gemm(
                    t,
                    t,
                    dh,
                    T::one(),
                    p,
                    (t as isize, 1),
                    &src[base + 2 * d..],
                    (w, 1),
                    T::zero(),
                    &mut out[b * t * d + h * dh..],
                    (d as isize, 1),
                );
            }
        }
        let value = Tensor::new([rows, d], out)?;
        self.push(value, Op::Attention { qkv, seq_len, heads, probs }, &[qkv])
    }

    /// Attention weights saved by an [`attention`](Self::attention) node,
    /// laid out as `batch × heads × seq × seq`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Builds the token sequence for `batch` images: per image, the
    /// classification token followed by its projected patches, with the
    /// positional embedding added to every row.
    ///
    /// `patches` is `(batch·P) × d`, `cls` holds `d` values, `pos` is `(1+P) × d`.
    pub fn tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (prow, d) = self.matrix(patches, "tokens")?;
        let (seq, d2) = self.matrix(pos, "tokens")?;
        if d != d2 || self.value(cls).numel() != d || batch == 0 || prow != batch * (seq - 1) {
            return Err(Error::shape(format!(
                "tokens: patches {:?}, cls {:?}, pos {:?} inconsistent for batch {batch}",
                self.shape(patches),
                self.shape(cls),
                self.shape(pos)
            )));
        }
        let p = self.value(patches).data();
        let c = self.value(cls).data();
        let e = self.value(pos).data();
        let mut out = Vec::with_capacity(batch * seq * d);
        for b in 0..batch {
            out.extend(c.iter().zip(&e[..d]).map(|(&x, &y)| x + y));
            for i in 1..seq {
                let prow = &p[(b * (seq - 1) + i - 1) * d..][..d];
                out.extend(prow.iter().zip(&e[i * d..(i + 1) * d]).map(|(&x, &y)| x + y));
            }
        }
        let value = Tensor::new([batch * seq, d], out)?;
        self.push(value, Op::Tokens { patches, cls, pos, batch }, &[patches, cls, pos])
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows needs at least one row"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape(format!("row {bad} out of range for {m} rows")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let value = Tensor::new([rows.len(), n], out)?;
        self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Mean over rows `1..seq_len` of each length-`seq_len` segment, skipping
    /// the classification token in row 0. Output is `batch × d`.
    pub fn pool_patches(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let (m, d) = self.matrix(x, "pool_patches")?;
        if seq_len < 2 || m % seq_len != 0 {
            return Err(Error::shape(format!(
                "pool_patches: {m} rows is not a multiple of sequence length {seq_len} >= 2"
            )));
        }
        let batch = m / seq_len;
        let src = self.value(x).data();
        let inv = T::one() / T::of((seq_len - 1) as f64);
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            let acc = &mut out[b * d..(b + 1) * d];
            for i in 1..seq_len {
                add_into(acc, &src[(b * seq_len + i) * d..][..d]);
            }
            acc.iter_mut().for_each(|v| *v = *v * inv);
        }
        let value = Tensor::new([batch, d], out)?;
        self.push(value, Op::PoolPatches { x, seq_len }, &[x])
    }

    /// Scales each row to unit L2 norm. A zero row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix();
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(Error::invalid(format!("cannot normalize zero vector (row {r})")));
            }
            norms.push(norm);
            for j in 0..d {
                out[r * d + j] = row[j] / norm;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Additive angular margin on the target entry of each row of cosines.
    ///
    /// The target `cos θ` becomes `cos(θ + margin)` while `θ + margin ≤ π`,
    /// i.e. while `cos θ > cos(π − margin)`; past that point the plain cosine
    /// is kept. Non-target entries pass through unchanged.
    pub fn angular_margin(&mut self, cos: Var, targets: &[usize], margin: T) -> Result<Var> {
        let (rows, classes) = self.matrix(cos, "angular_margin")?;
        if targets.len() != rows {
            return Err(Error::shape(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::invalid(format!("target {bad} out of range for {classes} classes")));
        }
        let pi = T::of(std::f64::consts::PI);
        if !(margin >= T::zero() && margin < pi) {
            return Err(Error::invalid(format!("margin must lie in [0, π), got {margin}")));
        }
        let threshold = (pi - margin).cos();
        let (cm, sm) = (margin.cos(), margin.sin());
        let mut out = self.value(cos).data().to_vec();
        let mut slopes = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            let c = out[r * classes + t].min(T::one()).max(-T::one());
            if c > threshold {
                let s = (T::one() - c * c).max(T::zero()).sqrt();
                out[r * classes + t] = c * cm - s * sm;
                let s_floor = s.max(T::of(1e-6));
                slopes.push(cm + c * sm / s_floor);
            } else {
                out[r * classes + t] = c;
                slopes.push(T::one());
            }
        }
        let value = Tensor::new([rows, classes], out)?;
        self.push(value, Op::AngularMargin { cos, targets: targets.to_vec(), slopes }, &[cos])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::shape(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[label]);
            softmax_slice(&mut probs[r * classes..(r + 1) * classes]);
        }
        let value = Tensor::scalar(loss / T::of(rows as f64));
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let total: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(total / T::of(va.len() as f64));
        self.push(value, Op::Mse { a, b }, &[a, b])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).as_matrix().1;
                let (ki, ni) = (k as isize, n as isize);
                if let Some(da) = self.accumulate(grads, *a) {
                    let bv = self.value(*b).data();
                    T::gemm(m, n, k, T::one(), g, (ni, 1), bv, (1, ni), T::one(), da, (ki, 1));
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    let av = self.value(*a).data();
                    T::gemm(k, m, n, T::one(), av, (1, ki), g, (ni, 1), T::one(), db, (ni, 1));
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).as_matrix().0;
                let (ki, ni) = (k as isize, n as isize);
                if let Some(da) = self.accumulate(grads, *a) {
                    let bv = self.value(*b).data();
                    T::gemm(m, n, k, T::one(), g, (ni, 1), bv, (ki, 1), T::one(), da, (ki, 1));
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    let av = self.value(*a).data();
                    T::gemm(n, m, k, T::one(), g, (1, ni), av, (ki, 1), T::one(), db, (ki, 1));
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.accumulate(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.accumulate(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for (d, &s) in db.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.accumulate(grads, *a) {
                    for ((d, &s), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d = *d + s * y;
                    }
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for ((d, &s), &x) in db.iter_mut().zip(g).zip(va) {
                        *d = *d + s * x;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.accumulate(grads, *bias) {
                    let cols = db.len();
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    for (d, &s) in dx.iter_mut().zip(g) {
                        *d = *d + s * *factor;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    let s = g[0] / T::of(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    let (len, inner) = (*len, *inner);
                    for o in 0..*outer {
                        for c in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + c;
                            let dot: T = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                let k = idx(j);
                                dx[k] = dx[k] + out[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                if let Some(dg) = self.accumulate(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gam = self.value(*gamma).data().to_vec();
                    let dx = self.accumulate(grads, *x).expect("requires grad");
                    let n = T::of(d as f64);
                    let mut dh = vec![T::zero(); d];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..d {
                            let k = r * d + j;
                            dx[k] = dx[k] + rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, &s), &v) in dx.iter_mut().zip(g).zip(xv) {
                        let (cdf, pdf) = gelu_parts(v);
                        *d = *d + s * (cdf + v * pdf);
                    }
                }
            }
            Op::Transpose { x } => {
                let (m, n) = self.value(*x).as_matrix();
                if let Some(dx) = self.accumulate(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = dx[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Attention { qkv, seq_len, heads, probs } => {
                self.attention_backward(*qkv, *seq_len, *heads, probs, g, grads);
            }
            Op::Tokens { patches, cls, pos, batch } => {
                let d = self.value(*cls).numel();
                let seq = self.value(*pos).as_matrix().0;
                if let Some(dp) = self.accumulate(grads, *patches) {
                    for b in 0..*batch {
                        for i in 1..seq {
                            let src = &g[(b * seq + i) * d..][..d];
                            add_into(&mut dp[(b * (seq - 1) + i - 1) * d..][..d], src);
                        }
                    }
                }
                if let Some(dc) = self.accumulate(grads, *cls) {
                    for b in 0..*batch {
                        add_into(dc, &g[b * seq * d..][..d]);
                    }
                }
                if let Some(de) = self.accumulate(grads, *pos) {
                    for chunk in g.chunks(seq * d) {
                        add_into(de, chunk);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let n = self.value(*x).as_matrix().1;
                if let Some(dx) = self.accumulate(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::PoolPatches { x, seq_len } => {
                let d = self.value(*x).as_matrix().1;
                let inv = T::one() / T::of((*seq_len - 1) as f64);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for (b, gr) in g.chunks(d).enumerate() {
                        for i in 1..*seq_len {
                            let dst = &mut dx[(b * seq_len + i) * d..][..d];
                            for (t, &s) in dst.iter_mut().zip(gr) {
                                *t = *t + s * inv;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = self.value(*x).as_matrix().1;
                if let Some(dx) = self.accumulate(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            let k = r * d + j;
                            dx[k] = dx[k] + (gr[j] - y[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::AngularMargin { cos, targets, slopes } => {
                let classes = self.value(*cos).as_matrix().1;
                if let Some(dc) = self.accumulate(grads, *cos) {
                    add_into(dc, g);
                    for (r, (&t, &slope)) in targets.iter().zip(slopes).enumerate() {
                        let k = r * classes + t;
                        dc[k] = dc[k] - g[k] + g[k] * slope;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.value(*logits).as_matrix().1;
                let s = g[0] / T::of(labels.len() as f64);
                if let Some(dl) = self.accumulate(grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let k = r * classes + j;
                            let target = if j == label { T::one() } else { T::zero() };
                            dl[k] = dl[k] + s * (probs[k] - target);
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = T::of(2.0) * g[0] / T::of(va.len() as f64);
                if let Some(da) = self.accumulate(grads, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(va).zip(vb) {
                        *d = *d + s * (x - y);
                    }
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(va).zip(vb) {
                        *d = *d - s * (x - y);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        qkv: Var,
        t: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let src = self.value(qkv).data();
        let (rows, width) = self.value(qkv).as_matrix();
        let Some(dqkv) = self.accumulate(grads, qkv) else { return };
        let d = width / 3;
        let dh = d / heads;
        let batch = rows / t;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (w, ti, di) = (width as isize, t as isize, d as isize);
        let mut dp = vec![T::zero(); t * t];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * width + h * dh;
                let p = &probs[(b * heads + h) * t * t..][..t * t];
                let go = &g[b * t * d + h * dh..];
                // dP = dO · Vᵀ
                T::gemm(t, dh, t, T::one(), go, (di, 1), &src[base + 2 * d..], (1, w), T::zero(), &mut dp, (ti, 1));
                // dV += Pᵀ · dO
                T::gemm(t, t, dh, T::one(), p, (1, ti), go, (di, 1), T::one(), &mut dqkv[base + 2 * d..], (w, 1));
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot);
                    }
                }
                // dQ += scale · dS · K ; dK += scale · dSᵀ · Q
                T::gemm(t, t, dh, scale, &dp, (ti, 1), &src[base + d..], (w, 1), T::one(), &mut dqkv[base..], (w, 1));
                T::gemm(t, t, dh, scale, &dp, (1, ti), &src[base..], (w, 1), T::one(), &mut dqkv[base + d..], (w, 1));
            }
        }
    }
}
