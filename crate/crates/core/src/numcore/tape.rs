//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and whatever the backward rule needs, so
//! insertion order is already a topological order and `backward` is a
//! single reverse sweep that visits every node once.

use crate::error::{shape_err, Error, Result};

use super::dense::{dot, gemm_nn, gemm_nt, gemm_tn, Real};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Neg,
    Relu,
    Silu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Binary { kind: BinKind, a: Var, b: Var, bc: Bcast },
    Unary { kind: UnKind, a: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    ClampMin { a: Var, c: T },
    Tril { a: Var },
    Softmax { a: Var },
    Transpose { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Gather { table: Var, ids: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    SumCols { a: Var },
    MeanPoolCols { a: Var, window: usize },
    CumsumRows { a: Var },
    Rope { a: Var, cos: Vec<T>, sin: Vec<T> },
    RmsNorm { a: Var, w: Var, inv_rms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Attention { q: Var, k: Var, v: Var, scale: T, window: usize, meta: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Computation record for one forward pass, `f32` by default.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

fn bcast_of(a: (usize, usize), b: (usize, usize)) -> Option<Bcast> {
    if a == b {
        Some(Bcast::Same)
    } else if b == (1, 1) {
        Some(Bcast::Scalar)
    } else if b == (1, a.1) {
        Some(Bcast::Row)
    } else if b == (a.0, 1) {
        Some(Bcast::Col)
    } else {
        None
    }
}

#[inline]
fn bidx(bc: Bcast, i: usize, j: usize, cols: usize) -> usize {
    match bc {
        Bcast::Same => i * cols + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn to_t<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a long-lived
    /// tape can keep its leading constants and be reused per step.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
        name: &'static str,
    ) -> Result<Var> {
        value.check_finite(name)?;
        Ok(self.push(value, op, inputs))
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; `backward` accumulates into its gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra ----

    fn mm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!(
                "matmul inner extents differ: [{ar},{ac}]{} x [{br},{bc}]{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            match (ta, tb) {
                (false, false) => gemm_nn(m, k, n, ad, bd, &mut out),
                (false, true) => gemm_nt(m, k, n, ad, bd, &mut out),
                (true, false) => gemm_tn(m, k, n, ad, bd, &mut out),
                (true, true) => {
                    return Err(Error::Contract("matmul with both operands transposed".into()))
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.checked(t, Op::MatMul { a, b, ta, tb }, &[a, b], "matmul")
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, true)
    }

    /// `a[k,m]ᵀ · b[k,n]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, true, false)
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let bc = match bcast_of(sa, sb) {
            Some(bc) => bc,
            None => {
                return shape_err(format!(
                    "cannot broadcast [{},{}] onto [{},{}]",
                    sb.0, sb.1, sa.0, sa.1
                ))
            }
        };
        let (m, n) = sa;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let x = av[i * n + j];
                let y = bv[bidx(bc, i, j, n)];
                out[i * n + j] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                };
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        self.checked(t, Op::Binary { kind, a, b, bc }, &[a, b], name)
    }

    /// `a + b`; `b` may be same-shape, a row `[1,n]`, a column `[m,1]`, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if let UnKind::Log = kind {
            if src.data().iter().any(|&x| x <= T::zero()) {
                return Err(Error::Domain("log of a non-positive value".into()));
            }
        }
        let f: fn(T) -> T = match kind {
            UnKind::Exp => T::exp,
            UnKind::Log => T::ln,
            UnKind::Sigmoid => sigmoid,
            UnKind::Softplus => softplus,
            UnKind::Neg => |x| -x,
            UnKind::Relu => |x| x.max(T::zero()),
            UnKind::Silu => |x| x * sigmoid(x),
        };
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let name = match kind {
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Softplus => "softplus",
            UnKind::Neg => "neg",
            UnKind::Relu => "relu",
            UnKind::Silu => "silu",
        };
        self.checked(t, Op::Unary { kind, a }, &[a], name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Softplus, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Relu, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Silu, a)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.checked(t, Op::Scale { a, c }, &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| x + c).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.checked(t, Op::AddScalar { a }, &[a], "add_scalar")
    }

    /// `max(a, c)` elementwise; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| x.max(c)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.checked(t, Op::ClampMin { a, c }, &[a], "clamp_min")
    }

    /// Zeroes entries strictly above the diagonal (causal multiplicative mask).
    pub fn tril(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let mut t = self.nodes[a.0].value.clone();
        let d = t.data_mut();
        for i in 0..m {
            for j in (i + 1).min(n)..n {
                d[i * n + j] = T::zero();
            }
        }
        Ok(self.push(t, Op::Tril { a }, &[a]))
    }

    /// Row-wise softmax with an optional additive mask of `0` / `-inf` entries.
    ///
    /// The denominator is accumulated in `f64` after max subtraction. Masked
    /// entries come out as exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(mask) = mask {
            if mask.dims2() != (m, n) {
                return shape_err(format!(
                    "mask {:?} does not match scores [{m},{n}]",
                    mask.shape()
                ));
            }
        }
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mrow = mask.map(|mk| &mk.data()[i * n..(i + 1) * n]);
            softmax_row_into(row, mrow, &mut out[i * n..(i + 1) * n])
                .map_err(|_| Error::DegenerateRow { row: i })?;
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.checked(t, Op::Softmax { a }, &[a], "softmax_rows")
    }

    // ---- structural ----

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Transpose { a }, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > m {
            return shape_err(format!("row slice {start}..{} of {m} rows", start + len));
        }
        let src = self.nodes[a.0].value.data();
        let t = Tensor::new(vec![len, n], src[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(t, Op::SliceRows { a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return shape_err(format!("col slice {start}..{} of {n} cols", start + len));
        }
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        Ok(self.push(t, Op::SliceCols { a, start }, &[a]))
    }

    /// Concatenates along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let m = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != m) {
            return shape_err("concat_cols row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        Ok(self.push(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Concatenates along the first (time) dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let n = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != n) {
            return shape_err("concat_rows column counts differ");
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
            m += self.shape(p).0;
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Row lookup (embedding).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, n) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let src = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            out.extend_from_slice(src.row(id));
        }
        let t = Tensor::new(vec![ids.len(), n], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|x| x.f64()).sum();
        self.checked(Tensor::scalar(T::of(s)), Op::Sum { a }, &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let src = self.nodes[a.0].value.data();
        let s: f64 = src.iter().map(|x| x.f64()).sum();
        let t = Tensor::scalar(T::of(s / src.len().max(1) as f64));
        self.checked(t, Op::Mean { a }, &[a], "mean")
    }

    /// Sums each row, giving `[m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let out = (0..m)
            .map(|i| T::of(src.row(i).iter().map(|x| x.f64()).sum::<f64>()))
            .collect();
        let t = Tensor::new(vec![m, 1], out)?;
        self.checked(t, Op::SumCols { a }, &[a], "sum_cols")
    }

    /// Averages non-overlapping windows of `window` adjacent columns,
    /// giving `[m, n / window]`.
    pub fn mean_pool_cols(&mut self, a: Var, window: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if window == 0 || n % window != 0 {
            return shape_err(format!("pool window {window} does not divide {n} columns"));
        }
        let w = n / window;
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            let row = src.row(i);
            for p in 0..w {
                let s: f64 = row[p * window..(p + 1) * window]
                    .iter()
                    .map(|x| x.f64())
                    .sum();
                out.push(T::of(s / window as f64));
            }
        }
        let t = Tensor::new(vec![m, w], out)?;
        self.checked(t, Op::MeanPoolCols { a, window }, &[a], "mean_pool_cols")
    }

    /// Running sum over rows (the time axis).
    pub fn cumsum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = self.nodes[a.0].value.data();
        let mut acc = vec![0.0f64; n];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                acc[j] += src[i * n + j].f64();
                out[i * n + j] = T::of(acc[j]);
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.checked(t, Op::CumsumRows { a }, &[a], "cumsum_rows")
    }

    // ---- fused model ops ----

    /// Rotary embedding on pairs `(2j, 2j+1)` with angle `p·base^(-2j/d)`.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let (m, d) = self.shape(a);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even width, got {d}")));
        }
        if positions.len() != m {
            return shape_err(format!("{} positions for {m} rows", positions.len()));
        }
        let (cos, sin) = rope_tables(positions, d, base);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); m * d];
        rotate_pairs(src, &mut out, &cos, &sin, d, false);
        let t = Tensor::new(vec![m, d], out)?;
        Ok(self.push(t, Op::Rope { a, cos, sin }, &[a]))
    }

    /// Root-mean-square normalisation of each row, scaled by `w[1,n]`.
    pub fn rms_norm(&mut self, a: Var, w: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(w) != (1, n) {
            return shape_err("rms_norm weight must be [1, n]");
        }
        let src = self.nodes[a.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![T::zero(); m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let ms = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>() / n as f64;
            let r = T::of(1.0 / (ms + eps).sqrt());
            inv_rms.push(r);
            for j in 0..n {
                out[i * n + j] = row[j] * r * wv[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.checked(t, Op::RmsNorm { a, w, inv_rms }, &[a, w], "rms_norm")
    }

    /// Weighted mean token-level negative log-likelihood.
    ///
    /// Rows with zero weight are ignored; the result is
    /// `Σ wᵢ·(-log pᵢ[tᵢ]) / Σ wᵢ`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (m, v) = self.shape(logits);
        if targets.len() != m || weights.len() != m {
            return shape_err(format!(
                "cross_entropy: {m} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let wsum: f64 = weights.iter().map(|w| w.f64()).sum();
        if wsum <= 0.0 {
            return Err(Error::Contract("cross_entropy with zero total weight".into()));
        }
        let src = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); m * v];
        let mut total = 0.0f64;
        for i in 0..m {
            let row = &src[i * v..(i + 1) * v];
            let mx = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x.f64() - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..v {
                probs[i * v + j] = T::of((row[j].f64() - lz).exp());
            }
            if weights[i] != T::zero() {
                total += weights[i].f64() * (lz - row[targets[i]].f64());
            }
        }
        let t = Tensor::scalar(T::of(total / wsum));
        self.checked(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.iter().map(|w| T::of(w.f64() / wsum)).collect(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Causal softmax attention restricted to the `window` most recent
    /// positions plus the first `meta` positions, evaluated only over the
    /// allowed band. `window >= L` with `meta = 0` is plain causal attention.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        scale: T,
        window: usize,
        meta: usize,
    ) -> Result<Var> {
        let (l, d) = self.shape(q);
        let (lk, dk) = self.shape(k);
        let (lv, dv) = self.shape(v);
        if d != dk || l != lk || l != lv {
            return shape_err(format!(
                "attention shapes q[{l},{d}] k[{lk},{dk}] v[{lv},{dv}]"
            ));
        }
        if window == 0 {
            return Err(Error::Config("attention window must be at least 1".into()));
        }
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut out = vec![T::zero(); l * dv];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        let mut acc = vec![0.0f64; dv];
        for i in 0..l {
            scores.clear();
            let qi = &qd[i * d..(i + 1) * d];
            for t in band(i, window, meta) {
                scores.push(dot(qi, &kd[t * d..(t + 1) * d]) * scale.f64());
            }
            super::dense::count_muls((scores.len() * (d + dv)) as u64);
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (s, t) in scores.iter().zip(band(i, window, meta)) {
                let p = s / z;
                probs.push(T::of(p));
                for (a, &x) in acc.iter_mut().zip(&vd[t * dv..(t + 1) * dv]) {
                    *a += p * x.f64();
                }
            }
            for (o, a) in out[i * dv..(i + 1) * dv].iter_mut().zip(&acc) {
                *o = T::of(*a);
            }
        }
        let t = Tensor::new(vec![l, dv], out)?;
        self.checked(
            t,
            Op::Attention {
                q,
                k,
                v,
                scale,
                window,
                meta,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`; gradients are added to whatever
    /// the trainable leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |v: Var, gv: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, &gv),
                slot => *slot = Some(gv),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, n) = out.dims2();
                let ad = val(a).data();
                let bd = val(b).data();
                match (ta, tb) {
                    (false, false) => {
                        let k = val(a).cols();
                        if wants(a) {
                            let mut ga = vec![T::zero(); m * k];
                            gemm_nt(m, n, k, g, bd, &mut ga);
                            send(a, ga);
                        }
                        if wants(b) {
                            let mut gb = vec![T::zero(); k * n];
                            gemm_tn(k, m, n, ad, g, &mut gb);
                            send(b, gb);
                        }
                    }
                    (false, true) => {
                        let k = val(a).cols();
                        if wants(a) {
                            let mut ga = vec![T::zero(); m * k];
                            gemm_nn(m, n, k, g, bd, &mut ga);
                            send(a, ga);
                        }
                        if wants(b) {
                            let mut gb = vec![T::zero(); n * k];
                            gemm_tn(n, m, k, g, ad, &mut gb);
                            send(b, gb);
                        }
                    }
                    (true, false) => {
                        let k = val(a).rows();
                        if wants(a) {
                            let mut ga = vec![T::zero(); k * m];
                            gemm_nt(k, n, m, bd, g, &mut ga);
                            send(a, ga);
                        }
                        if wants(b) {
                            let mut gb = vec![T::zero(); k * n];
                            gemm_nn(k, m, n, ad, g, &mut gb);
                            send(b, gb);
                        }
                    }
                    (true, true) => unreachable!("rejected in forward"),
                }
            }
            &Op::Binary { kind, a, b, bc } => {
                let (m, n) = out.dims2();
                let av = val(a).data();
                let bv = val(b).data();
                let bl = val(b).numel();
                if wants(a) {
                    let ga: Vec<T> = match kind {
                        BinKind::Add | BinKind::Sub => g.to_vec(),
                        BinKind::Mul => (0..m * n)
                            .map(|p| g[p] * bv[bidx(bc, p / n, p % n, n)])
                            .collect(),
                        BinKind::Div => (0..m * n)
                            .map(|p| g[p] / bv[bidx(bc, p / n, p % n, n)])
                            .collect(),
                    };
                    send(a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0f64; bl];
                    for i in 0..m {
                        for j in 0..n {
                            let p = i * n + j;
                            let q = bidx(bc, i, j, n);
                            let contrib = match kind {
                                BinKind::Add => g[p],
                                BinKind::Sub => -g[p],
                                BinKind::Mul => g[p] * av[p],
                                BinKind::Div => -g[p] * out.data()[p] / bv[q],
                            };
                            gb[q] += contrib.f64();
                        }
                    }
                    send(b, to_t(gb));
                }
            }
            &Op::Unary { kind, a } => {
                let x = val(a).data();
                let y = out.data();
                let ga = (0..g.len())
                    .map(|p| {
                        g[p] * match kind {
                            UnKind::Exp => y[p],
                            UnKind::Log => T::one() / x[p],
                            UnKind::Sigmoid => y[p] * (T::one() - y[p]),
                            UnKind::Softplus => sigmoid(x[p]),
                            UnKind::Neg => -T::one(),
                            UnKind::Relu => {
                                if x[p] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnKind::Silu => {
                                let s = sigmoid(x[p]);
                                s * (T::one() + x[p] * (T::one() - s))
                            }
                        }
                    })
                    .collect();
                send(a, ga);
            }
            &Op::Scale { a, c } => send(a, g.iter().map(|&x| x * c).collect()),
            &Op::AddScalar { a } => send(a, g.to_vec()),
            &Op::ClampMin { a, c } => {
                let x = val(a).data();
                send(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi >= c { gi } else { T::zero() })
                        .collect(),
                );
            }
            &Op::Tril { a } => {
                let (m, n) = out.dims2();
                let mut ga = g.to_vec();
                for i in 0..m {
                    for j in (i + 1).min(n)..n {
                        ga[i * n + j] = T::zero();
                    }
                }
                send(a, ga);
            }
            &Op::Softmax { a } => {
                let (m, n) = out.dims2();
                let y = out.data();
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let s = T::of(dot(yr, gr));
                    for j in 0..n {
                        ga[i * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                send(a, ga);
            }
            &Op::Transpose { a } => {
                let (m, n) = out.dims2();
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[j * m + i] = g[i * n + j];
                    }
                }
                send(a, ga);
            }
            &Op::SliceRows { a, start } => {
                let n = out.cols();
                let mut ga = vec![T::zero(); val(a).numel()];
                ga[start * n..start * n + g.len()].copy_from_slice(g);
                send(a, ga);
            }
            &Op::SliceCols { a, start } => {
                let (m, len) = out.dims2();
                let n = val(a).cols();
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(a, ga);
            }
            Op::ConcatCols { parts } => {
                let (m, total) = out.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        send(p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if wants(p) {
                        send(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::Gather { table, ids } => {
                let (v, n) = val(*table).dims2();
                let mut gt = vec![T::zero(); v * n];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                }
                send(*table, gt);
            }
            &Op::Sum { a } => send(a, vec![g[0]; val(a).numel()]),
            &Op::Mean { a } => {
                let k = val(a).numel();
                send(a, vec![g[0] / T::of(k as f64); k]);
            }
            &Op::SumCols { a } => {
                let (m, n) = val(a).dims2();
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    ga[i * n..(i + 1) * n].iter_mut().for_each(|x| *x = g[i]);
                }
                send(a, ga);
            }
            &Op::MeanPoolCols { a, window } => {
                let (m, n) = val(a).dims2();
                let w = n / window;
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[i * w + j / window] / T::of(window as f64);
                    }
                }
                send(a, ga);
            }
            &Op::CumsumRows { a } => {
                let (m, n) = out.dims2();
                let mut acc = vec![0.0f64; n];
                let mut ga = vec![T::zero(); m * n];
                for i in (0..m).rev() {
                    for j in 0..n {
                        acc[j] += g[i * n + j].f64();
                        ga[i * n + j] = T::of(acc[j]);
                    }
                }
                send(a, ga);
            }
            Op::Rope { a, cos, sin } => {
                let d = out.cols();
                let mut ga = vec![T::zero(); g.len()];
                rotate_pairs(g, &mut ga, cos, sin, d, true);
                send(*a, ga);
            }
            Op::RmsNorm { a, w, inv_rms } => {
                let (m, n) = out.dims2();
                let x = val(*a).data();
                let wv = val(*w).data();
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * n];
                    for i in 0..m {
                        let r = inv_rms[i].f64();
                        let xr = &x[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let ux: f64 = (0..n)
                            .map(|j| gr[j].f64() * wv[j].f64() * xr[j].f64())
                            .sum();
                        let coef = r * r * r * ux / n as f64;
                        for j in 0..n {
                            ga[i * n + j] =
                                T::of(r * gr[j].f64() * wv[j].f64() - coef * xr[j].f64());
                        }
                    }
                    send(*a, ga);
                }
                if wants(*w) {
                    let mut gw = vec![0.0f64; n];
                    for i in 0..m {
                        let r = inv_rms[i].f64();
                        for j in 0..n {
                            gw[j] += g[i * n + j].f64() * x[i * n + j].f64() * r;
                        }
                    }
                    send(*w, to_t(gw));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (m, v) = val(*logits).dims2();
                let mut gl = vec![T::zero(); m * v];
                for i in 0..m {
                    let wi = weights[i] * g[0];
                    if wi == T::zero() {
                        continue;
                    }
                    for j in 0..v {
                        gl[i * v + j] = wi * probs[i * v + j];
                    }
                    gl[i * v + targets[i]] = gl[i * v + targets[i]] - wi;
                }
                send(*logits, gl);
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                window,
                meta,
                probs,
            } => {
                let (l, d) = val(*q).dims2();
                let dv = val(*v).cols();
                let qd = val(*q).data();
                let kd = val(*k).data();
                let vd = val(*v).data();
                let sc = scale.f64();
                let mut gq = vec![0.0f64; l * d];
                let mut gk = vec![0.0f64; l * d];
                let mut gv = vec![0.0f64; l * dv];
                let mut off = 0;
                let mut ds = Vec::new();
                for i in 0..l {
                    let gi = &g[i * dv..(i + 1) * dv];
                    ds.clear();
                    let mut c = 0.0;
                    for (j, t) in band(i, *window, *meta).enumerate() {
                        let p = probs[off + j].f64();
                        let dp = dot(gi, &vd[t * dv..(t + 1) * dv]);
                        c += p * dp;
                        ds.push((p, dp));
                        for (a, &x) in gv[t * dv..(t + 1) * dv].iter_mut().zip(gi) {
                            *a += p * x.f64();
                        }
                    }
                    for (j, t) in band(i, *window, *meta).enumerate() {
                        let (p, dp) = ds[j];
                        let s = sc * p * (dp - c);
                        for e in 0..d {
                            gq[i * d + e] += s * kd[t * d + e].f64();
                            gk[t * d + e] += s * qd[i * d + e].f64();
                        }
                    }
                    off += ds.len();
                }
                send(*q, to_t(gq));
                send(*k, to_t(gk));
                send(*v, to_t(gv));
            }
        }
    }
}

/// Key positions visible from query `i`: the first `meta` positions plus
/// the `window` most recent ones, in increasing order.
pub(crate) fn band(i: usize, window: usize, meta: usize) -> impl Iterator<Item = usize> {
    let lo = (i + 1).saturating_sub(window);
    let head = 0..meta.min(lo);
    head.chain(lo..i + 1)
}

/// Softmax of one row with an optional additive mask, written into `out`.
/// Fails when every entry is masked.
pub(crate) fn softmax_row_into<T: Real>(
    row: &[T],
    mask: Option<&[T]>,
    out: &mut [T],
) -> Result<(), ()> {
    let masked = |j: usize| mask.is_some_and(|mk| mk[j] == T::neg_infinity());
    let shifted = |j: usize| row[j].f64() + mask.map_or(0.0, |mk| mk[j].f64());
    let mut mx = f64::NEG_INFINITY;
    for j in 0..row.len() {
        if !masked(j) {
            mx = mx.max(shifted(j));
        }
    }
    if mx == f64::NEG_INFINITY {
        return Err(());
    }
    let mut z = 0.0f64;
    let mut e = vec![0.0f64; row.len()];
    for j in 0..row.len() {
        if !masked(j) {
            e[j] = (shifted(j) - mx).exp();
            z += e[j];
        }
    }
    let inv = 1.0 / z;
    for (o, ej) in out.iter_mut().zip(e) {
        *o = T::of(ej * inv);
    }
    Ok(())
}

pub(crate) fn rope_tables<T: Real>(positions: &[usize], d: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for j in 0..half {
            let theta = p as f64 * base.powf(-2.0 * j as f64 / d as f64);
            cos.push(T::of(theta.cos()));
            sin.push(T::of(theta.sin()));
        }
    }
    (cos, sin)
}

pub(crate) fn rotate_pairs<T: Real>(
    src: &[T],
    dst: &mut [T],
    cos: &[T],
    sin: &[T],
    d: usize,
    inverse: bool,
) {
    let half = d / 2;
    let rows = src.len() / d;
    for i in 0..rows {
        for j in 0..half {
            let c = cos[i * half + j];
            let s = if inverse { -sin[i * half + j] } else { sin[i * half + j] };
            let x0 = src[i * d + 2 * j];
            let x1 = src[i * d + 2 * j + 1];
            dst[i * d + 2 * j] = x0 * c - x1 * s;
            dst[i * d + 2 * j + 1] = x0 * s + x1 * c;
        }
    }
}
