//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive in creation order, so indices are
//! already a topological order and the reverse sweep visits each node once.
//! Values are treated as matrices: a vector of length `c` is a `1 x c` row.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    Clamp(usize, T, T),
    Minimum(usize, usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Reshape(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: Axis,
    },
    Slice {
        src: usize,
        axis: Axis,
        start: usize,
    },
    SelectCols {
        src: usize,
        cols: Rc<[usize]>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Kl {
        p: usize,
        q: usize,
        p_probs: Vec<T>,
        q_probs: Vec<T>,
        log_ratio: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of primitive operations with parent links.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor<impl Scalar>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn check_finite<T: Scalar>(op: &str, t: &Tensor<T>) -> Result<()> {
    if t.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("NaN input to {op}")));
    }
    Ok(())
}

/// Stable row softmax with an optional visibility mask; masked entries get 0.
fn softmax_row<T: Scalar>(row: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let visible = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if visible(j) && x > max {
            max = x;
        }
    }
    let mut total = T::zero();
    for (j, &x) in row.iter().enumerate() {
        let e = if visible(j) { (x - max).exp() } else { T::zero() };
        out[j] = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let lse = logsumexp(row);
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`.
fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let rg = parents.iter().any(|&p| self.nodes[p].value.requires_grad());
        let value = value.with_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims(av), dims(bv));
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (dims(av), dims(bv));
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ai = &av.data()[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ai, &bv.data()[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims(av);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a.0), &[a.0]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        self.push(t, op, &[a.0, b.0])
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        self.push(t, op, &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip_with(a, b, Op::Minimum(a.0, b.0), |x, y| if x <= y { x } else { y }))
    }

    /// Adds a length-`c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.numel() != c {
            return Err(Error::Dimension {
                op: "add_row",
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(rv.data()).for_each(|(x, &b)| *x += b);
        }
        let t = Tensor::new(av.shape(), data)?;
        Ok(self.push(t, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, Op::AddScalar(a.0), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a.0), T::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a.0), T::ln)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a.0), gelu)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.map(a, Op::Clamp(a.0, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::lit(av.numel() as f64);
        let s: T = av.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a.0), &[a.0])
    }

    /// Column-wise mean: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims(av);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            out.iter_mut().zip(av.row(i)).for_each(|(o, &x)| *o += x);
        }
        let n = T::lit(r as f64);
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::MeanRows(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Row softmax where `mask[i * c + j] == false` hides entry `(i, j)`.
    /// Every row must keep at least one visible entry.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        check_finite("softmax_rows", av)?;
        let (r, c) = dims(av);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Shape(format!("mask length {} for {r}x{c}", m.len())));
            }
            if (0..r).any(|i| !m[i * c..(i + 1) * c].iter().any(|&v| v)) {
                return Err(Error::Domain("softmax row with every entry masked".into()));
            }
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let mrow = mask.map(|m| &m[i * c..(i + 1) * c]);
            softmax_row(av.row(i), mrow, &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(av.shape(), out)?;
        Ok(self.push(t, Op::Softmax(a.0), &[a.0]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_finite("log_softmax_rows", av)?;
        let (r, c) = dims(av);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            log_softmax_row(av.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(av.shape(), out)?;
        Ok(self.push(t, Op::LogSoftmax(a.0), &[a.0]))
    }

    /// Row-wise log-sum-exp: `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_finite("logsumexp_rows", av)?;
        let r = av.rows();
        let out: Vec<T> = (0..r).map(|i| logsumexp(av.row(i))).collect();
        Ok(self.push(Tensor::new(&[r, 1], out)?, Op::LogSumExp(a.0), &[a.0]))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = dims(xv);
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let n = T::lit(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        };
        Ok(self.push(t, op, &[x.0, gain.0, bias.0]))
    }

    /// Gathers rows of a `V x d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = dims(tv);
        if ids.is_empty() {
            return Err(Error::Shape("empty id list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let op = Op::Embedding {
            table: table.0,
            ids: ids.to_vec(),
        };
        Ok(self.push(t, op, &[table.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (r0, c0) = dims(self.value(*first));
        for p in &parts[1..] {
            let (r, c) = dims(self.value(*p));
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    left: vec![r0, c0],
                    right: vec![r, c],
                });
            }
        }
        let (shape, data) = match axis {
            Axis::Rows => {
                let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for p in parts {
                    data.extend_from_slice(self.value(*p).data());
                }
                (vec![rows, c0], data)
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row(i));
                    }
                }
                (vec![r0, cols], data)
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::new(&shape, data)?;
        let op = Op::Concat {
            parts: ids.clone(),
            axis,
        };
        Ok(self.push(t, op, &ids))
    }

    /// Contiguous slice of `len` rows or columns starting at `start`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims(av);
        let bound = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if len == 0 || start + len > bound {
            return Err(Error::Index {
                what: "slice end",
                index: start + len,
                bound,
            });
        }
        let (shape, data) = match axis {
            Axis::Rows => (vec![len, c], av.data()[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&av.row(i)[start..start + len]);
                }
                (vec![r, len], data)
            }
        };
        let t = Tensor::new(&shape, data)?;
        let op = Op::Slice { src: a.0, axis, start };
        Ok(self.push(t, op, &[a.0]))
    }

    /// Selects the given columns of every row: `r x c -> r x k`.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims(av);
        if cols.is_empty() {
            return Err(Error::Shape("empty column selection".into()));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Index {
                what: "column",
                index: bad,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = av.row(i);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        let t = Tensor::new(&[r, cols.len()], data)?;
        let op = Op::SelectCols {
            src: a.0,
            cols: cols.into(),
        };
        Ok(self.push(t, op, &[a.0]))
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.cross_entropy_rows(logits, &[target])
    }

    /// Mean over rows of `-log softmax(row)[target_row]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_finite("cross_entropy", lv)?;
        let (r, c) = dims(lv);
        if targets.len() != r {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    what: "target class",
                    index: t,
                    bound: c,
                });
            }
            let row = lv.row(i);
            loss += logsumexp(row) - row[t];
            softmax_row(row, None, &mut probs[i * c..(i + 1) * c]);
        }
        loss /= T::lit(r as f64);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits.0]))
    }

    /// `KL(softmax(p) || softmax(q))` for two single rows of logits.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.numel() != qv.numel() {
            return Err(Error::Dimension {
                op: "kl_divergence",
                left: pv.shape().to_vec(),
                right: qv.shape().to_vec(),
            });
        }
        check_finite("kl_divergence", pv)?;
        check_finite("kl_divergence", qv)?;
        let (value, p_probs, q_probs, log_ratio) = kl_parts(pv.data(), qv.data());
        let op = Op::Kl {
            p: p.0,
            q: q.0,
            p_probs,
            q_probs,
            log_ratio,
        };
        Ok(self.push(Tensor::scalar(value), op, &[p.0, q.0]))
    }

    /// Populates gradients of every node that requires them. Gradients add
    /// onto whatever is already stored until [`Tape::zero_grad`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |p: usize| nodes[p].value.requires_grad();
        let val = |p: usize| &nodes[p].value;
        let out = &nodes[i].value;
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [T])| {
            if !needs(p) {
                return;
            }
            let buf = adj[p].get_or_insert_with(|| vec![T::zero(); nodes[p].value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = dims(av);
                let n = bv.cols();
                acc(*a, &mut |buf| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            buf[r * k + p] += dot(gr, bv.row(p));
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av.data()[r * k + p];
                            if a_rp == T::zero() {
                                continue;
                            }
                            for (bb, &gv) in buf[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *bb += a_rp * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = dims(av);
                let n = bv.rows();
                acc(*a, &mut |buf| matmul_into(g, bv.data(), buf, m, n, k));
                acc(*b, &mut |buf| {
                    for r in 0..m {
                        let ar = av.row(r);
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == T::zero() {
                                continue;
                            }
                            for (bb, &x) in buf[j * k..(j + 1) * k].iter_mut().zip(ar) {
                                *bb += gv * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = dims(val(*a));
                acc(*a, &mut |buf| {
                    for x in 0..r {
                        for y in 0..c {
                            buf[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, &v)| *x -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * av[j];
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        if av[j] <= bv[j] {
                            buf[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for j in 0..buf.len() {
                        if av[j] > bv[j] {
                            buf[j] += g[j];
                        }
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |buf| add_into(buf, g));
                let c = out.cols();
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(c) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, &v)| *x += v * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Exp(a) => acc(*a, &mut |buf| {
                for ((x, &v), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *x += v * y;
                }
            }),
            Op::Log(a) => {
                let av = val(*a).data();
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] / av[j];
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a).data();
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * gelu_grad(av[j]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a).data();
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        if av[j] >= *lo && av[j] <= *hi {
                            buf[j] += g[j];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = T::lit(val(*a).numel() as f64);
                acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MeanRows(a) => {
                let (r, c) = dims(val(*a));
                let n = T::lit(r as f64);
                acc(*a, &mut |buf| {
                    for chunk in buf.chunks_mut(c) {
                        chunk.iter_mut().zip(g).for_each(|(x, &v)| *x += v / n);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                acc(*a, &mut |buf| {
                    for (r, s) in out.data().chunks(c).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let inner = dot(gr, s);
                        for j in 0..c {
                            buf[r * c + j] += s[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                acc(*a, &mut |buf| {
                    for (r, ls) in out.data().chunks(c).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let total: T = gr.iter().copied().sum();
                        for j in 0..c {
                            buf[r * c + j] += gr[j] - ls[j].exp() * total;
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let av = val(*a);
                let c = av.cols();
                acc(*a, &mut |buf| {
                    for r in 0..av.rows() {
                        let lse = out.data()[r];
                        for j in 0..c {
                            buf[r * c + j] += g[r] * (av.row(r)[j] - lse).exp();
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gd = val(*gain).data();
                let n = T::lit(c as f64);
                acc(*x, &mut |buf| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gd[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..c {
                            let dh = gr[j] * gd[j];
                            buf[r * c + j] += is * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for gr in g.chunks(c) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total_c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = dims(val(p));
                    match axis {
                        Axis::Rows => {
                            let span = pr * pc;
                            acc(p, &mut |buf| add_into(buf, &g[offset..offset + span]));
                            offset += span;
                        }
                        Axis::Cols => {
                            acc(p, &mut |buf| {
                                for r in 0..pr {
                                    let src = &g[r * total_c + offset..r * total_c + offset + pc];
                                    add_into(&mut buf[r * pc..(r + 1) * pc], src);
                                }
                            });
                            offset += pc;
                        }
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (sr, sc) = dims(val(*src));
                let (or, oc) = dims(out);
                acc(*src, &mut |buf| match axis {
                    Axis::Rows => add_into(&mut buf[start * sc..(start + or) * sc], g),
                    Axis::Cols => {
                        for r in 0..sr {
                            let dst = &mut buf[r * sc + start..r * sc + start + oc];
                            add_into(dst, &g[r * oc..(r + 1) * oc]);
                        }
                    }
                });
            }
            Op::SelectCols { src, cols } => {
                let sc = val(*src).cols();
                let k = cols.len();
                acc(*src, &mut |buf| {
                    for (r, gr) in g.chunks(k).enumerate() {
                        for (&j, &v) in cols.iter().zip(gr) {
                            buf[r * sc + j] += v;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = val(*logits).cols();
                let scale = g[0] / T::lit(targets.len() as f64);
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            buf[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Kl {
                p,
                q,
                p_probs,
                q_probs,
                log_ratio,
            } => {
                let kl = out.data()[0];
                acc(*p, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[0] * p_probs[j] * (log_ratio[j] - kl);
                    }
                });
                acc(*q, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[0] * (q_probs[j] - p_probs[j]);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Value, `softmax(p)`, `softmax(q)` and `log p - log q` for KL.
fn kl_parts<T: Scalar>(p: &[T], q: &[T]) -> (T, Vec<T>, Vec<T>, Vec<T>) {
    let c = p.len();
    let mut lp = vec![T::zero(); c];
    let mut lq = vec![T::zero(); c];
    log_softmax_row(p, &mut lp);
    log_softmax_row(q, &mut lq);
    let p_probs: Vec<T> = lp.iter().map(|x| x.exp()).collect();
    let q_probs: Vec<T> = lq.iter().map(|x| x.exp()).collect();
    let log_ratio: Vec<T> = lp.iter().zip(&lq).map(|(&a, &b)| a - b).collect();
    let mut value = T::zero();
    for j in 0..c {
        if p_probs[j] > T::zero() {
            value += p_probs[j] * log_ratio[j];
        }
    }
    (value, p_probs, q_probs, log_ratio)
}

/// Stable softmax of a plain slice.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    softmax_row(logits, None, &mut out);
    out
}

/// Stable log-softmax of a plain slice.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    log_softmax_row(logits, &mut out);
    out
}

/// `KL(softmax(p) || softmax(q))` without recording a graph.
pub fn kl_from_logits<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            op: "kl_divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    if p.iter().chain(q).any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN input to kl_divergence".into()));
    }
    Ok(kl_parts(p, q).0)
}
