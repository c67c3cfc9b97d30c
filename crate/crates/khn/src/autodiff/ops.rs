//! Differentiable tensor operations recorded on a [`Tape`].
//!
//! Ops validate shapes and numeric domains up front, compute the forward
//! value, and register a backward closure that turns the output adjoint
//! into per-input gradient contributions. Binary ops broadcast by the
//! trailing-dimension rule (dimensions align right; extents must match or
//! be 1).

use super::tape::{BackwardFn, Tape};
use super::Tensor;
use crate::{Error, Result};

/// Broadcast result shape under the trailing-dimension rule.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Flat index into `in_shape` for every flat index of `out_shape`.
fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let offset = rank - in_shape.len();

    let mut in_strides = vec![0usize; in_shape.len()];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i] = s;
        s *= in_shape[i];
    }

    // stride per out dim, zero where the input broadcasts
    let stride: Vec<usize> = (0..rank)
        .map(|i| {
            if i < offset || in_shape[i - offset] == 1 {
                0
            } else {
                in_strides[i - offset]
            }
        })
        .collect();

    let mut map = Vec::with_capacity(out_numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..out_numel {
        map.push(idx.iter().zip(&stride).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn elementwise_binary(
    tape: &Tape,
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    // (a_i, b_i) -> (d out_i / d a_i, d out_i / d b_i)
    df: fn(f64, f64) -> (f64, f64),
) -> Result<Tensor> {
    let (a_shape, b_shape) = (a.shape(), b.shape());
    let out_shape = broadcast_shape(&a_shape, &b_shape)?;
    let a_data = a.to_vec();
    let b_data = b.to_vec();

    if a_shape == b_shape {
        // fast path: no index mapping
        let data: Vec<f64> = a_data.iter().zip(&b_data).map(|(&x, &y)| f(x, y)).collect();
        let backward: BackwardFn = Box::new(move |go| {
            let mut da = vec![0.0; a_data.len()];
            let mut db = vec![0.0; b_data.len()];
            for i in 0..go.len() {
                let (pa, pb) = df(a_data[i], b_data[i]);
                da[i] = go[i] * pa;
                db[i] = go[i] * pb;
            }
            vec![Some(da), Some(db)]
        });
        return tape.push(op, &[a, b], out_shape, data, backward);
    }

    let map_a = broadcast_index_map(&a_shape, &out_shape);
    let map_b = broadcast_index_map(&b_shape, &out_shape);
    let data: Vec<f64> = map_a
        .iter()
        .zip(&map_b)
        .map(|(&ia, &ib)| f(a_data[ia], b_data[ib]))
        .collect();
    let (a_len, b_len) = (a_data.len(), b_data.len());
    let backward: BackwardFn = Box::new(move |go| {
        let mut da = vec![0.0; a_len];
        let mut db = vec![0.0; b_len];
        for i in 0..go.len() {
            let (ia, ib) = (map_a[i], map_b[i]);
            let (pa, pb) = df(a_data[ia], b_data[ib]);
            da[ia] += go[i] * pa;
            db[ib] += go[i] * pb;
        }
        vec![Some(da), Some(db)]
    });
    tape.push(op, &[a, b], out_shape, data, backward)
}

fn elementwise_unary(
    tape: &Tape,
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    // (x_i, out_i) -> d out_i / d x_i
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let x_data = x.to_vec();
    let data: Vec<f64> = x_data.iter().map(|&v| f(v)).collect();
    let out_data = data.clone();
    let backward: BackwardFn = Box::new(move |go| {
        let da = go
            .iter()
            .zip(x_data.iter().zip(&out_data))
            .map(|(&g, (&xi, &yi))| g * df(xi, yi))
            .collect();
        vec![Some(da)]
    });
    tape.push(op, &[x], x.shape(), data, backward)
}

impl Tape {
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        elementwise_binary(self, "add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        elementwise_binary(self, "sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        elementwise_binary(self, "mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if b.with_data(|d| d.contains(&0.0)) {
            return Err(Error::Numeric("division by zero".into()));
        }
        elementwise_binary(
            self,
            "div",
            a,
            b,
            |x, y| x / y,
            |x, y| (1.0 / y, -x / (y * y)),
        )
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        elementwise_unary(self, "relu", x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        elementwise_unary(self, "exp", x, f64::exp, |_, y| y)
    }

    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        if x.with_data(|d| d.iter().any(|&v| v <= 0.0)) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        elementwise_unary(self, "log", x, f64::ln, |v, _| 1.0 / v)
    }

    pub fn sqrt(&self, x: &Tensor) -> Result<Tensor> {
        if x.with_data(|d| d.iter().any(|&v| v < 0.0)) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        elementwise_unary(self, "sqrt", x, f64::sqrt, |_, y| 0.5 / y)
    }

    /// `max(x, c)` elementwise; gradient flows only where `x > c`.
    pub fn clamp_min(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        elementwise_unary(
            self,
            "clamp_min",
            x,
            move |v| v.max(c),
            move |v, _| if v > c { 1.0 } else { 0.0 },
        )
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        elementwise_unary(self, "scale", x, move |v| c * v, move |_, _| c)
    }

    /// Standard rank-2 matrix product.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {sa:?} x {sb:?}"
            )));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let a_data = a.to_vec();
        let b_data = b.to_vec();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a_data[i * k + p];
                let brow = &b_data[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let backward: BackwardFn = Box::new(move |go| {
            // dL/da = go . b^T, dL/db = a^T . go
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += go[i * n + j] * b_data[p * n + j];
                    }
                    da[i * k + p] = acc;
                }
            }
            for p in 0..k {
                for i in 0..m {
                    let av = a_data[i * k + p];
                    for j in 0..n {
                        db[p * n + j] += av * go[i * n + j];
                    }
                }
            }
            vec![Some(da), Some(db)]
        });
        tape_push_matmul(self, a, b, m, n, data, backward)
    }

    /// Rank-2 transpose.
    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x_data = x.to_vec();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x_data[i * n + j];
            }
        }
        let backward: BackwardFn = Box::new(move |go| {
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = go[j * m + i];
                }
            }
            vec![Some(dx)]
        });
        self.push("transpose", &[x], vec![n, m], data, backward)
    }

    /// Selects rows of a rank-2 tensor; rows may repeat.
    pub fn gather_rows(&self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let x_data = x.to_vec();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&x_data[i * cols..(i + 1) * cols]);
        }
        let idx: Vec<usize> = indices.to_vec();
        let backward: BackwardFn = Box::new(move |go| {
            let mut dx = vec![0.0; rows * cols];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    dx[i * cols + c] += go[r * cols + c];
                }
            }
            vec![Some(dx)]
        });
        self.push("gather_rows", &[x], vec![indices.len(), cols], data, backward)
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                x.shape()
            )));
        }
        let backward: BackwardFn = Box::new(move |go| vec![Some(go.to_vec())]);
        self.push("reshape", &[x], shape.to_vec(), x.to_vec(), backward)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let s = x.shape();
        if axis >= s.len() {
            return Err(Error::Shape(format!("sum_axis {axis} out of rank {}", s.len())));
        }
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let x_data = x.to_vec();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    data[o * inner + i] += x_data[(o * mid + m) * inner + i];
                }
            }
        }
        let backward: BackwardFn = Box::new(move |go| {
            let mut dx = vec![0.0; outer * mid * inner];
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        dx[(o * mid + m) * inner + i] = go[o * inner + i];
                    }
                }
            }
            vec![Some(dx)]
        });
        self.push("sum_axis", &[x], out_shape, data, backward)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let x_len = x.numel();
        let total = x.with_data(|d| d.iter().sum());
        let backward: BackwardFn = Box::new(move |go| vec![Some(vec![go[0]; x_len])]);
        self.push("sum_all", &[x], Vec::new(), vec![total], backward)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax_rows needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let probs = row_softmax(&x.to_vec(), rows, cols);
        let saved = probs.clone();
        let backward: BackwardFn = Box::new(move |go| {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let p = &saved[r * cols..(r + 1) * cols];
                let g = &go[r * cols..(r + 1) * cols];
                let dot: f64 = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
                for c in 0..cols {
                    dx[r * cols + c] = p[c] * (g[c] - dot);
                }
            }
            vec![Some(dx)]
        });
        self.push("softmax_rows", &[x], s, probs, backward)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let s = logits.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy needs rank-2 logits, got {s:?}"
            )));
        }
        let (batch, classes) = (s[0], s[1]);
        if batch == 0 {
            return Err(Error::Shape("softmax_cross_entropy on empty batch".into()));
        }
        if labels.len() != batch {
            return Err(Error::Shape(format!(
                "{} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let data = logits.to_vec();
        let probs = row_softmax(&data, batch, classes);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * classes..(r + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= batch as f64;

        let labels: Vec<usize> = labels.to_vec();
        let backward: BackwardFn = Box::new(move |go| {
            let scale = go[0] / batch as f64;
            let mut dl = probs.clone();
            for (r, &label) in labels.iter().enumerate() {
                dl[r * classes + label] -= 1.0;
            }
            for v in &mut dl {
                *v *= scale;
            }
            vec![Some(dl)]
        });
        self.push("softmax_cross_entropy", &[logits], Vec::new(), vec![loss], backward)
    }
}

fn tape_push_matmul(
    tape: &Tape,
    a: &Tensor,
    b: &Tensor,
    m: usize,
    n: usize,
    data: Vec<f64>,
    backward: BackwardFn,
) -> Result<Tensor> {
    tape.push("matmul", &[a, b], vec![m, n], data, backward)
}

fn row_softmax(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - m).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    out
}
