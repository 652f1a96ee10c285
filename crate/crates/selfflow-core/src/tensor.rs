//! Dense row-major f64 tensors with shape metadata.
//!
//! Binary ops broadcast in two cases only: a scalar (numel 1) against
//! anything, and a tensor whose shape is a suffix of the other's (expansion
//! over leading axes). Anything richer is built explicitly from `broadcast_last`
//! and reshapes so every adjoint in the autodiff layer stays auditable.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArg(format!(
                "shape {} implies {} elements, got {}",
                fmt_shape(&shape),
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

fn shape_suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// How a binary op pairs up its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastKind {
    Same,
    /// Left operand is a scalar or a suffix of the right shape.
    LeftExpands,
    /// Right operand is a scalar or a suffix of the left shape.
    RightExpands,
}

pub fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<BroadcastKind> {
    if a == b {
        Ok(BroadcastKind::Same)
    } else if shape_suffix_of(b, a) || b.iter().product::<usize>() == 1 {
        Ok(BroadcastKind::RightExpands)
    } else if shape_suffix_of(a, b) || a.iter().product::<usize>() == 1 {
        Ok(BroadcastKind::LeftExpands)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: fmt_shape(a),
            rhs: fmt_shape(b),
        })
    }
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let kind = broadcast_kind(op, &a.shape, &b.shape)?;
    match kind {
        BroadcastKind::Same => Ok(Tensor {
            shape: a.shape.clone(),
            data: a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }),
        BroadcastKind::RightExpands => {
            let m = b.numel();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data[i % m]))
                .collect();
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        }
        BroadcastKind::LeftExpands => {
            let m = a.numel();
            let data = b
                .data
                .iter()
                .enumerate()
                .map(|(i, &y)| f(a.data[i % m], y))
                .collect();
            Ok(Tensor {
                shape: b.shape.clone(),
                data,
            })
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("subtract", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("multiply", a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = zip_broadcast("divide", a, b, |x, y| x / y)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("divide".into()));
    }
    Ok(out)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| c * x)
}

/// Collapse `grad` (shaped like the broadcast output) back onto `shape` by
/// summing over the expanded leading axes.
pub fn unbroadcast(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let m: usize = shape.iter().product();
    let mut data = vec![0.0; m];
    for (i, &g) in grad.data.iter().enumerate() {
        data[i % m] += g;
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Matrix product over the last two axes.
///
/// `a` is `[.., m, k]`. `b` is either `[k, n]` (shared across the batch) or
/// `[.., k, n]` with identical leading axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = || Error::ShapeMismatch {
        op: "matmul",
        lhs: fmt_shape(&a.shape),
        rhs: fmt_shape(&b.shape),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (kb, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != kb {
        return Err(err());
    }
    let lead = &a.shape[..a.rank() - 2];
    let shared_rhs = b.rank() == 2;
    if !shared_rhs && &b.shape[..b.rank() - 2] != lead {
        return Err(err());
    }
    let batch: usize = lead.iter().product();
    let mut out = Vec::with_capacity(batch * m * n);
    for t in 0..batch {
        let a_off = t * m * k;
        let b_off = if shared_rhs { 0 } else { t * k * n };
        for i in 0..m {
            let a_row = &a.data[a_off + i * k..a_off + (i + 1) * k];
            // write the first term directly, accumulate the rest
            let av0 = a_row[0];
            let b0 = &b.data[b_off..b_off + n];
            let start = out.len();
            out.extend(b0.iter().map(|&bv| av0 * bv));
            let o_row = &mut out[start..start + n];
            for (p, &av) in a_row.iter().enumerate().skip(1) {
                if av == 0.0 {
                    continue;
                }
                let b_row = &b.data[b_off + p * n..b_off + (p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.push(m);
    shape.push(n);
    Ok(Tensor { shape, data: out })
}

/// Swap the last two axes.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 {
        return Err(Error::InvalidArg(format!(
            "transpose needs rank >= 2, got {}",
            fmt_shape(&a.shape)
        )));
    }
    let (m, n) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let batch: usize = a.shape[..a.rank() - 2].iter().product();
    let mut data = vec![0.0; a.numel()];
    for t in 0..batch {
        let off = t * m * n;
        for i in 0..m {
            for j in 0..n {
                data[off + j * m + i] = a.data[off + i * n + j];
            }
        }
    }
    let mut shape = a.shape.clone();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Ok(Tensor { shape, data })
}

pub fn reshape(a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: fmt_shape(&a.shape),
            rhs: fmt_shape(&shape),
        });
    }
    Ok(Tensor {
        shape,
        data: a.data.clone(),
    })
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidArg("concat of zero tensors".into()));
    }
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(Error::InvalidArg(format!("concat axis {axis} out of range")));
    }
    for p in parts {
        if p.rank() != rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: fmt_shape(parts[0].shape()),
                rhs: fmt_shape(p.shape()),
            });
        }
        for (d, (&x, &y)) in parts[0].shape.iter().zip(&p.shape).enumerate() {
            if d != axis && x != y {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: fmt_shape(parts[0].shape()),
                    rhs: fmt_shape(p.shape()),
                });
            }
        }
    }
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = parts[0].shape.clone();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let e = p.shape[axis];
            let start = o * e * inner;
            data.extend_from_slice(&p.data[start..start + e * inner]);
        }
    }
    Ok(Tensor { shape, data })
}

pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= a.rank() || start + len > a.shape[axis] {
        return Err(Error::InvalidArg(format!(
            "slice [{start}, {start}+{len}) on axis {axis} of {}",
            fmt_shape(&a.shape)
        )));
    }
    let (outer, extent, inner) = axis_split(&a.shape, axis);
    let mut shape = a.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        data.extend_from_slice(&a.data[base..base + len * inner]);
    }
    Ok(Tensor { shape, data })
}

/// Pad `grad` (a slice of shape `[.., len, ..]`) back into zeros of the
/// original extent; the slice adjoint.
pub fn slice_scatter(
    grad: &Tensor,
    axis: usize,
    start: usize,
    orig_extent: usize,
) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(grad.shape(), axis);
    let mut shape = grad.shape().to_vec();
    shape[axis] = orig_extent;
    let mut data = vec![0.0; outer * orig_extent * inner];
    for o in 0..outer {
        let src = o * len * inner;
        let dst = o * orig_extent * inner + start * inner;
        data[dst..dst + len * inner].copy_from_slice(&grad.data[src..src + len * inner]);
    }
    Ok(Tensor { shape, data })
}

/// Append a trailing axis of extent `n`, repeating each element.
pub fn broadcast_last(a: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArg("broadcast_last to extent 0".into()));
    }
    let mut shape = a.shape.clone();
    shape.push(n);
    let mut data = Vec::with_capacity(a.numel() * n);
    for &x in &a.data {
        data.extend(std::iter::repeat_n(x, n));
    }
    Ok(Tensor { shape, data })
}

pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::InvalidArg(format!("sum axis {axis} out of range")));
    }
    let (outer, extent, inner) = axis_split(&a.shape, axis);
    let mut shape = a.shape.clone();
    shape.remove(axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            for i in 0..inner {
                data[o * inner + i] += a.data[base + i];
            }
        }
    }
    Ok(Tensor { shape, data })
}

pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let extent = *a
        .shape
        .get(axis)
        .ok_or_else(|| Error::InvalidArg(format!("mean axis {axis} out of range")))?;
    Ok(scale(&sum_axis(a, axis)?, 1.0 / extent as f64))
}

/// Insert an axis of extent `extent` at `axis`, repeating; the sum_axis adjoint.
pub fn expand_axis(a: &Tensor, axis: usize, extent: usize) -> Result<Tensor> {
    if axis > a.rank() {
        return Err(Error::InvalidArg(format!("expand axis {axis} out of range")));
    }
    let mut shape = a.shape.clone();
    shape.insert(axis, extent);
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis..].iter().product();
    let mut data = Vec::with_capacity(outer * extent * inner);
    for o in 0..outer {
        let row = &a.data[o * inner..(o + 1) * inner];
        for _ in 0..extent {
            data.extend_from_slice(row);
        }
    }
    Ok(Tensor { shape, data })
}

pub fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

pub fn mean_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum::<f64>() / a.numel() as f64)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

pub fn ln(a: &Tensor) -> Result<Tensor> {
    if a.data.iter().any(|&x| x <= 0.0) {
        return Err(Error::NonFinite("ln of a non-positive value".into()));
    }
    Ok(a.map(f64::ln))
}

pub fn sqrt(a: &Tensor) -> Result<Tensor> {
    if a.data.iter().any(|&x| x < 0.0) {
        return Err(Error::NonFinite("sqrt of a negative value".into()));
    }
    Ok(a.map(f64::sqrt))
}

pub fn powf(a: &Tensor, p: f64) -> Result<Tensor> {
    let out = a.map(|x| x.powf(p));
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("power with exponent {p}")));
    }
    Ok(out)
}

pub fn abs(a: &Tensor) -> Tensor {
    a.map(f64::abs)
}

pub fn silu(a: &Tensor) -> Tensor {
    a.map(|x| x / (1.0 + (-x).exp()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// tanh(u) = 1 − 2/(exp(2u) + 1); one exp call instead of libm tanh
pub(crate) fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn gelu_tanh(a: &Tensor) -> Tensor {
    a.map(|x| 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x))))
}

/// Softmax over the last axis, max-shifted for stability.
pub fn softmax_last(a: &Tensor) -> Tensor {
    let n = a.last_dim();
    let mut data = Vec::with_capacity(a.numel());
    for row_in in a.data.chunks(n) {
        let m = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut z = 0.0;
        data.extend(row_in.iter().map(|&x| {
            let e = (x - m).exp();
            z += e;
            e
        }));
        let inv = 1.0 / z;
        for o in &mut data[start..] {
            *o *= inv;
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

pub const LAYERNORM_EPS: f64 = 1e-6;

/// Normalize over the last axis, no learned affine. A constant row maps to
/// zeros (the epsilon keeps the denominator positive).
pub fn layernorm_last(a: &Tensor) -> Tensor {
    let n = a.last_dim();
    let mut data = Vec::with_capacity(a.numel());
    for row_in in a.data.chunks(n) {
        let mean = row_in.iter().sum::<f64>() / n as f64;
        let var = row_in.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        data.extend(row_in.iter().map(|&x| (x - mean) * inv));
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

/// Norm threshold below which cosine similarity is treated as undefined;
/// such slots yield 0 (see the objectives layer for the warning counter).
pub const COSINE_NORM_FLOOR: f64 = 1e-150;

/// Cosine similarity over the last axis. Output drops that axis.
/// Returns the values and the count of zero-norm slots that were zeroed.
pub fn cosine_sim_last(a: &Tensor, b: &Tensor) -> Result<(Tensor, usize)> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            lhs: fmt_shape(&a.shape),
            rhs: fmt_shape(&b.shape),
        });
    }
    let n = a.last_dim();
    let rows = a.numel() / n;
    let mut data = vec![0.0; rows];
    let mut degenerate = 0;
    for r in 0..rows {
        let xa = &a.data[r * n..(r + 1) * n];
        let xb = &b.data[r * n..(r + 1) * n];
        let dot: f64 = xa.iter().zip(xb).map(|(&x, &y)| x * y).sum();
        let na: f64 = xa.iter().map(|&x| x * x).sum::<f64>().sqrt();
        let nb: f64 = xb.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
            degenerate += 1;
            data[r] = 0.0;
        } else {
            data[r] = dot / (na * nb);
        }
    }
    let shape = a.shape[..a.rank() - 1].to_vec();
    Ok((Tensor { shape, data }, degenerate))
}
