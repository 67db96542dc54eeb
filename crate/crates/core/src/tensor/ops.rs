//! Elementwise, reduction, normalization and shape operations.

use std::sync::Arc;

use super::{gradient_fault, numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// How the two operands of a binary elementwise op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    Same,
    /// rhs is `[B, C, 1, 1]`, lhs is `[B, C, H, W]`.
    RhsGate { planes: usize, plane: usize },
    /// lhs is `[B, C, 1, 1]`, rhs is `[B, C, H, W]`.
    LhsGate { planes: usize, plane: usize },
}

fn layout(op: &str, a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        return Ok(Layout::Same);
    }
    let gate_over = |full: &[usize], gate: &[usize]| {
        full.len() == 4 && gate.len() == 4 && gate[..2] == full[..2] && gate[2] == 1 && gate[3] == 1
    };
    if gate_over(a, b) {
        Ok(Layout::RhsGate {
            planes: a[0] * a[1],
            plane: a[2] * a[3],
        })
    } else if gate_over(b, a) {
        Ok(Layout::LhsGate {
            planes: b[0] * b[1],
            plane: b[2] * b[3],
        })
    } else {
        Err(shape_err!("{op}: incompatible shapes {:?} and {:?}", a, b))
    }
}

/// Expands a `[B,C,1,1]` operand to the full plane layout.
fn expand_gate(gate: &[f64], plane: usize) -> Vec<f64> {
    gate.iter()
        .flat_map(|&g| std::iter::repeat_n(g, plane))
        .collect()
}

/// Sums a full-layout gradient back onto a `[B,C,1,1]` operand.
fn reduce_to_gate(grad: &[f64], plane: usize) -> Vec<f64> {
    grad.chunks_exact(plane).map(|c| c.iter().sum()).collect()
}

impl Tensor {
    fn binary(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        // (grad_out, a, b) -> (da, db), evaluated on the full layout.
        df: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let lay = layout(op, self.shape(), rhs.shape())?;
        let (a_full, b_full, shape) = match lay {
            Layout::Same => (self.data_arc(), rhs.data_arc(), self.shape().to_vec()),
            Layout::RhsGate { plane, .. } => (
                self.data_arc(),
                Arc::new(expand_gate(rhs.data(), plane)),
                self.shape().to_vec(),
            ),
            Layout::LhsGate { plane, .. } => (
                Arc::new(expand_gate(self.data(), plane)),
                rhs.data_arc(),
                rhs.shape().to_vec(),
            ),
        };
        let out: Vec<f64> = a_full.iter().zip(b_full.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(
            op,
            shape,
            Arc::new(out),
            vec![self.clone(), rhs.clone()],
            move |g| {
                let mut da = Vec::with_capacity(g.len());
                let mut db = Vec::with_capacity(g.len());
                for ((&go, &a), &b) in g.iter().zip(a_full.iter()).zip(b_full.iter()) {
                    let (x, y) = df(go, a, b);
                    da.push(x);
                    db.push(y);
                }
                match lay {
                    Layout::Same => vec![Some(da), Some(db)],
                    Layout::RhsGate { plane, .. } => {
                        vec![Some(da), Some(reduce_to_gate(&db, plane))]
                    }
                    Layout::LhsGate { plane, .. } => {
                        vec![Some(reduce_to_gate(&da, plane)), Some(db)]
                    }
                }
            },
        ))
    }

    /// Elementwise sum (with the `[B,C,1,1]` spatial broadcast rule).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    /// Hadamard product (with the `[B,C,1,1]` spatial broadcast rule).
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    /// Elementwise quotient; equal shapes only.
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(shape_err!(
                "div: shapes {:?} and {:?} differ",
                self.shape(),
                rhs.shape()
            ));
        }
        self.binary(rhs, "div", |a, b| a / b, |g, a, b| (g / b, -g * a / (b * b)))
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // (grad_out, input, output) -> grad_in
        df: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let x = self.data_arc();
        let y = Arc::new(x.iter().map(|&v| f(v)).collect::<Vec<_>>());
        let y_saved = y.clone();
        Tensor::from_op(op, self.shape().to_vec(), y, vec![self.clone()], move |g| {
            let dx = g
                .iter()
                .zip(x.iter())
                .zip(y_saved.iter())
                .map(|((&go, &xi), &yi)| df(go, xi, yi))
                .collect();
            vec![Some(dx)]
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.unary("scale", |v| v * factor, move |g, _, _| g * factor)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", |v| v + c, |g, _, _| g)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(
            "relu",
            |v| v.max(0.0),
            |g, x, _| if x > 0.0 { g } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let fault = gradient_fault();
        self.unary("sigmoid", sigmoid, move |g, _, y| {
            let d = g * y * (1.0 - y);
            if fault {
                1.5 * d
            } else {
                d
            }
        })
    }

    /// `ln(1 + e^x)` in its overflow-free form.
    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus, |g, x, _| g * sigmoid(x))
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |g, _, y| g * y)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |v| v * v, |g, x, _| 2.0 * g * x)
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![], Arc::new(vec![s]), vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err!("sum_axis: axis {axis} out of range for {:?}", shape));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(
            "sum_axis",
            out_shape,
            Arc::new(out),
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        dx[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err!("softmax: axis {axis} out of range for {:?}", shape));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let idx = move |o: usize, k: usize, i: usize| (o * n + k) * inner + i;
        for o in 0..outer {
            for i in 0..inner {
                let m = (0..n).map(|k| x[idx(o, k, i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (x[idx(o, k, i)] - m).exp();
                    y[idx(o, k, i)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[idx(o, k, i)] /= z;
                }
            }
        }
        let y = Arc::new(y);
        let ys = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            shape.to_vec(),
            y,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let dot: f64 = (0..n).map(|k| g[idx(o, k, i)] * ys[idx(o, k, i)]).sum();
                        for k in 0..n {
                            let j = idx(o, k, i);
                            dx[j] = ys[j] * (g[j] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Reinterprets the values with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data_arc(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("permute: {:?} is not a permutation of rank {rank}", axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        // Input stride for each output axis.
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let src_index = permuted_indices(&out_shape, &gather);
        let x = self.data();
        let out: Vec<f64> = src_index.iter().map(|&i| x[i]).collect();
        let n = out.len();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            Arc::new(out),
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; n];
                for (go, &i) in g.iter().zip(src_index.iter()) {
                    dx[i] = *go;
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(shape_err!("concat: axis {axis} out of range for rank {rank}"));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!(
                    "concat: {:?} does not match {:?} off axis {axis}",
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            Arc::new(out),
            parts.iter().map(|p| (*p).clone()).collect(),
            move |g| {
                let mut grads: Vec<Vec<f64>> =
                    extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gr, &e) in grads.iter_mut().zip(&extents) {
                        gr.extend_from_slice(&g[off..off + e * inner]);
                        off += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        ))
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!(
                "narrow: [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let in_len = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            out_shape,
            Arc::new(out),
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; in_len];
                for o in 0..outer {
                    dx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn split(&self, axis: usize, parts: usize) -> Result<Vec<Tensor>> {
        let extent = *self
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err!("split: axis {axis} out of range for {:?}", self.shape()))?;
        if parts == 0 || extent % parts != 0 {
            return Err(shape_err!(
                "split: extent {extent} on axis {axis} is not divisible into {parts} parts"
            ));
        }
        let len = extent / parts;
        (0..parts).map(|i| self.narrow(axis, i * len, len)).collect()
    }

    /// Per-(batch, channel) standardization over the spatial extents of a
    /// `[B, C, H, W]` tensor: `(x - mean) / sqrt(var + eps)` with the biased
    /// variance. No affine part; see [`Tensor::channel_affine`].
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        let plane = h * w;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; b * c];
        for p in 0..b * c {
            let xs = &x[p * plane..(p + 1) * plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for (o, v) in y[p * plane..(p + 1) * plane].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let y = Arc::new(y);
        let ys = y.clone();
        Ok(Tensor::from_op(
            "instance_norm",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; g.len()];
                let n = plane as f64;
                for p in 0..b * c {
                    let r = p * plane..(p + 1) * plane;
                    let gs = &g[r.clone()];
                    let yh = &ys[r.clone()];
                    let mean_g = gs.iter().sum::<f64>() / n;
                    let mean_gy = gs.iter().zip(yh).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, &gi), &yi) in dx[r].iter_mut().zip(gs).zip(yh) {
                        *d = inv_std[p] * (gi - mean_g - yi * mean_gy);
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// `x * scale[c] + shift[c]` for a `[B, C, H, W]` input and `[C]` vectors.
    pub fn channel_affine(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(shape_err!(
                "channel_affine: expected [{c}] vectors, got {:?} and {:?}",
                scale.shape(),
                shift.shape()
            ));
        }
        let plane = h * w;
        let x = self.data_arc();
        let s = scale.data_arc();
        let t = shift.data();
        let mut y = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for (o, v) in y[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                    *o = v * s[ci] + t[ci];
                }
            }
        }
        Ok(Tensor::from_op(
            "channel_affine",
            self.shape().to_vec(),
            Arc::new(y),
            vec![self.clone(), scale.clone(), shift.clone()],
            move |g| {
                let mut dx = vec![0.0; g.len()];
                let mut ds = vec![0.0; c];
                let mut dt = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for i in off..off + plane {
                            dx[i] = g[i] * s[ci];
                            ds[ci] += g[i] * x[i];
                            dt[ci] += g[i];
                        }
                    }
                }
                vec![Some(dx), Some(ds), Some(dt)]
            },
        ))
    }

    /// Spatial mean of a `[B, C, H, W]` tensor, as `[B, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        self.reshape(&[b, c, h * w])?
            .sum_axis(2)?
            .scale(1.0 / (h * w) as f64)
            .reshape(&[b, c, 1, 1])
    }

    /// `[B, C, H, W]` -> `[B, H*W, C]` token sequence.
    pub fn to_tokens(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        self.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, c])
    }

    /// `[B, H*W, C]` token sequence -> `[B, C, H, W]`.
    pub fn from_tokens(&self, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = self.dims3()?;
        if n != h * w {
            return Err(shape_err!("from_tokens: {n} tokens do not tile a {h}x{w} grid"));
        }
        self.reshape(&[b, h, w, c])?.permute(&[0, 3, 1, 2])
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offsets for every output position, in row-major output order.
fn permuted_indices(out_shape: &[usize], gather: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n);
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= gather[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}
