use std::sync::Arc;

use super::Tensor;
use crate::error::{shape_err, Result};

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    /// Logical rows x cols after the optional transpose.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` for row-major `c`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimension");
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index dgemm touches by the slice
    // lengths, given the row/column strides derived from the same extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Batched matrix product: `[M,K] x [K,N]` or `[B,M,K] x [B,K,N]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (batch, m, k, n) = match (self.shape(), rhs.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
            (&[b, m, k], &[b2, k2, n]) if b == b2 && k == k2 => (b, m, k, n),
            (a, b) => return Err(shape_err!("matmul: incompatible shapes {:?} and {:?}", a, b)),
        };
        let a = self.data_arc();
        let b = rhs.data_arc();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                Mat::new(&a[i * m * k..], m, k),
                Mat::new(&b[i * k * n..], k, n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        Ok(Tensor::from_op(
            "matmul",
            shape,
            Arc::new(out),
            vec![self.clone(), rhs.clone()],
            move |g| {
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    gemm(
                        Mat::new(gi, m, n),
                        Mat::t(&b[i * k * n..(i + 1) * k * n], k, n),
                        0.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    gemm(
                        Mat::t(&a[i * m * k..(i + 1) * m * k], m, k),
                        Mat::new(gi, m, n),
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                vec![Some(da), Some(db)]
            },
        ))
    }

    /// Affine map over the last axis: `x W^T + b` with `W: [D_out, D_in]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (d_out, d_in) = match *weight.shape() {
            [o, i] => (o, i),
            ref s => return Err(shape_err!("linear: weight must be rank 2, got {:?}", s)),
        };
        let last = self.shape().last().copied().unwrap_or(0);
        if self.rank() == 0 || last != d_in {
            return Err(shape_err!(
                "linear: input {:?} does not end in D_in={d_in}",
                self.shape()
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(shape_err!("linear: bias {:?} is not [{d_out}]", b.shape()));
            }
        }
        let rows = self.numel() / d_in;
        let x = self.data_arc();
        let w = weight.data_arc();
        let mut out = match bias {
            Some(b) => b.data().repeat(rows),
            None => vec![0.0; rows * d_out],
        };
        gemm(Mat::new(&x, rows, d_in), Mat::t(&w, d_out, d_in), 1.0, &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = d_out;
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op("linear", shape, Arc::new(out), inputs, move |g| {
            let mut dx = vec![0.0; rows * d_in];
            gemm(Mat::new(g, rows, d_out), Mat::new(&w, d_out, d_in), 0.0, &mut dx);
            let mut dw = vec![0.0; d_out * d_in];
            gemm(Mat::t(g, rows, d_out), Mat::new(&x, rows, d_in), 0.0, &mut dw);
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![0.0; d_out];
                for row in g.chunks_exact(d_out) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                grads.push(Some(db));
            }
            grads
        }))
    }
}
