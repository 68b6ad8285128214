//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TanoError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TanoError::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TanoError::dim("ragged rows"));
        }
        Tensor::new([rows.len(), cols], rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TanoError::dim(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TanoError::dim(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TanoError::dim(format!(
                "expected an N×C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TanoError::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Rows `[start, end)` along the leading axis, for any rank.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| TanoError::dim("slice of scalar"))?;
        if start > end || end > lead {
            return Err(TanoError::dim(format!(
                "row range {start}..{end} out of bounds for leading dim {lead}"
            )));
        }
        let stride = self.data.len().checked_div(lead).unwrap_or(0);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TanoError::dim("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TanoError::dim(format!(
                    "concat shape mismatch {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor { shape, data })
    }
}

/// Row-major `C[m×n] += A[m×k] · B[k×n]`.
/// `c += op(a) · op(b)` for row-major buffers, where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m·k, k·n and m·n
    // elements of the three slices, whose lengths are asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, false, b, false, c)
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_channels: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(TanoError::dim(format!(
                "conv2d expects 4-D input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if kc != c || kh != kw {
            return Err(TanoError::dim(format!(
                "conv2d kernel {kernel:?} incompatible with input {input:?}"
            )));
        }
        if stride == 0 {
            return Err(TanoError::invalid("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TanoError::dim(format!(
                "conv2d kernel {kernel:?} larger than padded input {input:?} (padding {pad})"
            )));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            out_channels: o,
            k: kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn columns(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Calls `f(col_row, col_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let cols = self.columns();
        let plane = self.oh * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    for ni in 0..self.n {
                        let in_base = (ni * self.c + ci) * self.h * self.w;
                        for y in 0..self.oh {
                            let iy = (y * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for x in 0..self.ow {
                                let ix = (x * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(
                                    row * cols,
                                    ni * plane + y * self.ow + x,
                                    in_base + iy as usize * self.w + ix as usize,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.patch() * self.columns()];
        self.for_each_tap(|row_off, c, i| col[row_off + c] = input[i]);
        col
    }

    pub fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.c * self.h * self.w];
        self.for_each_tap(|row_off, c, i| out[i] += col[row_off + c]);
        out
    }

    /// `[O × N·OH·OW]` matrix to N×O×OH×OW layout and back.
    pub fn channel_major_to_nchw(&self, mat: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let cols = self.columns();
        let mut out = vec![0.0; mat.len()];
        for o in 0..self.out_channels {
            for ni in 0..self.n {
                let src = &mat[o * cols + ni * plane..o * cols + (ni + 1) * plane];
                let dst = (ni * self.out_channels + o) * plane;
                out[dst..dst + plane].copy_from_slice(src);
            }
        }
        out
    }

    pub fn nchw_to_channel_major(&self, t: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let cols = self.columns();
        let mut out = vec![0.0; t.len()];
        for o in 0..self.out_channels {
            for ni in 0..self.n {
                let src = (ni * self.out_channels + o) * plane;
                out[o * cols + ni * plane..o * cols + (ni + 1) * plane]
                    .copy_from_slice(&t[src..src + plane]);
            }
        }
        out
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.out_channels, self.oh, self.ow]
    }

    /// Forward pass; returns output data and the im2col buffer for reuse in backward.
    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let col = self.im2col(input);
        let mut mat = vec![0.0; self.out_channels * self.columns()];
        gemm_acc(
            self.out_channels,
            self.patch(),
            self.columns(),
            kernel,
            &col,
            &mut mat,
        );
        (self.channel_major_to_nchw(&mat), col)
    }

    /// Gradients w.r.t. input and kernel.
    pub fn backward(&self, grad_out: &[f64], col: &[f64], kernel: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gmat = self.nchw_to_channel_major(grad_out);
        let (patch, cols) = (self.patch(), self.columns());
        let mut gk = vec![0.0; self.out_channels * patch];
        gemm(
            self.out_channels,
            cols,
            patch,
            &gmat,
            false,
            col,
            true,
            &mut gk,
        );
        let mut gcol = vec![0.0; patch * cols];
        gemm(
            patch,
            self.out_channels,
            cols,
            kernel,
            true,
            &gmat,
            false,
            &mut gcol,
        );
        (self.col2im(&gcol), gk)
    }
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns behave as if padded with −∞.
/// Returns the pooled values and, for each output, the flat index of its source.
pub(crate) fn max_pool2_forward(
    input: &[f64],
    shape: &[usize],
) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + 2 * y * w + 2 * x;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * y + dy, 2 * x + dx);
                        if iy < h && ix < w {
                            let i = base + iy * w + ix;
                            if input[i] > best {
                                best = input[i];
                                best_i = i;
                            }
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (vec![n, c, oh, ow], out, arg)
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TanoError::dim(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    if len == 0 {
        return Err(TanoError::dim(format!("softmax over empty axis {axis}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

pub(crate) fn softmax_along(
    data: &[f64],
    shape: &[usize],
    axis: usize,
    log: bool,
) -> Result<Vec<f64>> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| data[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|j| (data[at(j)] - max).exp()).sum();
            let log_sum = sum.ln();
            for j in 0..len {
                let shifted = data[at(j)] - max;
                out[at(j)] = if log {
                    shifted - log_sum
                } else {
                    shifted.exp() / sum
                };
            }
        }
    }
    Ok(out)
}
