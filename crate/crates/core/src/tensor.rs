//! Dense row-major tensors and the numeric primitives shared by every layer:
//! matrix product, 2-D cross-correlation, elementwise maps, and the central
//! finite-difference gradient checker used throughout the test suites.
//!
//! Values are `f64`. Gradient checks demand double precision; everything else
//! simply inherits it.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tensor extents. Non-empty, every dim at least 1.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "shape dims must be non-empty and positive, got {dims:?}"
            )));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.0.iter().product()
    }
}

/// Dense n-dimensional array of finite real values, row-major.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Tensor {
        Tensor::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Tensor {
        let shape = Shape::new(dims.to_vec()).expect("invalid tensor dims");
        let n = shape.count();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Validating constructor: shape/data length must agree and every value
    /// must be finite.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.count() != data.len() {
            return Err(Error::dim("from_vec", shape.dims(), data.len()));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor literal (value {bad})")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let mut t = Tensor::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// 1-element tensor of shape `[1]`.
    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: Shape::new(vec![1]).unwrap(),
            data: vec![v],
        }
    }

    pub(crate) fn from_parts(dims: &[usize], data: Vec<f64>) -> Tensor {
        let shape = Shape::new(dims.to_vec()).expect("invalid tensor dims");
        debug_assert_eq!(shape.count(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.dims().len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // shapes have no zero extents
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

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.count() != self.len() {
            return Err(Error::dim("reshape", self.shape(), dims));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    // -- 2-D helpers ------------------------------------------------------

    pub fn rows(&self) -> usize {
        self.shape.dims()[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.dims().last().unwrap()
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    // -- linear algebra ---------------------------------------------------

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::dim("matmul", self.shape(), rhs.shape()));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(rrow) {
                    *d += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(&[m, n], out))
    }

    /// Matrix–vector product: `self` is `m×k`, `v` has length `k`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rank() != 2 || self.shape()[1] != v.len() {
            return Err(Error::dim("matvec", self.shape(), v.len()));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }

    /// `self^T · v` without materializing the transpose; `self` is `m×k`,
    /// `v` has length `m`, result has length `k`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rank() != 2 || self.shape()[0] != v.len() {
            return Err(Error::dim("matvec_t", self.shape(), v.len()));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; k];
        for i in 0..m {
            let a = v[i];
            if a == 0.0 {
                continue;
            }
            let row = &self.data[i * k..(i + 1) * k];
            for (o, &b) in out.iter_mut().zip(row) {
                *o += a * b;
            }
        }
        Ok(out)
    }

    pub fn transposed2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", self.shape(), "rank 2"));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(&[n, m], out))
    }

    // -- elementwise ------------------------------------------------------

    /// Positionwise sum. Shapes must match exactly, or one side must be a
    /// single-element tensor (scalar broadcast).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    /// Positionwise product, same broadcast rule as [`Tensor::add`].
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with("mul", rhs, |a, b| a * b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        rhs: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape() == rhs.shape() {
            let data = self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            Ok(Tensor::from_parts(self.shape(), data))
        } else if rhs.len() == 1 {
            let b = rhs.data[0];
            Ok(Tensor::from_parts(
                self.shape(),
                self.data.iter().map(|&a| f(a, b)).collect(),
            ))
        } else if self.len() == 1 {
            let a = self.data[0];
            Ok(Tensor::from_parts(
                rhs.shape(),
                rhs.data.iter().map(|&b| f(a, b)).collect(),
            ))
        } else {
            Err(Error::dim(op, self.shape(), rhs.shape()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Parametric rectifier: `x` for `x > 0`, `alpha * x` otherwise.
    pub fn prelu(&self, alpha: f64) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { alpha * v })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        if self.len() != rhs.len() {
            return Err(Error::dim("dot", self.shape(), rhs.shape()));
        }
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }
}

/// Softmax with max-subtraction.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation convention; no kernel flip)
// ---------------------------------------------------------------------------

/// Output extent of one convolution axis.
#[inline]
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::dim("conv2d", format!("kernel {kernel}"), format!("padded input {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Cross-correlate a `C_in×H×W` input with `C_out×C_in×kh×kw` kernels.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let batched = input.reshaped(&prepend(1, input.shape()))?;
    let out = conv2d_batch(&batched, kernels, stride, padding)?;
    let dims = out.shape()[1..].to_vec();
    out.reshaped(&dims)
}

fn prepend(n: usize, dims: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(dims.len() + 1);
    v.push(n);
    v.extend_from_slice(dims);
    v
}

/// Batched convolution over an `N×C_in×H×W` input.
pub fn conv2d_batch(
    input: &Tensor,
    kernels: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let (n, c_in, h, w) = dims4("conv2d", input)?;
    let (c_out, kc, kh, kw) = dims4("conv2d", kernels)?;
    if kc != c_in {
        return Err(Error::dim("conv2d", input.shape(), kernels.shape()));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let oh = conv_out_extent(h, kh, stride.0, padding.0)?;
    let ow = conv_out_extent(w, kw, stride.1, padding.1)?;

    let mut out = vec![0.0; n * c_out * oh * ow];
    let x = input.data();
    let k = kernels.data();
    // One (sample, out-channel) plane per task; writes are disjoint.
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, dst)| {
        let ni = plane / c_out;
        let co = plane % c_out;
        let x_n = &x[ni * c_in * h * w..(ni + 1) * c_in * h * w];
        let k_co = &k[co * c_in * kh * kw..(co + 1) * c_in * kh * kw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    let x_c = &x_n[ci * h * w..(ci + 1) * h * w];
                    let k_c = &k_co[ci * kh * kw..(ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &x_c[iy as usize * w..(iy as usize + 1) * w];
                        let krow = &k_c[ky * kw..(ky + 1) * kw];
                        for (kx, &kv) in krow.iter().enumerate() {
                            let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kv * xrow[ix as usize];
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    });
    Ok(Tensor::from_parts(&[n, c_out, oh, ow], out))
}

/// Gradients of [`conv2d_batch`] with respect to input and kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, c_in, h, w) = dims4("conv2d_backward", input)?;
    let (c_out, _, kh, kw) = dims4("conv2d_backward", kernels)?;
    let (gn, gc, oh, ow) = dims4("conv2d_backward", grad_out)?;
    if gn != n || gc != c_out {
        return Err(Error::dim("conv2d_backward", grad_out.shape(), kernels.shape()));
    }

    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();

    // Per-sample partials, then an index-ordered reduce: deterministic.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut gx = vec![0.0; c_in * h * w];
            let mut gk = vec![0.0; k.len()];
            let x_n = &x[ni * c_in * h * w..(ni + 1) * c_in * h * w];
            let g_n = &g[ni * c_out * oh * ow..(ni + 1) * c_out * oh * ow];
            for co in 0..c_out {
                let g_c = &g_n[co * oh * ow..(co + 1) * oh * ow];
                let k_co = &k[co * c_in * kh * kw..(co + 1) * c_in * kh * kw];
                let gk_co = &mut gk[co * c_in * kh * kw..(co + 1) * c_in * kh * kw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g_c[oy * ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ci * h * w + iy as usize * w + ix as usize;
                                    let ki = ci * kh * kw + ky * kw + kx;
                                    gx[xi] += go * k_co[ki];
                                    gk_co[ki] += go * x_n[xi];
                                }
                            }
                        }
                    }
                }
            }
            (gx, gk)
        })
        .collect();

    let mut grad_input = vec![0.0; x.len()];
    let mut grad_kernels = vec![0.0; k.len()];
    for (ni, (gx, gk)) in partials.into_iter().enumerate() {
        grad_input[ni * c_in * h * w..(ni + 1) * c_in * h * w].copy_from_slice(&gx);
        for (dst, v) in grad_kernels.iter_mut().zip(gk) {
            *dst += v;
        }
    }
    Ok((
        Tensor::from_parts(input.shape(), grad_input),
        Tensor::from_parts(kernels.shape(), grad_kernels),
    ))
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::dim(op, t.shape(), "rank 4"));
    }
    let d = t.shape();
    Ok((d[0], d[1], d[2], d[3]))
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` per coordinate.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Usage(format!("finite_diff_grad eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_grad probe at index {i}")));
        }
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Gradient-check comparison: true when `|a − b| ≤ tol·max(|a|,|b|)` or the
/// absolute difference is below the finite-difference noise floor.
pub fn grads_close(analytic: &Tensor, numeric: &Tensor, tol: f64) -> bool {
    if analytic.shape() != numeric.shape() {
        return false;
    }
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .all(|(&a, &b)| (a - b).abs() <= tol * a.abs().max(b.abs()) || (a - b).abs() <= 1e-7)
}
