//! Tensor-level kernels: convolutions, pooling, dense layers and activations.
//!
//! These are the forward computations and the vector-Jacobian products the
//! autodiff graph dispatches to. Standard convolution goes through im2col and
//! a matrix multiply; depthwise convolution is a direct loop.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output extent `ceil(input / stride)`; zero padding split floor/ceil
    /// between the leading and trailing side.
    Same,
    /// No padding; output extent `floor((input - k) / stride) + 1`.
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(crate::Error::Format(format!("unknown padding {other:?}"))),
        }
    }
}

/// Output extent along one spatial axis.
pub fn output_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Result<usize> {
    if stride == 0 {
        return shape_err("stride must be at least 1");
    }
    match padding {
        Padding::Same => Ok(input.div_ceil(stride)),
        Padding::Valid => {
            if k > input {
                return shape_err(format!(
                    "kernel extent {k} exceeds unpadded input extent {input}"
                ));
            }
            Ok((input - k) / stride + 1)
        }
    }
}

/// Zero rows/columns inserted before the input along one axis.
pub fn padding_before(input: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            total / 2
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
        depthwise: bool,
    ) -> Result<Self> {
        let what = if depthwise { "depthwise_conv2d" } else { "conv2d" };
        if input.len() != 4 || kernel.len() != 4 {
            return shape_err(format!(
                "{what}: expected input [B,H,W,C] and kernel [k,k,Cin,Cout], got {input:?} and {kernel:?}"
            ));
        }
        let (batch, h, w, cin) = (input[0], input[1], input[2], input[3]);
        let (kh, kw, kc, ko) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != cin {
            return shape_err(format!(
                "{what}: input {input:?} has {cin} channels but kernel {kernel:?} expects {kc}"
            ));
        }
        if depthwise && ko != 1 {
            return shape_err(format!(
                "depthwise_conv2d: kernel {kernel:?} must have a channel multiplier of 1"
            ));
        }
        let oh = output_extent(h, kh, stride, padding)?;
        let ow = output_extent(w, kw, stride, padding)?;
        Ok(Self {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout: if depthwise { cin } else { ko },
            stride,
            oh,
            ow,
            pad_top: padding_before(h, kh, stride, padding),
            pad_left: padding_before(w, kw, stride, padding),
        })
    }

    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    fn col_width(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

// ---------------------------------------------------------------------------
// matrix products on flat row-major slices

/// `out[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[k,n] = sum_m a[m,k] * b[m,n]`
pub(crate) fn matmul_tn_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,k] = sum_n a[m,n] * b[k,n]`
pub(crate) fn matmul_nt_raw<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * k);
    for a_row in a.chunks_exact(n).take(m) {
        for b_row in b.chunks_exact(n).take(k) {
            out.push(a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum());
        }
    }
    out
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    t.expect_rank(2, what)?;
    Ok((t.shape()[0], t.shape()[1]))
}

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return shape_err(format!(
            "matmul: inner extents differ between {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

/// Gradients of `matmul(a, b)` given the upstream gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (_, n) = matrix_dims(b, "matmul rhs")?;
    let da = matmul_nt_raw(grad.data(), b.data(), m, n, k);
    let db = matmul_tn_raw(a.data(), grad.data(), m, k, n);
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

pub fn transpose<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = matrix_dims(t, "transpose")?;
    let src = t.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(src[i * n + j]);
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Adds a `[D]` bias to every row of a `[B, D]` matrix.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = matrix_dims(x, "add_bias input")?;
    if bias.shape() != [d] {
        return shape_err(format!(
            "add_bias: bias {:?} does not match input {:?}",
            bias.shape(),
            x.shape()
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// `input [B,Din] x weights [Din,Dout] (+ bias [Dout])`.
pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let y = matmul(input, weights)?;
    match bias {
        Some(b) => add_bias(&y, b),
        None => Ok(y),
    }
}

// ---------------------------------------------------------------------------
// standard convolution via im2col

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cw = g.col_width();
    let mut cols = vec![T::zero(); g.rows() * cw];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * cw..(row + 1) * cw];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else {
                            continue;
                        };
                        let src = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let at = (ky * g.kw + kx) * g.cin;
                        dst[at..at + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let cw = g.col_width();
    let mut dx = vec![T::zero(); g.batch * g.h * g.w * g.cin];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src_row = &cols[row * cw..(row + 1) * cw];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else {
                            continue;
                        };
                        let dst = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let at = (ky * g.kw + kx) * g.cin;
                        for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(&src_row[at..at + g.cin]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Cross-correlation of `input [B,H,W,Cin]` with `kernel [kh,kw,Cin,Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding, false)?;
    let cols = im2col(input.data(), &g);
    let out = matmul_raw(&cols, kernel.data(), g.rows(), g.col_width(), g.cout);
    Tensor::new(vec![g.batch, g.oh, g.ow, g.cout], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding, false)?;
    let (m, kk) = (g.rows(), g.col_width());
    let cols = im2col(input.data(), &g);
    let dk = matmul_tn_raw(&cols, grad.data(), m, kk, g.cout);
    let dcols = matmul_nt_raw(grad.data(), kernel.data(), m, g.cout, kk);
    let dx = col2im(&dcols, &g);
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

// ---------------------------------------------------------------------------
// depthwise convolution

/// Channel-wise convolution of `input [B,H,W,C]` with `kernel [kh,kw,C,1]`.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding, true)?;
    let (x, k) = (input.data(), kernel.data());
    let c = g.cin;
    let mut out = vec![T::zero(); g.batch * g.oh * g.ow * c];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = ((b * g.oh + oy) * g.ow + ox) * c;
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else {
                            continue;
                        };
                        let src = ((b * g.h + iy) * g.w + ix) * c;
                        let kat = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += x[src + ch] * k[kat + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.oh, g.ow, c], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding, true)?;
    let (x, k, dy) = (input.data(), kernel.data(), grad.data());
    let c = g.cin;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let at = ((b * g.oh + oy) * g.ow + ox) * c;
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else {
                            continue;
                        };
                        let src = ((b * g.h + iy) * g.w + ix) * c;
                        let kat = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            let up = dy[at + ch];
                            dx[src + ch] += up * k[kat + ch];
                            dk[kat + ch] += up * x[src + ch];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

// ---------------------------------------------------------------------------
// pooling

/// Mean over the spatial positions: `[B,H,W,C] -> [B,C]`.
pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_rank(4, "global_average_pool")?;
    let s = input.shape();
    let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
    let inv = T::one() / T::of(hw as f64);
    let mut out = vec![T::zero(); b * c];
    for (bi, image) in input.data().chunks_exact(hw * c).enumerate() {
        let acc = &mut out[bi * c..(bi + 1) * c];
        for pixel in image.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(pixel) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Tensor::new(vec![b, c], out)
}

pub fn global_average_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, hw, c) = (input_shape[0], input_shape[1] * input_shape[2], input_shape[3]);
    let inv = T::one() / T::of(hw as f64);
    let mut dx = Vec::with_capacity(b * hw * c);
    for bi in 0..b {
        let row = &grad.data()[bi * c..(bi + 1) * c];
        for _ in 0..hw {
            dx.extend(row.iter().map(|&g| g * inv));
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

// ---------------------------------------------------------------------------
// activations

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Softmax normalized along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return shape_err(format!(
            "softmax: axis {axis} out of range for shape {:?}",
            x.shape()
        ));
    }
    let extent = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer = x.len() / (extent * inner);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * extent + j) * inner + i;
            let max = (0..extent).fold(T::neg_infinity(), |m, j| m.max(data[at(j)]));
            let mut total = T::zero();
            for j in 0..extent {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                total += e;
            }
            for j in 0..extent {
                data[at(j)] /= total;
            }
        }
    }
    Ok(out)
}
