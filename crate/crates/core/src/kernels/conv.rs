//! 2-D cross-correlation via im2col + GEMM.
//!
//! Each batch item is lowered to a `(in_c·k·k) × (oh·ow)` column matrix and
//! multiplied by the `(out_c) × (in_c·k·k)` weight matrix. Batch items are
//! independent, so the rayon path produces bit-identical results.

use rayon::prelude::*;

use crate::error::{expect_dim, Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Gradients of a convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor4,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape4, weights: Shape4, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        expect_dim(OP, "input channels", weights.c, input.c)?;
        if weights.h != weights.w {
            return Err(Error::invalid(OP, format!("kernel must be square, got {}x{}", weights.h, weights.w)));
        }
        let k = weights.h;
        if k % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        if input.h + 2 * pad < k || input.w + 2 * pad < k {
            return Err(Error::invalid(
                OP,
                format!("kernel {k} larger than padded input {}x{}", input.h + 2 * pad, input.w + 2 * pad),
            ));
        }
        Ok(ConvGeometry {
            in_c: input.c,
            out_c: weights.n,
            k,
            stride,
            pad,
            h: input.h,
            w: input.w,
            oh: (input.h + 2 * pad - k) / stride + 1,
            ow: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self, n: usize) -> Shape4 {
        Shape4::new(n, self.out_c, self.oh, self.ow)
    }
}

fn im2col(g: &ConvGeometry, item: &[f32], col: &mut [f32]) {
    let (k, p) = (g.k, g.pixels());
    for ci in 0..g.in_c {
        let plane = &item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f32], item: &mut [f32]) {
    let (k, p) = (g.k, g.pixels());
    item.fill(0.0);
    for ci in 0..g.in_c {
        let plane = &mut item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, s) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides `(row, col)` for each operand; `c = a·b + beta·c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * a_strides.0 + k.saturating_sub(1) * a_strides.1 + 1 || k == 0);
    debug_assert!(b.len() >= k.saturating_sub(1) * b_strides.0 + (n - 1) * b_strides.1 + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the operand extents were checked above; matrixmultiply reads
    // `a` and `b` within those strides and writes exactly m·n elements of `c`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn widen(src: &[f32], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|&v| v as f64));
}

fn check_bias(bias: &[f32], out_c: usize) -> Result<()> {
    expect_dim("conv2d", "bias length", out_c, bias.len())
}

fn forward_item(g: &ConvGeometry, weights: &[f32], bias: &[f32], item: &[f32], out: &mut [f32], col: &mut Vec<f32>) {
    let p = g.pixels();
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    let cols: &[f32] = if g.is_pointwise() {
        item
    } else {
        col.resize(g.patch() * p, 0.0);
        im2col(g, item, col);
        col
    };
    gemm(g.out_c, g.patch(), p, weights, (g.patch(), 1), cols, (p, 1), 1.0, out);
}

/// Cross-correlation of `input` (n, in_c, h, w) with `weights` (out_c, in_c, k, k) plus bias.
pub fn conv2d_forward(input: &Tensor4, weights: &Tensor4, bias: &[f32], stride: usize, pad: usize) -> Result<Tensor4> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, pad)?;
    check_bias(bias, g.out_c)?;
    let n = input.shape().n;
    let mut out = Tensor4::zeros(g.output_shape(n));
    let out_len = g.out_c * g.pixels();
    let mut col = Vec::new();
    for (i, dst) in out.data_mut().chunks_exact_mut(out_len.max(1)).enumerate().take(n) {
        forward_item(&g, weights.data(), bias, input.item(i), dst, &mut col);
    }
    Ok(out)
}

/// Batch-parallel variant of [`conv2d_forward`]; output is bit-identical.
pub fn conv2d_forward_par(input: &Tensor4, weights: &Tensor4, bias: &[f32], stride: usize, pad: usize) -> Result<Tensor4> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, pad)?;
    check_bias(bias, g.out_c)?;
    let n = input.shape().n;
    let mut out = Tensor4::zeros(g.output_shape(n));
    let out_len = (g.out_c * g.pixels()).max(1);
    out.data_mut()
        .par_chunks_exact_mut(out_len)
        .enumerate()
        .take(n)
        .for_each_init(Vec::new, |col, (i, dst)| {
            forward_item(&g, weights.data(), bias, input.item(i), dst, col);
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor4,
    weights: &Tensor4,
    grad_out: &Tensor4,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4, LayerGrads)> {
    const OP: &str = "conv2d_backward";
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, pad)?;
    let n = input.shape().n;
    let expected = g.output_shape(n);
    let got = grad_out.shape();
    expect_dim(OP, "grad batch", expected.n, got.n)?;
    expect_dim(OP, "grad channels", expected.c, got.c)?;
    expect_dim(OP, "grad height", expected.h, got.h)?;
    expect_dim(OP, "grad width", expected.w, got.w)?;

    let (p, patch) = (g.pixels(), g.patch());
    let mut grad_in = Tensor4::zeros(input.shape());
    let mut grad_w = Tensor4::zeros(weights.shape());
    let mut grad_b = vec![0.0f64; g.out_c];
    let mut col = vec![0.0f32; patch * p];
    let mut dcol = vec![0.0f32; patch * p];
    let mut grad_w64 = vec![0.0f64; g.out_c * patch];
    let (mut dy64, mut col64) = (Vec::new(), Vec::new());

    for i in 0..n {
        let dy = grad_out.item(i);
        for (co, row) in dy.chunks_exact(p.max(1)).enumerate().take(g.out_c) {
            grad_b[co] += row.iter().map(|&v| v as f64).sum::<f64>();
        }
        // dW += dY · colᵀ
        let cols: &[f32] = if g.is_pointwise() {
            input.item(i)
        } else {
            im2col(&g, input.item(i), &mut col);
            &col
        };
        widen(dy, &mut dy64);
        widen(cols, &mut col64);
        // SAFETY: dy64 is out_c×p, col64 is patch×p read transposed, and
        // grad_w64 holds out_c×patch; all row-major with the given strides.
        unsafe {
            matrixmultiply::dgemm(
                g.out_c,
                p,
                patch,
                1.0,
                dy64.as_ptr(),
                p as isize,
                1,
                col64.as_ptr(),
                1,
                p as isize,
                1.0,
                grad_w64.as_mut_ptr(),
                patch as isize,
                1,
            );
        }
        // dcol = Wᵀ · dY
        if g.is_pointwise() {
            gemm(patch, g.out_c, p, weights.data(), (1, patch), dy, (p, 1), 0.0, grad_in.item_mut(i));
        } else {
            gemm(patch, g.out_c, p, weights.data(), (1, patch), dy, (p, 1), 0.0, &mut dcol);
            col2im(&g, &dcol, grad_in.item_mut(i));
        }
    }
    grad_w.data_mut().iter_mut().zip(&grad_w64).for_each(|(w, v)| *w = *v as f32);
    Ok((
        grad_in,
        LayerGrads {
            weight: grad_w,
            bias: grad_b.iter().map(|&v| v as f32).collect(),
        },
    ))
}
