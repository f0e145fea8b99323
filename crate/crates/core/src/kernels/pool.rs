//! 2x2 max pooling with argmax indices, and the matching max-unpooling.

use crate::error::{expect_dim, Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Argmax location of every pooled element, as an offset `dy * 2 + dx`
/// inside its own 2x2 window of the pre-pool input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    shape: Shape4,
    offsets: Vec<u8>,
}

impl PoolIndices {
    pub fn from_offsets(shape: Shape4, offsets: Vec<u8>) -> Result<Self> {
        expect_dim("PoolIndices", "offset count", shape.len(), offsets.len())?;
        Ok(PoolIndices { shape, offsets })
    }

    /// Shape of the pooled output these indices belong to.
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }

    /// Shape of the pre-pool input.
    pub fn input_shape(&self) -> Shape4 {
        let s = self.shape;
        Shape4::new(s.n, s.c, s.h * 2, s.w * 2)
    }

    /// Flat position in the pre-pool tensor addressed by pooled element `i`.
    fn source(&self, i: usize) -> Result<usize> {
        let offset = self.offsets[i];
        if offset > 3 {
            return Err(Error::CorruptIndices { element: i, offset });
        }
        let s = self.shape;
        let (x, rest) = (i % s.w, i / s.w);
        let (y, plane) = (rest % s.h, rest / s.h);
        let (wy, wx) = (2 * y + (offset as usize >> 1), 2 * x + (offset as usize & 1));
        Ok((plane * 2 * s.h + wy) * 2 * s.w + wx)
    }
}

pub fn maxpool2x2_forward(input: &Tensor4) -> Result<(Tensor4, PoolIndices)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::OddSpatial { h: s.h, w: s.w });
    }
    let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut offsets = Vec::with_capacity(out_shape.len());
    let src = input.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for y in 0..out_shape.h {
            let top = base + 2 * y * s.w;
            let bottom = top + s.w;
            for x in 0..out_shape.w {
                let window = [src[top + 2 * x], src[top + 2 * x + 1], src[bottom + 2 * x], src[bottom + 2 * x + 1]];
                // strict comparison: ties keep the smallest offset
                let mut best = 0u8;
                for (k, v) in window.iter().enumerate().skip(1) {
                    if *v > window[best as usize] {
                        best = k as u8;
                    }
                }
                out.push(window[best as usize]);
                offsets.push(best);
            }
        }
    }
    Ok((Tensor4::from_vec(out_shape, out)?, PoolIndices { shape: out_shape, offsets }))
}

fn check_against_indices(op: &'static str, t: Shape4, indices: &PoolIndices) -> Result<()> {
    let s = indices.shape();
    expect_dim(op, "batch", s.n, t.n)?;
    expect_dim(op, "channels", s.c, t.c)?;
    expect_dim(op, "height", s.h, t.h)?;
    expect_dim(op, "width", s.w, t.w)
}

/// Scatter `input` into a zero tensor of `out_shape` at the recorded argmax positions.
pub fn maxunpool2x2(input: &Tensor4, indices: &PoolIndices, out_shape: Shape4) -> Result<Tensor4> {
    const OP: &str = "maxunpool2x2";
    check_against_indices(OP, input.shape(), indices)?;
    let expected = indices.input_shape();
    expect_dim(OP, "output height", expected.h, out_shape.h)?;
    expect_dim(OP, "output width", expected.w, out_shape.w)?;
    expect_dim(OP, "output channels", expected.c, out_shape.c)?;
    expect_dim(OP, "output batch", expected.n, out_shape.n)?;
    let mut out = Tensor4::zeros(out_shape);
    let dst = out.data_mut();
    for (i, v) in input.data().iter().enumerate() {
        dst[indices.source(i)?] = *v;
    }
    Ok(out)
}

/// Gradient of [`maxpool2x2_forward`]: routes each upstream value to its argmax.
pub fn maxpool2x2_backward(grad_out: &Tensor4, indices: &PoolIndices) -> Result<Tensor4> {
    maxunpool2x2(grad_out, indices, indices.input_shape())
}

/// Gradient of [`maxunpool2x2`]: gathers the upstream gradient at each argmax.
pub fn maxunpool2x2_backward(grad_out: &Tensor4, indices: &PoolIndices) -> Result<Tensor4> {
    const OP: &str = "maxunpool2x2_backward";
    let expected = indices.input_shape();
    let got = grad_out.shape();
    expect_dim(OP, "grad height", expected.h, got.h)?;
    expect_dim(OP, "grad width", expected.w, got.w)?;
    expect_dim(OP, "grad channels", expected.c, got.c)?;
    expect_dim(OP, "grad batch", expected.n, got.n)?;
    let src = grad_out.data();
    let data = (0..indices.offsets.len())
        .map(|i| indices.source(i).map(|j| src[j]))
        .collect::<Result<Vec<_>>>()?;
    Tensor4::from_vec(indices.shape(), data)
}
