//! 2-D convolution as im2col followed by the integer GEMM.

use super::acc::AccTensor;
use super::gemm::{fxp_gemm, fxp_gemm_nt, fxp_gemm_tiled};
use crate::error::{Error, Result};
use crate::numfmt::{renormalize_wide, FxpTensor, RoundingContext};

/// Shapes of one convolution: input `[n, c, h, w]`, weights `[o, c, kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[o, c2, kh, kw]) = (input, weight) else {
            return Err(Error::shape("conv2d", input, weight));
        };
        if c != c2 || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", input, weight));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.oh, self.ow]
    }

    pub(crate) fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub(crate) fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Input flat index feeding `cols[row, col]`, or `None` inside the padding.
    #[inline]
    pub(crate) fn source(&self, row: usize, col: usize) -> Option<usize> {
        let (b, rem) = (row / (self.oh * self.ow), row % (self.oh * self.ow));
        let (y, x) = (rem / self.ow, rem % self.ow);
        let (ch, k) = (col / (self.kh * self.kw), col % (self.kh * self.kw));
        let (ky, kx) = (k / self.kw, k % self.kw);
        let iy = (y * self.stride + ky).checked_sub(self.pad)?;
        let ix = (x * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then(|| ((b * self.c + ch) * self.h + iy) * self.w + ix)
    }

    /// Permutation taking `[n*oh*ow, o]` row-major data to `[n, o, oh, ow]`.
    fn to_nchw(&self) -> Vec<usize> {
        let hw = self.oh * self.ow;
        (0..self.rows() * self.o)
            .map(|i| {
                let (b, rem) = (i / (self.o * hw), i % (self.o * hw));
                let (ch, p) = (rem / hw, rem % hw);
                (b * hw + p) * self.o + ch
            })
            .collect()
    }

    /// Permutation taking `[n, o, oh, ow]` data to `[n*oh*ow, o]`.
    fn from_nchw(&self) -> Vec<usize> {
        let hw = self.oh * self.ow;
        (0..self.rows() * self.o)
            .map(|i| {
                let (row, ch) = (i / self.o, i % self.o);
                let (b, p) = (row / hw, row % hw);
                (b * self.o + ch) * hw + p
            })
            .collect()
    }
}

/// Unfolds input patches into rows: `[n*oh*ow, c*kh*kw]`.
pub fn im2col(x: &FxpTensor, g: &ConvGeometry) -> FxpTensor {
    let (rows, cols) = (g.rows(), g.patch());
    let m = x.mantissas();
    let data = (0..rows * cols)
        .map(|i| g.source(i / cols, i % cols).map_or(0, |s| m[s]))
        .collect();
    FxpTensor::new(vec![rows, cols], x.bits(), x.exponent(), data).expect("im2col keeps mantissa ranges")
}

/// Exact convolution; output `[n, o, oh, ow]` at scale `e_x + e_w - 2(k - 2)`.
pub fn fxp_conv2d(x: &FxpTensor, w: &FxpTensor, stride: usize, pad: usize) -> Result<AccTensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    fxp_conv2d_cols(&im2col(x, &g), w, &g)
}

/// Convolution from already unfolded input columns.
pub fn fxp_conv2d_cols(cols: &FxpTensor, w: &FxpTensor, g: &ConvGeometry) -> Result<AccTensor> {
    let wm = w.clone().reshape(vec![g.o, g.patch()])?;
    let acc = fxp_gemm_nt(cols, &wm)?;
    let perm = g.to_nchw();
    Ok(AccTensor {
        shape: g.output_shape().to_vec(),
        values: perm.iter().map(|&p| acc.values[p]).collect(),
        scale_exponent: acc.scale_exponent,
    })
}

fn grad_rows(gy: &FxpTensor, g: &ConvGeometry) -> Result<FxpTensor> {
    if gy.shape() != g.output_shape() {
        return Err(Error::shape("conv2d backward", gy.shape(), &g.output_shape()));
    }
    Ok(gy.gather(vec![g.rows(), g.o], &g.from_nchw()))
}

/// Weight gradient `G^T cols`, rounded once to `bits`.
pub fn fxp_conv2d_backward_weight(
    gy: &FxpTensor,
    cols: &FxpTensor,
    g: &ConvGeometry,
    bits: u32,
    ctx: &mut RoundingContext,
) -> Result<FxpTensor> {
    let gm = grad_rows(gy, g)?.transpose()?;
    fxp_gemm_tiled(&gm, cols, bits, ctx)?.reshape(vec![g.o, g.c, g.kh, g.kw])
}

/// Input gradient: `G W` folded back onto the input with col2im, rounded once.
pub fn fxp_conv2d_backward_input(
    gy: &FxpTensor,
    w: &FxpTensor,
    g: &ConvGeometry,
    bits: u32,
    ctx: &mut RoundingContext,
) -> Result<FxpTensor> {
    let gm = grad_rows(gy, g)?;
    let wm = w.clone().reshape(vec![g.o, g.patch()])?;
    let acc = fxp_gemm(&gm, &wm)?;
    let patch = g.patch();
    let mut out = vec![0i128; g.n * g.c * g.h * g.w];
    for (i, &v) in acc.values.iter().enumerate() {
        if v != 0 {
            if let Some(s) = g.source(i / patch, i % patch) {
                out[s] += v as i128;
            }
        }
    }
    let unit = acc.scale_exponent;
    renormalize_wide(&out, |_| unit, &[g.n, g.c, g.h, g.w], bits, ctx)
}
