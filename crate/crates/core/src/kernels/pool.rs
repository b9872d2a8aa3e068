//! Pooling over NCHW tensors with square windows and stride equal to the window.

use crate::error::{Error, Result};
use crate::numfmt::{renormalize_wide, FixedScalar, FxpTensor, RoundingContext};

fn pooled_dims(op: &'static str, shape: &[usize], win: usize) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] if win > 0 && h % win == 0 && w % win == 0 => Ok([n, c, h / win, w / win]),
        _ => Err(Error::shape(op, shape, &[win, win])),
    }
}

/// Visits each output cell with the flat input indices of its window.
fn for_windows(shape: &[usize], win: usize, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
    let (h, w) = (shape[2], shape[3]);
    let (oh, ow) = (h / win, w / win);
    let planes = shape[0] * shape[1];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let out = (p * oh + y) * ow + x;
                let base = p * h * w + y * win * w + x * win;
                let mut it = (0..win * win).map(|k| base + (k / win) * w + k % win);
                f(out, &mut it);
            }
        }
    }
}

/// Max pooling; returns the output and the flat input index picked per cell
/// (first maximum on ties).
pub fn fxp_maxpool(x: &FxpTensor, win: usize) -> Result<(FxpTensor, Vec<usize>)> {
    let dims = pooled_dims("fxp_maxpool", x.shape(), win)?;
    let n: usize = dims.iter().product();
    let mut arg = vec![0usize; n];
    let m = x.mantissas();
    for_windows(x.shape(), win, |out, idx| {
        let mut best = usize::MAX;
        for i in idx {
            if best == usize::MAX || m[i] > m[best] {
                best = i;
            }
        }
        arg[out] = best;
    });
    Ok((x.gather(dims.to_vec(), &arg), arg))
}

pub fn fxp_maxpool_backward(g: &FxpTensor, argmax: &[usize], input_shape: &[usize]) -> Result<FxpTensor> {
    if g.len() != argmax.len() {
        return Err(Error::CacheMismatch("max-pool indices do not match the gradient".into()));
    }
    let mut out = vec![0i8; input_shape.iter().product()];
    for (&gm, &i) in g.mantissas().iter().zip(argmax) {
        out[i] = gm;
    }
    FxpTensor::new(input_shape.to_vec(), g.bits(), g.exponent(), out)
}

/// Average pooling: integer window sums times the fixed-point reciprocal of
/// the window size, rounded once.
pub fn fxp_avgpool(x: &FxpTensor, win: usize, ctx: &mut RoundingContext) -> Result<FxpTensor> {
    let dims = pooled_dims("fxp_avgpool", x.shape(), win)?;
    let Some(u) = x.unit_exponent() else {
        return Ok(FxpTensor::zeros(&dims, x.bits()));
    };
    let r = FixedScalar::reciprocal((win * win) as u64);
    let mut sums = vec![0i128; dims.iter().product()];
    let m = x.mantissas();
    for_windows(x.shape(), win, |out, idx| {
        sums[out] = idx.map(|i| m[i] as i128).sum::<i128>() * r.mantissa as i128;
    });
    renormalize_wide(&sums, |_| u + r.exponent, &dims, x.bits(), ctx)
}

pub fn fxp_avgpool_backward(g: &FxpTensor, win: usize, input_shape: &[usize], ctx: &mut RoundingContext) -> Result<FxpTensor> {
    let dims = pooled_dims("fxp_avgpool_backward", input_shape, win)?;
    if g.shape() != dims {
        return Err(Error::shape("fxp_avgpool_backward", g.shape(), &dims));
    }
    let Some(u) = g.unit_exponent() else {
        return Ok(FxpTensor::zeros(input_shape, g.bits()));
    };
    let r = FixedScalar::reciprocal((win * win) as u64);
    let mut out = vec![0i128; input_shape.iter().product()];
    let m = g.mantissas();
    for_windows(input_shape, win, |o, idx| {
        for i in idx {
            out[i] = m[o] as i128 * r.mantissa as i128;
        }
    });
    renormalize_wide(&out, |_| u + r.exponent, input_shape, g.bits(), ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numfmt::map_to_fixed;

    #[test]
    fn max_and_average() {
        let mut ctx = RoundingContext::nearest();
        let vals: Vec<f32> = (0..16).map(|i| i as f32 * 0.25 - 2.0).collect();
        let x = map_to_fixed(&vals, &[1, 1, 4, 4], 8, &mut ctx).unwrap();
        let (y, arg) = fxp_maxpool(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
        let g = map_to_fixed(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], 8, &mut ctx).unwrap();
        let dx = fxp_maxpool_backward(&g, &arg, x.shape()).unwrap().to_f64();
        assert_eq!(dx[5], 1.0);
        assert_eq!(dx[0], 0.0);
        let a = fxp_avgpool(&x, 2, &mut ctx).unwrap().to_f64();
        let xf = x.to_f64();
        let want = (xf[0] + xf[1] + xf[4] + xf[5]) / 4.0;
        assert!((a[0] - want).abs() < 1e-9);
        let da = fxp_avgpool_backward(&g, 2, x.shape(), &mut ctx).unwrap().to_f64();
        assert_eq!(da[0], 0.25);
        assert_eq!(da[15], 1.0);
    }
}
