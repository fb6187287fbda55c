//! Dense kernels behind the spatial graph operations.

use crate::{NnError, Real, Result, Tensor};

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn reflect_pad<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if pad >= h || pad >= w {
        return Err(NnError::Shape(format!("reflection pad {pad} needs spatial dims > {pad}, got {h}x{w}")));
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for y in 0..hp {
            let sy = reflect(y as isize - pad as isize, h);
            let row = &plane[sy * w..(sy + 1) * w];
            for xo in 0..wp {
                out.push(row[reflect(xo as isize - pad as isize, w)]);
            }
        }
    }
    Tensor::new(&[c, hp, wp], out)
}

pub(crate) fn reflect_pad_backward<T: Real>(g: &[T], in_shape: &[usize], pad: usize, d: &mut [T]) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    for ch in 0..c {
        for y in 0..hp {
            let sy = reflect(y as isize - pad as isize, h);
            for xo in 0..wp {
                let sx = reflect(xo as isize - pad as isize, w);
                let i = ch * h * w + sy * w + sx;
                d[i] = d[i] + g[ch * hp * wp + y * wp + xo];
            }
        }
    }
}

fn out_dim(n: usize, k: usize, stride: usize) -> Result<usize> {
    if n < k || stride == 0 {
        return Err(NnError::Shape(format!("kernel {k} (stride {stride}) does not fit input extent {n}")));
    }
    Ok((n - k) / stride + 1)
}

/// Unfolds `x` into a `[C * k * k, H_out * W_out]` column matrix.
pub(crate) fn im2col<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Vec<T>> {
    let (c, h, w) = x.chw()?;
    let (ho, wo) = (out_dim(h, k, stride)?, out_dim(w, k, stride)?);
    let p = ho * wo;
    let xd = x.data();
    let mut cols = Vec::with_capacity(c * k * k * p);
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..ho {
                    let src = &plane[(oy * stride + ky) * w + kx..];
                    if stride == 1 {
                        cols.extend_from_slice(&src[..wo]);
                    } else {
                        cols.extend((0..wo).map(|ox| src[ox * stride]));
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters columns back onto `d`.
pub(crate) fn col2im_add<T: Real>(cols: &[T], in_shape: &[usize], k: usize, stride: usize, d: &mut [T]) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut d[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let base = (oy * stride + ky) * w + kx;
                    let src = &row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        for (dv, &s) in plane[base..base + wo].iter_mut().zip(src) {
                            *dv = *dv + s;
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let i = base + ox * stride;
                            plane[i] = plane[i] + s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (c, h, wd) = x.chw()?;
    let (co, ci, k) = match w.shape()[..] {
        [co, ci, kh, kw] if kh == kw => (co, ci, kh),
        _ => return Err(NnError::Shape(format!("kernel must be [C_out, C_in, k, k], got {:?}", w.shape()))),
    };
    if ci != c {
        return Err(NnError::Shape(format!("kernel expects {ci} input channels, input has {c}")));
    }
    if b.len() != co {
        return Err(NnError::Shape(format!("bias needs {co} entries, got {}", b.len())));
    }
    let (ho, wo) = (out_dim(h, k, stride)?, out_dim(wd, k, stride)?);
    let p = ho * wo;
    let kk = ci * k * k;
    let mut out = Vec::with_capacity(co * p);
    for &bv in b.data() {
        out.extend(std::iter::repeat_n(bv, p));
    }
    if k == 1 && stride == 1 {
        T::gemm(co, kk, p, T::one(), w.data(), kk as isize, 1, x.data(), p as isize, 1, T::one(), &mut out, p as isize, 1);
    } else {
        let cols = im2col(x, k, stride)?;
        T::gemm(co, kk, p, T::one(), w.data(), kk as isize, 1, &cols, p as isize, 1, T::one(), &mut out, p as isize, 1);
    }
    Tensor::new(&[co, ho, wo], out)
}

/// `dW += dY * cols^T`.
pub(crate) fn conv_weight_grad<T: Real>(g: &[T], out_shape: &[usize], cols: &[T], d: &mut [T]) {
    let co = out_shape[0];
    let p = out_shape[1] * out_shape[2];
    let kk = cols.len() / p;
    T::gemm(co, p, kk, T::one(), g, p as isize, 1, cols, 1, p as isize, T::one(), d, kk as isize, 1);
}

/// `dcols = W^T * dY`.
pub(crate) fn conv_cols_grad<T: Real>(g: &[T], out_shape: &[usize], w: &Tensor<T>) -> Vec<T> {
    let co = out_shape[0];
    let p = out_shape[1] * out_shape[2];
    let kk = w.len() / co;
    let mut dcols = vec![T::zero(); kk * p];
    T::gemm(kk, co, p, T::one(), w.data(), 1, kk as isize, g, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
    dcols
}

pub(crate) fn bias_grad<T: Real>(g: &[T], out_shape: &[usize], d: &mut [T]) {
    let p = out_shape[1] * out_shape[2];
    for (ch, dv) in d.iter_mut().enumerate() {
        *dv = *dv + g[ch * p..(ch + 1) * p].iter().copied().sum::<T>();
    }
}

/// Returns the standardized tensor and per-channel `1 / sqrt(var + eps)`.
pub(crate) fn instance_norm<T: Real>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let (c, _, _) = x.chw()?;
    standardize_groups(x, c, eps)
}

/// Standardizes each of `groups` equal contiguous slices; returns the reciprocal std per group.
pub(crate) fn standardize_groups<T: Real>(x: &Tensor<T>, groups: usize, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let len = x.len() / groups;
    let n = T::from_usize(len).unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut rstds = Vec::with_capacity(groups);
    for plane in x.data().chunks_exact(len) {
        let mean = plane.iter().copied().sum::<T>() / n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        out.extend(plane.iter().map(|&v| (v - mean) * rstd));
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape(), out)?, rstds))
}

pub(crate) fn standardize_backward<T: Real>(g: &[T], xhat: &Tensor<T>, rstd: &[T], d: &mut [T]) {
    let hw = xhat.len() / rstd.len();
    let n = T::from_usize(hw).unwrap();
    let xh = xhat.data();
    for (ch, &r) in rstd.iter().enumerate() {
        let range = ch * hw..(ch + 1) * hw;
        let gs = &g[range.clone()];
        let xs = &xh[range.clone()];
        let sum_g: T = gs.iter().copied().sum();
        let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
        for ((dv, &gv), &xv) in d[range].iter_mut().zip(gs).zip(xs) {
            *dv = *dv + r / n * (n * gv - sum_g - xv * sum_gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::new(&[1, 1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        // width 3 cannot be padded by 1 along height 1
        assert!(reflect_pad(&x, 1).is_err());
        let x = Tensor::new(&[1, 2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&x, 1).unwrap();
        assert_eq!(p.shape(), &[1, 4, 5]);
        assert_eq!(&p.data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&p.data()[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
    }

    #[test]
    fn im2col_stride_two_picks_expected_taps() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let cols = im2col(&x, 2, 2).unwrap();
        // output 2x2, first kernel tap (0,0) reads pixels 0, 2, 8, 10
        assert_eq!(&cols[0..4], &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(&cols[12..16], &[5.0, 7.0, 13.0, 15.0]);
    }
}
