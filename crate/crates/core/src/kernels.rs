//! Raw forward/adjoint loops behind the differentiable operators.
//!
//! Every routine parallelizes over whole output planes (or whole output
//! elements) and reduces serially inside each one, so results do not depend
//! on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Padding, Real, Tensor};

fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn check_padding(padding: Padding, h: usize, w: usize) -> Result<()> {
    if let Padding::Reflect(p) = padding {
        if p >= h || p >= w {
            return Err(Error::invalid(
                "pad",
                format!("reflection margin {p} must be smaller than spatial size {h}x{w}"),
            ));
        }
    }
    Ok(())
}

pub(crate) fn pad<T: Real>(x: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    check_padding(padding, h, w)?;
    let p = padding.margin();
    if p == 0 {
        return Ok(x.clone());
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * hp * wp];
    out.par_chunks_mut(hp * wp)
        .enumerate()
        .for_each(|(plane, dst)| {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            match padding {
                Padding::Zero(_) => {
                    for y in 0..h {
                        dst[(y + p) * wp + p..(y + p) * wp + p + w]
                            .copy_from_slice(&s[y * w..(y + 1) * w]);
                    }
                }
                Padding::Reflect(_) => {
                    for yp in 0..hp {
                        let sy = reflect_index(yp as isize - p as isize, h);
                        for xp in 0..wp {
                            let sx = reflect_index(xp as isize - p as isize, w);
                            dst[yp * wp + xp] = s[sy * w + sx];
                        }
                    }
                }
            }
        });
    Tensor::new([n, c, hp, wp], out)
}

/// Adjoint of [`pad`]: folds a gradient on the padded grid back onto the
/// `h x w` grid. Zero padding crops; reflection adds mirrored margins back.
pub(crate) fn pad_adjoint<T: Real>(
    g: &Tensor<T>,
    padding: Padding,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let p = padding.margin();
    if p == 0 {
        return Ok(g.clone());
    }
    let [n, c, hp, wp] = g.dims();
    if hp != h + 2 * p || wp != w + 2 * p {
        return Err(Error::shape("pad_adjoint", format!("{:?} vs {h}x{w}", g.dims())));
    }
    check_padding(padding, h, w)?;
    let src = g.data();
    let mut out = vec![T::zero(); n * c * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(plane, dst)| {
        let s = &src[plane * hp * wp..(plane + 1) * hp * wp];
        match padding {
            Padding::Zero(_) => {
                for y in 0..h {
                    dst[y * w..(y + 1) * w]
                        .copy_from_slice(&s[(y + p) * wp + p..(y + p) * wp + p + w]);
                }
            }
            Padding::Reflect(_) => {
                for yp in 0..hp {
                    let sy = reflect_index(yp as isize - p as isize, h);
                    for xp in 0..wp {
                        let sx = reflect_index(xp as isize - p as isize, w);
                        dst[sy * w + sx] = dst[sy * w + sx] + s[yp * wp + xp];
                    }
                }
            }
        }
    });
    Tensor::new([n, c, h, w], out)
}

pub(crate) fn conv_out_len(padded: usize, k: usize, stride: usize) -> Option<usize> {
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Unpadded cross-correlation. `xp: [n, ci, hp, wp]`, `k: [co, ci, kh, kw]`.
pub(crate) fn conv_valid<T: Real>(xp: &Tensor<T>, k: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let [n, ci, hp, wp] = xp.dims();
    let [co, kci, kh, kw] = k.dims();
    if kci != ci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels, kernel expects {kci}"),
        ));
    }
    let (oh, ow) = match (conv_out_len(hp, kh, stride), conv_out_len(wp, kw, stride)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
            ))
        }
    };
    let x = xp.data();
    let kd = k.data();
    let mut out = vec![T::zero(); n * co * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(idx, plane)| {
        let (b, o) = (idx / co, idx % co);
        for c in 0..ci {
            let xplane = &x[(b * ci + c) * hp * wp..(b * ci + c + 1) * hp * wp];
            let kbase = (o * ci + c) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[kbase + ky * kw + kx];
                    for oy in 0..oh {
                        let row = &xplane[(oy * stride + ky) * wp + kx..];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            for (acc, &v) in orow.iter_mut().zip(&row[..ow]) {
                                *acc = *acc + wgt * v;
                            }
                        } else {
                            for (ox, acc) in orow.iter_mut().enumerate() {
                                *acc = *acc + wgt * row[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new([n, co, oh, ow], out)
}

/// Adjoint of [`conv_valid`] with respect to its input, producing a `hp x wp` grid.
pub(crate) fn conv_valid_input_grad<T: Real>(
    gy: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    hp: usize,
    wp: usize,
) -> Result<Tensor<T>> {
    let [n, co, oh, ow] = gy.dims();
    let [kco, ci, kh, kw] = k.dims();
    if kco != co {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {co} channels, kernel expects {kco}"),
        ));
    }
    if conv_out_len(hp, kh, stride) != Some(oh) || conv_out_len(wp, kw, stride) != Some(ow) {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("{oh}x{ow} input is inconsistent with declared {hp}x{wp} (stride {stride}, kernel {kh}x{kw})"),
        ));
    }
    let g = gy.data();
    let kd = k.data();
    let mut out = vec![T::zero(); n * ci * hp * wp];
    out.par_chunks_mut(hp * wp).enumerate().for_each(|(idx, plane)| {
        let (b, c) = (idx / ci, idx % ci);
        for o in 0..co {
            let gplane = &g[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            let kbase = (o * ci + c) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[kbase + ky * kw + kx];
                    for oy in 0..oh {
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let dst = &mut plane[(oy * stride + ky) * wp + kx..];
                        if stride == 1 {
                            for (acc, &v) in dst[..ow].iter_mut().zip(grow) {
                                *acc = *acc + wgt * v;
                            }
                        } else {
                            for (ox, &v) in grow.iter().enumerate() {
                                let acc = &mut dst[ox * stride];
                                *acc = *acc + wgt * v;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new([n, ci, hp, wp], out)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            lanes[l] = lanes[l] + a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut acc = T::zero();
    for i in chunks * 8..a.len() {
        acc = acc + a[i] * b[i];
    }
    lanes.iter().fold(T::zero(), |s, &v| s + v) + acc
}

/// Gradient of [`conv_valid`] with respect to the kernel.
pub(crate) fn conv_valid_kernel_grad<T: Real>(
    xp: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor<T>> {
    let [n, ci, hp, wp] = xp.dims();
    let [gn, co, oh, ow] = gy.dims();
    if gn != n {
        return Err(Error::shape("conv2d kernel grad", "batch mismatch"));
    }
    let x = xp.data();
    let g = gy.data();
    let mut out = vec![T::zero(); co * ci * kh * kw];
    out.par_chunks_mut(kh * kw).enumerate().for_each(|(idx, taps)| {
        let (o, c) = (idx / ci, idx % ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let mut acc = T::zero();
                for b in 0..n {
                    let gplane = &g[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
                    let xplane = &x[(b * ci + c) * hp * wp..(b * ci + c + 1) * hp * wp];
                    for oy in 0..oh {
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[(oy * stride + ky) * wp + kx..];
                        if stride == 1 {
                            acc = acc + dot(grow, &xrow[..ow]);
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                acc = acc + gv * xrow[ox * stride];
                            }
                        }
                    }
                }
                taps[ky * kw + kx] = acc;
            }
        }
    });
    Tensor::new([co, ci, kh, kw], out)
}

pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn instance_norm<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    eps: T,
) -> (Tensor<T>, NormCache<T>) {
    let [n, c, h, w] = x.dims();
    let len = h * w;
    let count = T::from_usize(len).unwrap();
    let mut xhat = vec![T::zero(); n * c * len];
    let mut inv_std = vec![T::zero(); n * c];
    xhat.par_chunks_mut(len)
        .zip(inv_std.par_iter_mut())
        .enumerate()
        .for_each(|(plane, (xh, istd))| {
            let s = &x.data()[plane * len..(plane + 1) * len];
            let mean = s.iter().copied().sum::<T>() / count;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            *istd = T::one() / (var + eps).sqrt();
            for (d, &v) in xh.iter_mut().zip(s) {
                *d = (v - mean) * *istd;
            }
        });
    let mut y = vec![T::zero(); n * c * len];
    for (plane, dst) in y.chunks_mut(len).enumerate() {
        let ch = plane % c;
        for (d, &v) in dst.iter_mut().zip(&xhat[plane * len..(plane + 1) * len]) {
            *d = scale[ch] * v + shift[ch];
        }
    }
    (
        Tensor::new([n, c, h, w], y).unwrap(),
        NormCache { xhat, inv_std },
    )
}

/// Returns `(d_input, d_scale, d_shift)`.
pub(crate) fn instance_norm_backward<T: Real>(
    gy: &Tensor<T>,
    cache: &NormCache<T>,
    scale: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = gy.dims();
    let len = h * w;
    let count = T::from_usize(len).unwrap();
    let g = gy.data();
    let mut dx = vec![T::zero(); n * c * len];
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for plane in 0..n * c {
        let ch = plane % c;
        let gs = &g[plane * len..(plane + 1) * len];
        let xh = &cache.xhat[plane * len..(plane + 1) * len];
        let sum_g: T = gs.iter().copied().sum();
        let sum_gx: T = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        dshift[ch] = dshift[ch] + sum_g;
        dscale[ch] = dscale[ch] + sum_gx;
        let k = scale[ch] * cache.inv_std[plane] / count;
        for ((d, &gv), &xv) in dx[plane * len..(plane + 1) * len].iter_mut().zip(gs).zip(xh) {
            *d = k * (count * gv - sum_g - xv * sum_gx);
        }
    }
    (Tensor::new([n, c, h, w], dx).unwrap(), dscale, dshift)
}

/// `[n, c, h, w] -> [n, 1, c, c]`, normalized by `c*h*w`.
pub(crate) fn gram<T: Real>(f: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = f.dims();
    let len = h * w;
    let norm = T::from_usize(c * len).unwrap();
    let d = f.data();
    let mut out = vec![T::zero(); n * c * c];
    out.par_chunks_mut(c).enumerate().for_each(|(row, dst)| {
        let (b, i) = (row / c, row % c);
        for (j, slot) in dst.iter_mut().enumerate() {
            // Symmetric by construction: pair (i, j) and (j, i) use the same operand order.
            let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
            let a = &d[(b * c + lo) * len..(b * c + lo + 1) * len];
            let bb = &d[(b * c + hi) * len..(b * c + hi + 1) * len];
            *slot = dot(a, bb) / norm;
        }
    });
    Tensor::new([n, 1, c, c], out).unwrap()
}

pub(crate) fn gram_backward<T: Real>(f: &Tensor<T>, gg: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = f.dims();
    let len = h * w;
    let norm = T::from_usize(c * len).unwrap();
    let d = f.data();
    let g = gg.data();
    let mut out = vec![T::zero(); n * c * len];
    out.par_chunks_mut(len).enumerate().for_each(|(plane, dst)| {
        let (b, i) = (plane / c, plane % c);
        for j in 0..c {
            let coef = (g[(b * c + i) * c + j] + g[(b * c + j) * c + i]) / norm;
            let fj = &d[(b * c + j) * len..(b * c + j + 1) * len];
            for (acc, &v) in dst.iter_mut().zip(fj) {
                *acc = *acc + coef * v;
            }
        }
    });
    Tensor::new([n, c, h, w], out).unwrap()
}

/// Mean of squared forward differences (horizontal plus vertical) over all elements.
pub(crate) fn tv<T: Real>(x: &Tensor<T>) -> T {
    let [_, _, h, w] = x.dims();
    let len = h * w;
    let mut acc = T::zero();
    for plane in x.data().chunks(len) {
        for y in 0..h {
            for xx in 0..w {
                let v = plane[y * w + xx];
                if xx + 1 < w {
                    let d = plane[y * w + xx + 1] - v;
                    acc = acc + d * d;
                }
                if y + 1 < h {
                    let d = plane[(y + 1) * w + xx] - v;
                    acc = acc + d * d;
                }
            }
        }
    }
    acc / T::from_usize(x.len()).unwrap()
}

pub(crate) fn tv_backward<T: Real>(x: &Tensor<T>, g: T) -> Tensor<T> {
    let [_, _, h, w] = x.dims();
    let len = h * w;
    let k = (g + g) / T::from_usize(x.len()).unwrap();
    let mut out = vec![T::zero(); x.len()];
    for (plane, dst) in x.data().chunks(len).zip(out.chunks_mut(len)) {
        for y in 0..h {
            for xx in 0..w {
                let v = plane[y * w + xx];
                if xx + 1 < w {
                    let d = k * (plane[y * w + xx + 1] - v);
                    dst[y * w + xx + 1] = dst[y * w + xx + 1] + d;
                    dst[y * w + xx] = dst[y * w + xx] - d;
                }
                if y + 1 < h {
                    let d = k * (plane[(y + 1) * w + xx] - v);
                    dst[(y + 1) * w + xx] = dst[(y + 1) * w + xx] + d;
                    dst[y * w + xx] = dst[y * w + xx] - d;
                }
            }
        }
    }
    Tensor::new(x.dims(), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::<f64>::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        // A 1-row input cannot be reflected vertically.
        assert!(pad(&x, Padding::Reflect(1)).is_err());
        let x = Tensor::<f64>::new([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = pad(&x, Padding::Reflect(1)).unwrap();
        assert_eq!(p.dims(), [1, 1, 4, 5]);
        assert_eq!(&p.data()[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        assert_eq!(&p.data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn pad_adjoint_is_adjoint() {
        let x = Tensor::<f64>::from_fn([1, 2, 4, 5], |_, c, y, x| (c * 20 + y * 5 + x) as f64 * 0.37 - 3.0);
        for padding in [Padding::Zero(2), Padding::Reflect(2)] {
            let px = pad(&x, padding).unwrap();
            let g = Tensor::<f64>::from_fn(px.dims(), |_, c, y, x| ((c + 3 * y + 7 * x) % 5) as f64 - 2.0);
            let lhs: f64 = px.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let ag = pad_adjoint(&g, padding, 4, 5).unwrap();
            let rhs: f64 = x.data().iter().zip(ag.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{padding:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let f = Tensor::<f32>::from_fn([2, 5, 3, 7], |n, c, y, x| ((n + 3 * c + 5 * y + 7 * x) % 11) as f32 * 0.13 - 0.4);
        let g = gram(&f);
        for b in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(g.at(b, 0, i, j).to_bits(), g.at(b, 0, j, i).to_bits());
                }
            }
        }
    }
}
