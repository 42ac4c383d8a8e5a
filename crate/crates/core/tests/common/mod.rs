//! Independent oracles shared by the integration and acceptance suites.
//! Nothing here calls into the library's kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylebank::{Padding, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn source_index(i: isize, len: usize, padding: Padding) -> Option<usize> {
    let n = len as isize;
    match padding {
        Padding::Zero(_) => (0..n).contains(&i).then_some(i as usize),
        Padding::Reflect(_) => {
            let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
            Some(r as usize)
        }
    }
}

/// Direct nested-loop cross-correlation straight from the definition.
pub fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
    let [n, ci, h, w] = x.dims();
    let [co, _, kh, kw] = k.dims();
    let p = padding.margin();
    let oh = (h + 2 * p - kh) / stride + 1;
    let ow = (w + 2 * p - kw) / stride + 1;
    Tensor::from_fn([n, co, oh, ow], |b, o, oy, ox| {
        let mut acc = 0.0;
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky) as isize - p as isize;
                    let ix = (ox * stride + kx) as isize - p as isize;
                    if let (Some(sy), Some(sx)) = (source_index(iy, h, padding), source_index(ix, w, padding)) {
                        acc += k.at(o, c, ky, kx) * x.at(b, c, sy, sx);
                    }
                }
            }
        }
        acc
    })
}

/// Scatter form of the transposed convolution: every input sample spreads
/// `k`-weighted copies onto the positions it would have been read from.
pub fn naive_conv2d_transpose(
    y: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    padding: Padding,
    out_hw: (usize, usize),
) -> Tensor<f64> {
    let [n, co, oh, ow] = y.dims();
    let [_, ci, kh, kw] = k.dims();
    let (h, w) = out_hw;
    let p = padding.margin() as isize;
    let mut out = Tensor::zeros([n, ci, h, w]);
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = y.at(b, o, oy, ox);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - p;
                                let ix = (ox * stride + kx) as isize - p;
                                if let (Some(sy), Some(sx)) = (source_index(iy, h, padding), source_index(ix, w, padding)) {
                                    let cur = out.at(b, c, sy, sx);
                                    out.set(b, c, sy, sx, cur + k.at(o, c, ky, kx) * v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Explicit double loop with the `c*h*w` normalizer.
pub fn naive_gram(f: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = f.dims();
    Tensor::from_fn([n, 1, c, c], |b, _, i, j| {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += f.at(b, i, y, x) * f.at(b, j, y, x);
            }
        }
        acc / (c * h * w) as f64
    })
}

pub fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = a.data().iter().chain(b.data()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.max_abs_diff(b) / scale
}

/// Compares tape gradients against central differences of the same closure.
/// Returns the worst `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// over all inputs.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let mut grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take_or_zeros(v)).collect();

    let eval = |ins: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        let mut probe = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let a = analytic[i].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    worst
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Random dims with every axis at most the bound, used by the property sweeps.
pub fn small_dims(rng: &mut ChaCha8Rng, max: [usize; 4], min_hw: usize) -> [usize; 4] {
    [
        rng.gen_range(1..=max[0]),
        rng.gen_range(1..=max[1]),
        rng.gen_range(min_hw..=max[2]),
        rng.gen_range(min_hw..=max[3]),
    ]
}

/// Smooth synthetic scene: a bright disk over a vertical gradient.
pub fn disk_scene(h: usize, w: usize) -> Tensor<f32> {
    let (cy, cx, r) = (0.45 * h as f32, 0.55 * w as f32, 0.28 * h.min(w) as f32);
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
        let disk = if d < r { 0.8 } else { 0.2 };
        (disk + 0.15 * c as f32 * (y as f32 / h as f32)).min(1.0)
    })
}

/// Coloured vertical stripes with a slow vertical modulation.
pub fn stripes(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let base = if (x / 8 + c) % 2 == 0 { 0.9 } else { 0.1 + 0.1 * c as f32 };
        base * (0.5 + 0.5 * (y as f32 / 20.0).sin().abs())
    })
}

pub fn checker(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        if (x / 6 + y / 6) % 2 == 0 {
            0.2 * c as f32
        } else {
            1.0 - 0.3 * c as f32
        }
    })
}

/// Diagonal colour bands.
pub fn bands(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let t = ((x + 2 * y) as f32 / 10.0 + c as f32 * 2.1).sin();
        0.5 + 0.45 * t
    })
}

pub fn noise_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn([1, 3, h, w], |_, _, _, _| r.gen_range(0.0..1.0))
}

pub fn mse_f32(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    s / a.len() as f64
}
