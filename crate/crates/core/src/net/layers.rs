//! Linear, layer-norm, GELU and positional encoding with their backward
//! passes. Activations are row-major `rows x features` slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::mat::{matmul, matmul_at_acc, matmul_bt};
use crate::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x (n x i) * w (i x o) + b`.
pub(crate) fn linear<T: Real>(x: &[T], n: usize, w: &[T], b: &[T], i: usize, o: usize) -> Vec<T> {
    let mut y = vec![T::ZERO; n * o];
    matmul(x, w, n, i, o, &mut y);
    for r in 0..n {
        for (yv, &bv) in y[r * o..(r + 1) * o].iter_mut().zip(b) {
            *yv += bv;
        }
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    n: usize,
    w: &[T],
    i: usize,
    o: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    matmul_at_acc(x, dy, n, i, o, dw);
    for r in 0..n {
        for (d, &g) in db.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
            *d += g;
        }
    }
    let mut dx = vec![T::ZERO; n * i];
    matmul_bt(dy, w, n, o, i, &mut dx);
    dx
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    n: usize,
    d: usize,
    gain: &[T],
    shift: &[T],
) -> (Vec<T>, NormCache<T>) {
    let mut y = vec![T::ZERO; n * d];
    let mut xhat = vec![T::ZERO; n * d];
    let mut inv_std = vec![T::ZERO; n];
    let dn = T::from_usize(d);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::ONE / (var + T::from_f64(LN_EPS)).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + shift[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    dy: &[T],
    n: usize,
    d: usize,
    gain: &[T],
    dgain: &mut [T],
    dshift: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::ZERO; n * d];
    let dn = T::from_usize(d);
    let mut dxhat = vec![T::ZERO; d];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut sum = T::ZERO;
        let mut sum_x = T::ZERO;
        for c in 0..d {
            dgain[c] += g[c] * xh[c];
            dshift[c] += g[c];
            dxhat[c] = g[c] * gain[c];
            sum += dxhat[c];
            sum_x += dxhat[c] * xh[c];
        }
        let mean = sum / dn;
        let mean_x = sum_x / dn;
        let is = cache.inv_std[r];
        for c in 0..d {
            dx[r * d + c] = is * (dxhat[c] - mean - xh[c] * mean_x);
        }
    }
    dx
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu<T: Real>(x: T) -> T {
    T::from_f64(0.5) * x * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

/// Sinusoidal encoding of a frame mark, as in the original transformer.
pub fn sinusoidal<T: Real>(mark: u32, d: usize) -> Vec<T> {
    let pos = mark as f64;
    (0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos / libm::pow(10_000.0, 2.0 * pair / d as f64);
            T::from_f64(if i % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            })
        })
        .collect()
}

/// Inverted-dropout keep mask scaled by `1 / (1 - p)`.
pub(crate) fn dropout_mask<T: Real>(n: usize, p: f64, rng: &mut dyn rand::RngCore) -> Vec<T> {
    use rand::Rng as _;
    let scale = T::from_f64(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::ZERO } else { scale })
        .collect()
}
