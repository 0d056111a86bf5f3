//! Dense row-major kernels with hand-written backward passes.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point type the network can run in. Checkpoints store `f32`; the
/// `f64` instantiation serves gradient checking.
pub trait Scalar:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// `y[n×m] = x[n×k] · w[k×m] + b[m]`
pub fn linear<T: Scalar>(x: &[T], n: usize, k: usize, w: &[T], b: Option<&[T]>, m: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    let mut y = vec![T::zero(); n * m];
    for (xi, yi) in x.chunks_exact(k).zip(y.chunks_exact_mut(m)) {
        if let Some(b) = b {
            yi.copy_from_slice(b);
        }
        for (&xip, wp) in xi.iter().zip(w.chunks_exact(m)) {
            for (y, &w) in yi.iter_mut().zip(wp) {
                *y += xip * w;
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dw`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    k: usize,
    w: &[T],
    m: usize,
    dy: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * k];
    for ((xi, dyi), dxi) in x.chunks_exact(k).zip(dy.chunks_exact(m)).zip(dx.chunks_exact_mut(k)) {
        for ((&xip, wp), (dxp, dwp)) in xi
            .iter()
            .zip(w.chunks_exact(m))
            .zip(dxi.iter_mut().zip(dw.chunks_exact_mut(m)))
        {
            let mut acc = T::zero();
            for ((&g, &w), dw) in dyi.iter().zip(wp).zip(dwp.iter_mut()) {
                acc += g * w;
                *dw += xip * g;
            }
            *dxp = acc;
        }
    }
    if let Some(db) = db {
        for dyi in dy.chunks_exact(m) {
            for (d, &g) in db.iter_mut().zip(dyi) {
                *d += g;
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalized input before gain and bias.
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], dim: usize, gain: &[T], bias: &[T]) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / dim;
    let inv_dim = T::of(1.0 / dim as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for ((xr, yr), hr) in x
        .chunks_exact(dim)
        .zip(y.chunks_exact_mut(dim))
        .zip(xhat.chunks_exact_mut(dim))
    {
        let mean = xr.iter().copied().sum::<T>() * inv_dim;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_dim;
        let r = (var + eps).sqrt().recip();
        for (((&xv, yv), hv), (&g, &b)) in xr.iter().zip(yr).zip(hr).zip(gain.iter().zip(bias)) {
            *hv = (xv - mean) * r;
            *yv = *hv * g + b;
        }
        rstd.push(r);
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    dim: usize,
    gain: &[T],
    dy: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let inv_dim = T::of(1.0 / dim as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (((hr, dyr), dxr), &r) in cache
        .xhat
        .chunks_exact(dim)
        .zip(dy.chunks_exact(dim))
        .zip(dx.chunks_exact_mut(dim))
        .zip(&cache.rstd)
    {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..dim {
            let g = dyr[j] * gain[j];
            dgain[j] += dyr[j] * hr[j];
            dbias[j] += dyr[j];
            sum_g += g;
            sum_gx += g * hr[j];
        }
        for j in 0..dim {
            let g = dyr[j] * gain[j];
            dxr[j] = r * (g - inv_dim * sum_g - hr[j] * inv_dim * sum_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let d_inner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `ln Σ exp(row)`
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
