//! Row-major dense kernels used by the forward and backward passes.

use crate::scalar::Scalar;

/// `out[r, :] = bias + x[r, :] · w` for `x: rows×k`, `w: k×m`.
pub fn matmul_bias<T: Scalar>(
    x: &[T],
    rows: usize,
    k: usize,
    w: &[T],
    m: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), rows * m);
    for r in 0..rows {
        let o = &mut out[r * m..(r + 1) * m];
        match bias {
            Some(b) => o.copy_from_slice(b),
            None => o.iter_mut().for_each(|v| *v = T::zero()),
        }
        let xr = &x[r * k..(r + 1) * k];
        for (kk, &a) in xr.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            let wr = &w[kk * m..(kk + 1) * m];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov += a * wv;
            }
        }
    }
}

/// Accumulates gradients of `y = x·w + b` given `dy`.
///
/// `dx` (if given) is accumulated into, as are `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    k: usize,
    w: &[T],
    m: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    debug_assert_eq!(dy.len(), rows * m);
    for r in 0..rows {
        let dyr = &dy[r * m..(r + 1) * m];
        let xr = &x[r * k..(r + 1) * k];
        for (kk, &a) in xr.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            let dwr = &mut dw[kk * m..(kk + 1) * m];
            for (g, &d) in dwr.iter_mut().zip(dyr) {
                *g += a * d;
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for (g, &d) in db.iter_mut().zip(&dy[r * m..(r + 1) * m]) {
                *g += d;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * m..(r + 1) * m];
            let dxr = &mut dx[r * k..(r + 1) * k];
            for (kk, g) in dxr.iter_mut().enumerate() {
                let wr = &w[kk * m..(kk + 1) * m];
                *g += dot(dyr, wr);
            }
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four partial sums let the compiler keep several lanes busy.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Per-row layer normalisation. Stores `xhat` and `1/σ` for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm<T: Scalar>(
    x: &[T],
    rows: usize,
    d: usize,
    gain: &[T],
    bias: &[T],
    xhat: &mut [T],
    rstd: &mut [T],
    out: &mut [T],
) {
    let eps = T::lit(1e-5);
    let dn = T::from_usize(d).unwrap();
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    rows: usize,
    d: usize,
    gain: &[T],
    xhat: &[T],
    rstd: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let dn = T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        for j in 0..d {
            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_K: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v - max - lse;
    }
}
