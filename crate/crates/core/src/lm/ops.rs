//! Dense kernels on row-major `f64` buffers.

pub(crate) const LN_EPS: f64 = 1e-5;

/// `c = a · b + beta * c` where `a` is `m×k` (or `k×m` stored, when
/// `trans_a`) and `b` is `k×n` (or `n×k` stored, when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = x · w + bias` for `rows` rows; `w` is `d_in×d_out`.
pub(crate) fn linear(x: &[f64], w: &[f64], bias: &[f64], rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(rows, d_in, d_out, x, false, w, false, &mut y, 1.0);
    y
}

/// Backward of [`linear`]. Returns `dx`; accumulates `dw`/`db` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    d_in: usize,
    d_out: usize,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d_in];
    gemm(rows, d_out, d_in, dy, false, w, true, &mut dx, 0.0);
    if let Some((dw, db)) = grads {
        gemm(d_in, rows, d_out, x, true, dy, false, dw, 1.0);
        for r in 0..rows {
            for (g, v) in db.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
                *g += v;
            }
        }
    }
    dx
}

pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for i in 0..d {
            let h = (row[i] - mean) * s;
            xhat[r * d + i] = h;
            y[r * d + i] = h * g[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    d: usize,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dxhat[i] = dyr[i] * g[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            dx[r * d + i] = cache.rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    if let Some((dg, db)) = grads {
        for r in 0..rows {
            for i in 0..d {
                dg[i] += dy[r * d + i] * cache.xhat[r * d + i];
                db[i] += dy[r * d + i];
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Log-sum-exp and in-place softmax of `v`.
pub(crate) fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
