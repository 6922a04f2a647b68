//! Dense kernels over row-major `[rows, cols]` matrices.

/// `out = W x + b` for `W: [rows, cols]`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for ((o, row), bias) in out.iter_mut().zip(w.chunks_exact(cols)).zip(b) {
        *o = bias + dot(row, x);
    }
}

/// `out += W x`.
pub fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `dx += Wᵀ dy`.
pub fn matvec_t_add(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (row, &g) in w.chunks_exact(cols).zip(dy) {
        if g != 0.0 {
            axpy(g, row, dx);
        }
    }
}

/// `dW += dy xᵀ`.
pub fn outer_add(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (row, &g) in dw.chunks_exact_mut(cols).zip(dy) {
        if g != 0.0 {
            axpy(g, x, row);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    // Floored so every probability stays strictly positive.
    for x in v.iter_mut() {
        *x = (*x / sum).max(f64::MIN_POSITIVE);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm of `x` into `out`; returns `(normalized, inv_std)` for backprop.
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64], out: &mut [f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    for i in 0..x.len() {
        out[i] = gain[i] * xhat[i] + shift[i];
    }
    (xhat, inv_std)
}

/// Accumulates layer-norm parameter gradients and `dx`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: f64,
    gain: &[f64],
    dgain: &mut [f64],
    dshift: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    for i in 0..dy.len() {
        dgain[i] += dy[i] * xhat[i];
        dshift[i] += dy[i];
        dx[i] += inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
    }
}
