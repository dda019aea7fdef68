//! Row-wise kernels with their hand-derived backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Glorot-uniform matrix of shape `[fan_in, fan_out]`.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}

/// `x W + b`, row-wise.
pub fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Gradients of [`linear`]: `(dx, dW, db)`.
pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    // a single-row or single-column dy can make the product column-major
    let dw = x.t().dot(dy).as_standard_layout().into_owned();
    let db = dy.sum_axis(Axis(0));
    let dx = dy.dot(&w.t());
    (dx, dw, db)
}

pub struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let mut y = &xhat * g;
    y += b;
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &LnCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut out, dxh, xh, &rs| {
            let s1 = dxh.sum();
            let s2 = dxh.dot(&xh);
            Zip::from(&mut out).and(&dxh).and(&xh).for_each(|o, &d, &h| {
                *o = rs * (d - s1 / n - h * s2 / n);
            });
        });
    (dx, dgamma, dbeta)
}

pub fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

pub fn relu_backward(dr: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
    let mut dz = dr.clone();
    Zip::from(&mut dz).and(z).for_each(|d, &zv| {
        if zv <= 0.0 {
            *d = 0.0;
        }
    });
    dz
}

/// In-place row softmax.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Inverted dropout mask (entries 0 or 1/(1-p)).
pub fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Fixed sinusoidal table `[len, dim]`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `Σ_j max(z,0) - z t + ln(1 + e^{-|z|})` and its gradient `σ(z) - t`.
pub fn bce_with_logits(z: &[f64], t: &[f64], grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for ((&zi, &ti), g) in z.iter().zip(t).zip(grad.iter_mut()) {
        loss += zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p();
        let sig = if zi >= 0.0 {
            1.0 / (1.0 + (-zi).exp())
        } else {
            let e = zi.exp();
            e / (1.0 + e)
        };
        *g = sig - ti;
    }
    loss
}

/// Softmax cross-entropy against class `target`; writes `softmax - onehot` into `grad`.
pub fn softmax_ce(z: &[f64], target: usize, grad: &mut [f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    for (g, &v) in grad.iter_mut().zip(z) {
        *g = (v - lse).exp();
    }
    grad[target] -= 1.0;
    lse - z[target]
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn weight_gradient_is_row_major_for_single_row_batches() {
        let x = array![[1.0, 2.0, 3.0]];
        let w = Array2::zeros((3, 2));
        let dy = array![[0.5, -1.0]];
        let (_, dw, _) = linear_backward(&x.view(), &w, &dy);
        assert!(dw.as_slice().is_some());
        assert_eq!(dw, array![[0.5, -1.0], [1.0, -2.0], [1.5, -3.0]]);
    }

    #[test]
    fn uniform_softmax_ce_is_log_classes() {
        let z = vec![0.0; 17];
        let mut g = vec![0.0; 17];
        let l = softmax_ce(&z, 3, &mut g);
        assert!((l - 17f64.ln()).abs() < 1e-12);
        assert!((l - 2.8332).abs() < 1e-4);
    }

    #[test]
    fn saturated_ce_is_tiny() {
        let mut z = vec![0.0; 5];
        z[2] = 30.0;
        let mut g = vec![0.0; 5];
        assert!(softmax_ce(&z, 2, &mut g) < 1e-9);
    }

    #[test]
    fn zero_logit_bce_is_ln2_per_class() {
        let z = vec![0.0; 7];
        let t = vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut g = vec![0.0; 7];
        let l = bce_with_logits(&z, &t, &mut g);
        assert!((l - 7.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(g[0], -0.5);
        assert_eq!(g[1], 0.5);
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x = array![[0.3, -1.2, 2.0, 0.1], [1.0, 0.5, -0.5, 0.25]];
        let g = array![1.1, 0.9, -0.3, 0.7];
        let b = array![0.1, 0.0, 0.2, -0.1];
        let w = array![[0.2, -0.4, 1.0, 0.3], [0.5, 0.1, -0.7, 0.9]];
        let f = |x: &Array2<f64>| (&layer_norm(x, &g, &b).0 * &w).sum();
        let (_, cache) = layer_norm(&x, &g, &b);
        let (dx, _, _) = layer_norm_backward(&w, &g, &cache);
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoidal_table(3, 4);
        assert_eq!(t.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!((t[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }
}
