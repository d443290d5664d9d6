//! Small dense building blocks with hand-written backward passes.
//!
//! Everything operates on row-major `Array2<f64>` where rows are tokens.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Intermediate values of a layer-norm forward pass needed for backprop.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: ArrayView2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, LayerNormCache) {
    let (rows, dim) = x.dim();
    let mut normalized = Array2::zeros((rows, dim));
    let mut inv_std = Array1::zeros(rows);
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = istd;
        for (c, v) in row.iter().enumerate() {
            normalized[[r, c]] = (v - mean) * istd;
        }
    }
    let out = &normalized * &gamma + beta;
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    grad_out: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    cache: &LayerNormCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (rows, dim) = grad_out.dim();
    let dgamma = (&grad_out * &cache.normalized).sum_axis(Axis(0));
    let dbeta = grad_out.sum_axis(Axis(0));
    let dxhat = &grad_out * &gamma;
    let mut dx = Array2::zeros((rows, dim));
    let n = dim as f64;
    for r in 0..rows {
        let g = dxhat.row(r);
        let xh = cache.normalized.row(r);
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        let istd = cache.inv_std[r];
        for c in 0..dim {
            dx[[r, c]] = istd / n * (n * g[c] - sum_g - xh[c] * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

/// Numerically stable softmax over each row, in place.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Backward of row softmax given its output `probs`.
pub fn softmax_rows_backward(grad_out: ArrayView2<f64>, probs: ArrayView2<f64>) -> Array2<f64> {
    let mut grad = Array2::zeros(probs.dim());
    for r in 0..probs.nrows() {
        let p = probs.row(r);
        let g = grad_out.row(r);
        let dot = p.dot(&g);
        for c in 0..probs.ncols() {
            grad[[r, c]] = p[c] * (g[c] - dot);
        }
    }
    grad
}

/// `x · w + b` with `b` broadcast over rows.
pub fn affine(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + b
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]];
        softmax_rows(&mut s);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((s[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = array![[0.3, -1.2, 2.0, 0.5], [1.0, 1.5, -0.5, 0.0]];
        let gamma = array![1.1, 0.9, -0.4, 2.0];
        let beta = array![0.1, 0.0, -0.2, 0.3];
        let weights = array![[0.5, -1.0, 0.25, 2.0], [1.5, 0.3, -0.7, 0.1]];
        let objective = |x: &Array2<f64>| {
            let (y, _) = layer_norm(x.view(), gamma.view(), beta.view());
            (&y * &weights).sum()
        };
        let (_, cache) = layer_norm(x.view(), gamma.view(), beta.view());
        let (dx, _, _) = layer_norm_backward(weights.view(), gamma.view(), &cache);
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..4 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
                assert!((fd - dx[[r, c]]).abs() < 1e-7, "({r},{c}) fd={fd} an={}", dx[[r, c]]);
            }
        }
    }
}
